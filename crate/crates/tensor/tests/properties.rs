use proptest::prelude::*;
use protodepth_tensor::{io, Tape, Tensor};

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..7).prop_flat_map(|(m, n)| {
        prop::collection::vec(-30.0f32..30.0, m * n)
            .prop_map(move |d| Tensor::new(vec![m, n], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(), shift in -50i32..50) {
        // multiples of 1/64 plus an integer stay exact in f32
        let x = x.map(|v| (v * 64.0).round() / 64.0);
        let shift = shift as f32;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.softmax_rows(xv).unwrap();
        let shifted = tape.constant(x.map(|v| v + shift));
        let ys = tape.softmax_rows(shifted).unwrap();
        let n = x.shape()[1];
        for row in tape.value(y).data().chunks(n) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
        prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) <= 1e-6);
    }

    #[test]
    fn pdt1_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&shape, 3.0, &mut rng);
        let bytes = io::to_bytes(&t);
        prop_assert_eq!(&bytes[..4], b"PDT1");
        prop_assert_eq!(bytes[4], 0);
        prop_assert_eq!(bytes[5] as usize, shape.len());
        prop_assert_eq!(bytes.len(), 6 + 4 * shape.len() + 4 * t.len());
        let back = io::read_pdt1(bytes.as_slice()).unwrap();
        prop_assert!(back.bitwise_eq(&t));
    }
}

#[test]
fn pdt1_layout_is_little_endian() {
    let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
    let bytes = io::to_bytes(&t);
    let mut expected = b"PDT1".to_vec();
    expected.extend([0u8, 2]);
    expected.extend(1u32.to_le_bytes());
    expected.extend(2u32.to_le_bytes());
    expected.extend(1.0f32.to_le_bytes());
    expected.extend((-2.5f32).to_le_bytes());
    assert_eq!(bytes, expected);
}

#[test]
fn pdt1_rejects_bad_streams() {
    assert!(io::read_pdt1(&b"PDT2\x00\x00"[..]).is_err());
    assert!(io::read_pdt1(&b"PDT1\x01\x00\x00\x00\x80\x3f"[..]).is_err());
    let mut trailing = io::to_bytes(&Tensor::scalar(1.0));
    trailing.push(0);
    assert!(io::read_pdt1(trailing.as_slice()).is_err());
}
