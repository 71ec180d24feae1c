use protodepth_core::adapter::{
    adapt, key_strategies, local_bias, project_keys, AdapterBank, AdapterOptions, PrototypeSet, SetSizes,
};
use protodepth_core::backbone::{tap_registry, Backbone, BackboneConfig, DepthInput, NoAdapters, TapId};
use protodepth_core::rng::substream;
use protodepth_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn keys_of(p: &Tensor, w: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let wv = tape.leaf(w.clone());
    let k = project_keys(&mut tape, pv, wv).unwrap();
    tape.value(k).clone()
}

fn bias_of(x: &Tensor, p: &Tensor, w: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = tape.leaf(p.clone());
    let wv = tape.leaf(w.clone());
    let k = project_keys(&mut tape, pv, wv).unwrap();
    let b = local_bias(&mut tape, xv, pv, k).unwrap();
    tape.value(b).clone()
}

/// Pixel-by-pixel softmax attention in f64.
fn bias_oracle(x: &Tensor, p: &Tensor, w: &Tensor) -> Vec<f64> {
    let (h, wd, c) = x.hwc().unwrap();
    let n = p.shape()[0];
    let pk = |i: usize, j: usize| p.data()[i * c + j] as f64;
    let mut keys = vec![0f64; n * c];
    for i in 0..n {
        for j in 0..c {
            keys[i * c + j] = (0..c).map(|m| pk(i, m) * w.data()[m * c + j] as f64).sum();
        }
    }
    let mut out = Vec::with_capacity(h * wd * c);
    for px in x.data().chunks_exact(c) {
        let scores: Vec<f64> = (0..n)
            .map(|i| (0..c).map(|j| px[j] as f64 * keys[i * c + j]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..c {
            out.push((0..n).map(|i| e[i] / z * pk(i, j)).sum());
        }
    }
    out
}

#[test]
fn projected_key_examples() {
    let p = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(keys_of(&p, &Tensor::eye(4)).bitwise_eq(&p));
    let k = keys_of(&t(&[1, 2], &[1.0, 0.0]), &t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
    assert_eq!(k.data(), &[0.0, 1.0]);
}

#[test]
fn local_bias_examples() {
    let x = Tensor::uniform(&[3, 2, 4], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(2));
    let b = bias_of(&x, &Tensor::zeros(&[5, 4]), &Tensor::eye(4));
    assert!(b.data().iter().all(|&v| v == 0.0));

    let b = bias_of(&t(&[1, 1, 2], &[1.0, 2.0]), &t(&[1, 2], &[0.5, -0.5]), &Tensor::eye(2));
    assert_eq!(b.shape(), &[1, 1, 2]);
    assert!((b.data()[0] - 0.5).abs() < 1e-7 && (b.data()[1] + 0.5).abs() < 1e-7);
}

#[test]
fn adapt_examples() {
    let x = Tensor::uniform(&[4, 3, 6], -3.0, 3.0, &mut ChaCha8Rng::seed_from_u64(3));
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let a = tape.leaf(Tensor::ones(&[6]));
    let p = tape.leaf(Tensor::zeros(&[2, 6]));
    let w = tape.leaf(Tensor::uniform(&[6, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
    let k = project_keys(&mut tape, p, w).unwrap();
    let out = adapt(&mut tape, xv, Some(a), p, k).unwrap();
    assert!(tape.value(out).bitwise_eq(&x));

    let mut tape = Tape::new();
    let xv = tape.leaf(t(&[1, 1, 2], &[1.0, 2.0]));
    let a = tape.leaf(t(&[2], &[2.0, 1.0]));
    let p = tape.leaf(t(&[1, 2], &[0.5, -0.5]));
    let w = tape.leaf(Tensor::eye(2));
    let k = project_keys(&mut tape, p, w).unwrap();
    let out = adapt(&mut tape, xv, Some(a), p, k).unwrap();
    assert_eq!(tape.value(out).data(), &[2.5, 1.5]);
}

proptest! {
    #[test]
    fn local_bias_matches_attention_oracle(
        seed in any::<u64>(), h in 1usize..4, w in 1usize..4, c in 1usize..7, n in 1usize..6,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[h, w, c], 1.5, &mut r);
        let p = Tensor::randn(&[n, c], 1.0, &mut r);
        let wm = Tensor::randn(&[c, c], 1.0, &mut r);
        let got = bias_of(&x, &p, &wm);
        for (g, e) in got.data().iter().zip(bias_oracle(&x, &p, &wm)) {
            prop_assert!((*g as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn local_bias_stays_in_prototype_hull(seed in any::<u64>(), n in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 3, 4], 2.0, &mut r);
        let p = Tensor::randn(&[n, 4], 1.0, &mut r);
        let b = bias_of(&x, &p, &Tensor::randn(&[4, 4], 1.0, &mut r));
        for px in b.data().chunks_exact(4) {
            for (j, v) in px.iter().enumerate() {
                let col = (0..n).map(|i| p.data()[i * 4 + j]);
                let lo = col.clone().fold(f32::INFINITY, f32::min);
                let hi = col.fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(*v >= lo - 1e-5 && *v <= hi + 1e-5);
            }
        }
    }
}

/// Gradient of `Σ g ⊙ local_bias` with respect to P.
fn prototype_grad(strategy: &str, x: &Tensor, p: &Tensor, w: &Tensor, g: &Tensor) -> Tensor {
    let s = key_strategies().get(strategy).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.leaf(p.clone());
    let wv = tape.leaf(w.clone());
    let k = s.keys(&mut tape, pv, wv).unwrap();
    let b = local_bias(&mut tape, xv, pv, k).unwrap();
    let gv = tape.constant(g.clone());
    let prod = tape.mul(b, gv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap().wrt_or_zeros(pv, p.shape())
}

#[test]
fn stop_gradient_keeps_the_key_path_out_of_prototype_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(&[3, 3, 4], 1.5, &mut r);
    let p = Tensor::randn(&[3, 4], 1.0, &mut r);
    let w = Tensor::randn(&[4, 4], 1.0, &mut r);
    let g = Tensor::randn(&[3, 3, 4], 1.0, &mut r);

    // value path only: keys supplied as a constant with the same numbers
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.leaf(p.clone());
    let k = tape.constant(keys_of(&p, &w));
    let b = local_bias(&mut tape, xv, pv, k).unwrap();
    let gv = tape.constant(g.clone());
    let prod = tape.mul(b, gv).unwrap();
    let loss = tape.sum(prod);
    let value_only = tape.backward(loss).unwrap().wrt_or_zeros(pv, p.shape());

    let detached = prototype_grad("projected", &x, &p, &w, &g);
    let attached = prototype_grad("projected-no-stop-grad", &x, &p, &w, &g);
    assert!(detached.bitwise_eq(&value_only));
    assert!(detached.max_abs_diff(&attached) > 1e-4);

    assert!(bias_of(&x, &p, &w).bitwise_eq(&{
        let s = key_strategies().get("projected-no-stop-grad").unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = tape.leaf(p.clone());
        let wv = tape.leaf(w.clone());
        let k = s.keys(&mut tape, pv, wv).unwrap();
        let b = local_bias(&mut tape, xv, pv, k).unwrap();
        tape.value(b).clone()
    }));
}

#[test]
fn fresh_sets_are_exact_identities() {
    let mut rng = substream(5, "test");
    for strategy in ["projected", "projected-no-stop-grad", "free"] {
        for n in [1usize, 2, 5, 10] {
            let options = AdapterOptions {
                key_strategy: strategy.into(),
                ..AdapterOptions::default()
            };
            let tap = tap_registry()[0];
            let s = key_strategies().get(strategy).unwrap();
            let set = PrototypeSet::init(&tap, 2, n, &options, s.as_ref(), &mut rng).unwrap();
            let x = Tensor::randn(&[4, 5, tap.channels], 2.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let a = tape.leaf(set.a.clone());
            let p = tape.leaf(set.p.clone());
            let w = tape.leaf(set.w.clone());
            let k = s.keys(&mut tape, p, w).unwrap();
            let out = adapt(&mut tape, xv, Some(a), p, k).unwrap();
            assert!(tape.value(out).bitwise_eq(&x), "{strategy} n={n}");
        }
    }
}

fn input_tensors(h: usize, w: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::uniform(&[h, w, 3], 0.0, 1.0, &mut r);
    let mask = Tensor::uniform(&[h, w], 0.0, 1.0, &mut r).map(|v| if v < 0.1 { 1.0 } else { 0.0 });
    let sparse = Tensor::uniform(&[h, w], 0.5, 4.0, &mut r).zip_map(&mask, |z, m| z * m).unwrap();
    (image, sparse, mask)
}

#[test]
fn new_domain_leaves_the_forward_pass_unchanged() {
    let net = Backbone::new(BackboneConfig::default(), 3).unwrap();
    let (image, sparse, mask) = input_tensors(16, 24, 4);
    let input = DepthInput {
        image: &image,
        sparse: &sparse,
        mask: &mask,
    };
    let plain = net.predict(&input, &mut NoAdapters).unwrap();
    for sizes in [SetSizes::INDOOR, SetSizes::OUTDOOR, SetSizes { n_image: 1, n_depth: 1 }] {
        let mut bank = AdapterBank::new(
            AdapterOptions {
                sizes,
                ..AdapterOptions::default()
            },
            tap_registry(),
        )
        .unwrap();
        bank.new_domain(2, &mut substream(1, "p")).unwrap();
        let mut hook = bank.hook(2, false).unwrap();
        assert!(net.predict(&input, &mut hook).unwrap().bitwise_eq(&plain));
        assert_eq!(hook.bound.len(), 7);
    }
}

#[test]
fn bank_rules() {
    let mut bank = AdapterBank::new(AdapterOptions::default(), tap_registry()).unwrap();
    let mut rng = substream(2, "bank");
    bank.new_domain(2, &mut rng).unwrap();
    assert!(bank.new_domain(2, &mut rng).is_err());
    assert!(!bank.is_frozen(2));
    let before = bank.sets(2).unwrap().to_vec();
    bank.new_domain(3, &mut rng).unwrap();
    assert!(bank.is_frozen(2));
    assert!(bank.sets_mut(2).is_err());
    assert!(bank.hook(2, true).is_err());
    assert!(bank.hook(2, false).is_ok());
    bank.sets_mut(3).unwrap()[0].p.data_mut()[0] += 1.0;
    assert_eq!(bank.sets(2).unwrap(), before.as_slice());
    assert_eq!(bank.domains().collect::<Vec<_>>(), vec![2, 3]);
    // a domain without sets means the unadapted backbone
    assert!(bank.hook(1, false).unwrap().bound.is_empty());
}

#[test]
fn parameters_per_domain_follow_the_tap_table() {
    let taps = tap_registry();
    let cases = [
        ("projected", true),
        ("projected", false),
        ("free", true),
    ];
    for (strategy, use_global) in cases {
        let options = AdapterOptions {
            sizes: SetSizes { n_image: 10, n_depth: 5 },
            key_strategy: strategy.into(),
            use_global,
            init_std: 0.1,
        };
        let bank = AdapterBank::new(options, taps.clone()).unwrap();
        let expect: usize = taps
            .iter()
            .map(|t| {
                let n = match t.id {
                    TapId::ImgS1 | TapId::ImgS2 | TapId::ImgS3 => 10,
                    TapId::DepS1 | TapId::DepS2 | TapId::DepS3 => 5,
                    TapId::Bottleneck => 10,
                };
                let c = t.channels;
                let keys = if strategy == "free" { n * c } else { c * c };
                (if use_global { c } else { 0 }) + n * c + keys
            })
            .sum();
        assert_eq!(bank.parameters_per_domain(), expect, "{strategy} {use_global}");
    }
}

#[test]
fn set_sizes_parse_and_validate() {
    assert_eq!(SetSizes::parse("10x5").unwrap(), SetSizes { n_image: 10, n_depth: 5 });
    assert!(SetSizes::parse("0x5").is_err());
    assert!(SetSizes::parse("ten").is_err());
    assert_eq!(SetSizes { n_image: 3, n_depth: 2 }.to_string(), "3x2");
}

#[test]
fn bank_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut bank = AdapterBank::new(AdapterOptions::default(), tap_registry()).unwrap();
    bank.new_domain(2, &mut substream(7, "x")).unwrap();
    bank.sets_mut(2).unwrap()[3].w.data_mut()[5] = 0.25;
    bank.freeze(2);
    bank.save(dir.path(), "abc").unwrap();
    let (back, hash) = AdapterBank::load(dir.path()).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(back.sets(2), bank.sets(2));
    assert!(back.is_frozen(2));
    assert_eq!(back.options(), bank.options());
}
