use protodepth_core::metrics::{average_forgetting, average_performance, check_complete, spto, Table};
use proptest::prelude::*;

fn table(t: usize, f: impl Fn(usize, usize) -> f64) -> Table {
    (0..t).map(|j| (0..t).map(|k| (j <= k).then(|| f(j, k))).collect()).collect()
}

fn two(a11: f64, a12: f64, a22: f64) -> Table {
    vec![vec![Some(a11), Some(a12)], vec![None, Some(a22)]]
}

// Direct evaluations that walk the table in a different order from the library.
fn forgetting_oracle(a: &Table) -> f64 {
    let t = a.len();
    let mut terms = Vec::new();
    for (j, row) in a.iter().enumerate() {
        for cell in row.iter().skip(j + 1) {
            terms.push((cell.unwrap() - row[j].unwrap()) / row[j].unwrap());
        }
    }
    if t < 2 {
        return 0.0;
    }
    100.0 * terms.iter().sum::<f64>() / (t * (t - 1) / 2) as f64
}

fn performance_oracle(a: &Table) -> f64 {
    let cells: Vec<f64> = a.iter().flatten().flatten().copied().collect();
    cells.iter().sum::<f64>() / cells.len() as f64
}

fn spto_oracle(a: &Table) -> f64 {
    let t = a.len();
    let s: f64 = a.iter().map(|row| row[t - 1].unwrap()).sum();
    let p: f64 = a.iter().enumerate().map(|(j, row)| row[j].unwrap()).sum();
    1.0 / ((1.0 / s + 1.0 / p) / 2.0)
}

#[test]
fn worked_examples() {
    assert_eq!(average_forgetting(&two(10.0, 12.0, 20.0)).unwrap(), 20.0);
    assert_eq!(average_forgetting(&two(10.0, 8.0, 20.0)).unwrap(), -20.0);
    assert_eq!(average_performance(&two(10.0, 12.0, 20.0)).unwrap(), 14.0);
    let v = spto(&two(10.0, 12.0, 20.0)).unwrap();
    assert_eq!(v, 1920.0 / 62.0);
    assert!((v - 30.968).abs() < 1e-3);
}

#[test]
fn degenerate_tables() {
    let flat = table(4, |_, _| 7.5);
    assert_eq!(average_forgetting(&flat).unwrap(), 0.0);
    assert_eq!(average_performance(&flat).unwrap(), 7.5);
    assert!((spto(&flat).unwrap() - 30.0).abs() < 1e-12);

    let single = vec![vec![Some(3.25)]];
    assert_eq!(average_forgetting(&single).unwrap(), 0.0);
    assert_eq!(average_performance(&single).unwrap(), 3.25);
    assert_eq!(spto(&single).unwrap(), 3.25);
}

#[test]
fn malformed_tables_are_rejected() {
    assert!(check_complete(&vec![]).is_err());
    assert!(check_complete(&vec![vec![Some(1.0), None], vec![None, Some(2.0)]]).is_err());
    assert!(check_complete(&vec![vec![Some(1.0), Some(1.0)], vec![Some(1.0), Some(2.0)]]).is_err());
    assert!(check_complete(&vec![vec![Some(1.0), Some(1.0)], vec![None]]).is_err());
    assert!(average_forgetting(&two(0.0, 1.0, 2.0)).is_err());
}

proptest! {
    #[test]
    fn summaries_match_direct_evaluation(t in 1usize..7, cells in prop::collection::vec(0.01f64..5000.0, 36)) {
        let a = table(t, |j, k| cells[j * 6 + k]);
        prop_assert!((average_forgetting(&a).unwrap() - forgetting_oracle(&a)).abs() < 1e-9);
        prop_assert!((average_performance(&a).unwrap() - performance_oracle(&a)).abs() < 1e-9);
        prop_assert!((spto(&a).unwrap() - spto_oracle(&a)).abs() < 1e-9);
    }

    #[test]
    fn spto_lies_between_stability_and_plasticity(t in 1usize..7, cells in prop::collection::vec(0.01f64..5000.0, 36)) {
        let a = table(t, |j, k| cells[j * 6 + k]);
        let s: f64 = (0..t).map(|j| a[j][t - 1].unwrap()).sum();
        let p: f64 = (0..t).map(|j| a[j][j].unwrap()).sum();
        let v = spto(&a).unwrap();
        prop_assert!(v >= s.min(p) - 1e-9 && v <= s.max(p) + 1e-9);
    }

    #[test]
    fn unchanged_rows_mean_zero_forgetting(t in 1usize..7, diag in prop::collection::vec(0.01f64..100.0, 6)) {
        let a = table(t, |j, _| diag[j]);
        prop_assert_eq!(average_forgetting(&a).unwrap(), 0.0);
    }
}
