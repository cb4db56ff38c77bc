use proptest::prelude::*;

use tetraloss::autodiff::Tape;
use tetraloss::losses::{tetra_loss, tetra_term, triplet_loss, triplet_term};
use tetraloss::matrix::Matrix;

const DIM: usize = 6;

fn unit() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, DIM)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        .prop_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn quad() -> impl Strategy<Value = [Vec<f64>; 4]> {
    (unit(), unit(), unit(), unit()).prop_map(|(a, p, n, m)| [a, p, n, m])
}

fn batch_loss(rows: &[[Vec<f64>; 4]], margin: f64, tetra: bool) -> f64 {
    let stack = |k: usize| Matrix::from_vec(rows.len(), DIM, rows.iter().flat_map(|q| q[k].clone()).collect()).unwrap();
    let mut t = Tape::new();
    let [a, p, n, m] = [0, 1, 2, 3].map(|k| t.leaf(stack(k)));
    let l = if tetra { tetra_loss(&mut t, a, p, n, m, margin) } else { triplet_loss(&mut t, a, p, n, margin) }.unwrap();
    t.value(l).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn tetra_is_the_larger_hinge([a, p, n, m] in quad(), margin in 0.0f64..4.0) {
        let hinge = |x: &[f64]| (sq(&a, &p) + margin - sq(&a, x)).max(0.0);
        let t = tetra_term(&a, &p, &n, &m, margin);
        prop_assert!((t - hinge(&n).max(hinge(&m))).abs() <= 1e-12);
        prop_assert!(t >= triplet_term(&a, &p, &n, margin));
        prop_assert!(t >= 0.0);
        prop_assert_eq!(t == 0.0, sq(&a, &p) + margin <= sq(&a, &n).min(sq(&a, &m)));
    }

    #[test]
    fn tetra_is_symmetric_in_negative_and_morph([a, p, n, m] in quad(), margin in 0.0f64..4.0) {
        prop_assert_eq!(tetra_term(&a, &p, &n, &m, margin), tetra_term(&a, &p, &m, &n, margin));
    }

    #[test]
    fn batch_loss_is_mean_of_elements(rows in prop::collection::vec(quad(), 1..12), margin in 0.0f64..4.0) {
        let terms: Vec<f64> = rows.iter().map(|[a, p, n, m]| tetra_term(a, p, n, m, margin)).collect();
        let mean = terms.iter().sum::<f64>() / terms.len() as f64;
        prop_assert!((batch_loss(&rows, margin, true) - mean).abs() <= 1e-12);
        let zero = batch_loss(&rows, margin, true) == 0.0;
        prop_assert_eq!(zero, terms.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn concatenated_batch_is_size_weighted_mean(
        left in prop::collection::vec(quad(), 1..8),
        right in prop::collection::vec(quad(), 1..8),
        tetra in any::<bool>(),
    ) {
        let (l, r) = (batch_loss(&left, 3.0, tetra), batch_loss(&right, 3.0, tetra));
        let all: Vec<_> = left.iter().chain(&right).cloned().collect();
        let weighted = (l * left.len() as f64 + r * right.len() as f64) / all.len() as f64;
        prop_assert!((batch_loss(&all, 3.0, tetra) - weighted).abs() <= 1e-12);
    }
}

#[test]
fn margin_three_is_reachable_with_squared_distance() {
    // antipodal negative and morph, positive equal to the anchor
    let a = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let opp = [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(tetra_term(&a, &a, &opp, &opp, 3.0), 0.0);
    assert_eq!(tetra_term(&a, &a, &opp, &a, 3.0), 3.0);
}
