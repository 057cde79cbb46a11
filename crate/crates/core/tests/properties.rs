//! Property-based invariants of the numeric core and the metrics.

use clarify::evaluation::{average_ranks, spearman};
use clarify::rng::stream;
use clarify::tensor::Mode;
use clarify::{Graph, Tensor};
use proptest::prelude::*;

fn softmax_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(rows).unwrap());
    let p = g.softmax(x).unwrap();
    g.value(p).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..5),
        shift in -100.0f64..100.0,
    ) {
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let (a, b) = (softmax_rows(&rows), softmax_rows(&shifted));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for row in a.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_is_invariant_to_monotone_maps(
        pairs in prop::collection::vec((0u8..12, 0u8..12), 3..40),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let fx: Vec<f64> = x.iter().map(|v| (v / 3.0).exp() * 2.0 - 7.0).collect();
        let gy: Vec<f64> = y.iter().map(|v| v * v * v + 0.5).collect();
        prop_assert_eq!(average_ranks(&x), average_ranks(&fx));
        match (spearman(&x, &y), spearman(&fx, &gy)) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn spearman_flips_sign_under_reversal(
        pairs in prop::collection::vec((0u8..20, 0u8..20), 3..30),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&neg, &y)) {
            prop_assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval(x in -700.0f64..700.0) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x));
        let s = g.sigmoid(v).unwrap();
        let y = g.value(s).item();
        prop_assert!(y >= 0.0 && y <= 1.0);
        if x.abs() < 30.0 {
            prop_assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn eval_dropout_is_identity(values in prop::collection::vec(-5.0f64..5.0, 1..20), p in 0.0f64..0.95) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(values.clone()));
        let y = g.dropout(x, p, Mode::Eval, &mut stream(1, "p", 0)).unwrap();
        prop_assert_eq!(g.value(y).data(), values.as_slice());
    }
}

#[test]
fn backward_hand_values() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0), true);
    let y = g.sigmoid(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(g.backward(x).is_err());
}
