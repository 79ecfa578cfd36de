use proptest::prelude::*;
use ufl_autodiff::{Real, Tape, Tensor};

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-30.0f64..30.0, r * c),
        )
    })
}

fn tensor(shape: Vec<usize>, data: &[f64]) -> Tensor {
    Tensor::new(shape, data.iter().map(|&x| x as Real).collect()).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, c, data) in matrix(), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(vec![r, c], &data));
        let ls = tape.log_softmax(x).unwrap();
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let y = tape.constant(tensor(vec![r, c], &shifted));
        let ls2 = tape.log_softmax(y).unwrap();
        for i in 0..r {
            let row = tape.value(ls).row(i);
            let total: f64 = row.iter().map(|&v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (a, b) in row.iter().zip(tape.value(ls2).row(i)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalized_rows_are_unit_and_scale_free((r, c, data) in matrix(), scale in 0.01f64..100.0) {
        prop_assume!(data.chunks(c).all(|row| row.iter().any(|v| v.abs() > 1e-3)));
        let mut tape = Tape::new();
        let x = tape.constant(tensor(vec![r, c], &data));
        let n = tape.l2_normalize(x, 1).unwrap();
        let scaled: Vec<f64> = data.iter().map(|v| v * scale).collect();
        let y = tape.constant(tensor(vec![r, c], &scaled));
        let m = tape.l2_normalize(y, 1).unwrap();
        for i in 0..r {
            let norm: f64 = tape.value(n).row(i).iter().map(|&v| v * v).sum();
            prop_assert!((norm - 1.0).abs() < 1e-9);
            for (a, b) in tape.value(n).row(i).iter().zip(tape.value(m).row(i)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linear_matches_naive_product(
        (b, i, o) in (1usize..5, 1usize..6, 1usize..5),
        seed in prop::collection::vec(-2.0f64..2.0, 64),
    ) {
        let xs: Vec<f64> = seed.iter().cycle().take(b * i).copied().collect();
        let ws: Vec<f64> = seed.iter().rev().cycle().take(o * i).copied().collect();
        let bs: Vec<f64> = seed.iter().skip(3).cycle().take(o).copied().collect();
        let mut tape = Tape::new();
        let x = tape.constant(tensor(vec![b, i], &xs));
        let w = tape.constant(tensor(vec![o, i], &ws));
        let bias = tape.constant(tensor(vec![o], &bs));
        let y = tape.linear(w, Some(bias), x).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[b, o]);
        for r in 0..b {
            for k in 0..o {
                let want: f64 = bs[k] + (0..i).map(|j| xs[r * i + j] * ws[k * i + j]).sum::<f64>();
                prop_assert!((tape.value(y).row(r)[k] as f64 - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss((r, c, data) in matrix(), k in -5.0f64..5.0) {
        let mut tape = Tape::new();
        let x = tape.param(tensor(vec![r, c], &data));
        let e = tape.exp(x);
        let s = tape.sum(e);
        let g1 = tape.backward(s).unwrap().get(x).unwrap().clone();
        let scaled = tape.scalar_mul(s, k as Real);
        let g2 = tape.backward(scaled).unwrap().get(x).unwrap().clone();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            let want = *a * k;
            prop_assert!((*b - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }
}
