use proptest::prelude::*;
use tensorgrad::{Bindings, Graph, Tensor};

fn bind(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Bindings<f64> {
    [(name.to_string(), Tensor::new(shape, data).unwrap())]
        .into_iter()
        .collect()
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..7).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-50.0f64..50.0, r * c),
        )
    })
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one((r, c, data) in matrix(), seed in any::<u64>()) {
        let mut keep: Vec<bool> = (0..r * c).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        for row in 0..r {
            keep[row * c] = true;
        }
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[r, c]);
        let p = g.masked_softmax(x, keep.clone());
        g.set_root(p);
        let out = g.forward_eval(&bind("x", vec![r, c], data)).unwrap();
        for row in 0..r {
            let s: f64 = out.row(row).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for (col, &v) in out.row(row).iter().enumerate() {
                prop_assert!(v >= 0.0);
                if !keep[row * c + col] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn all_masked_reductions_are_zero_with_zero_gradient((r, c, data) in matrix()) {
        for mean in [false, true] {
            let mut g = Graph::<f64>::new();
            let x = g.parameter("x", &[r, c]);
            let y = if mean {
                g.masked_mean(x, vec![false; r * c])
            } else {
                g.masked_sum(x, vec![false; r * c])
            };
            g.set_root(y);
            let out = g.forward_eval(&bind("x", vec![r, c], data.clone())).unwrap();
            prop_assert_eq!(out.item().unwrap(), 0.0);
            let grads = g.backward().unwrap();
            prop_assert_eq!(grads["x"].max_abs(), 0.0);
        }
    }

    #[test]
    fn entropy_is_within_zero_and_log_width((r, c, data) in matrix()) {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[r, c]);
        let h = g.entropy(x);
        g.set_root(h);
        let out = g.forward_eval(&bind("x", vec![r, c], data)).unwrap();
        for &e in out.data() {
            prop_assert!(e >= -1e-12 && e <= (c as f64).ln() + 1e-12);
        }
    }
}
