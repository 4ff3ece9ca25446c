use bindlab_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in matrix(3, 5)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3, 5], v).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.values(y).chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(v in matrix(1, 6), c in -50.0f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![6], v.clone()).unwrap());
        let shifted = g.constant(Tensor::from_vec(vec![6], v.iter().map(|a| a + c).collect()).unwrap());
        let a = g.softmax(x, 0).unwrap();
        let b = g.softmax(shifted, 0).unwrap();
        for (p, q) in g.values(a).iter().zip(g.values(b)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(v in matrix(4, 8)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![4, 8], v.clone()).unwrap());
        let gain = g.constant(Tensor::filled(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for (out, inp) in g.values(y).chunks(8).zip(v.chunks(8)) {
            let mean = out.iter().sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            let m_in = inp.iter().sum::<f64>() / 8.0;
            let var_in = inp.iter().map(|a| (a - m_in).powi(2)).sum::<f64>() / 8.0;
            let var = out.iter().map(|a| a * a).sum::<f64>() / 8.0;
            // unit variance up to the epsilon regularization
            prop_assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_ops_stay_finite(v in matrix(3, 4)) {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3, 4], v).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let p = g.softplus(x);
        let e = g.gelu(x);
        let t = g.transpose(e).unwrap();
        let m = g.matmul(s, t).unwrap();
        let total = g.sum(m);
        let sp = g.sum(p);
        let loss = g.add(total, sp).unwrap();
        g.backward(loss).unwrap();
        prop_assert!(g.value(loss).is_finite());
        prop_assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_inputs_give_identical_bits(v in matrix(2, 4)) {
        let run = |v: &[f64]| {
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(vec![2, 4], v.to_vec()).unwrap());
            let xt = g.transpose(x).unwrap();
            let y = g.matmul(x, xt).unwrap();
            let y = g.softmax(y, 0).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            (g.values(y).to_vec(), g.grad(x).unwrap().to_vec())
        };
        let (a, ga) = run(&v);
        let (b, gb) = run(&v);
        prop_assert_eq!(a.iter().map(|f| f.to_bits()).collect::<Vec<_>>(), b.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(ga.iter().map(|f| f.to_bits()).collect::<Vec<_>>(), gb.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
    }
}
