use mgmap_tensor::{checkpoint, Graph, Tensor};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..40)
}

proptest! {
    #[test]
    fn softmax_normalizes_and_ignores_shift(x in vec_strategy(), shift in -50.0f64..50.0) {
        let n = x.len();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(x.clone())).unwrap();
        let s = g.softmax(a, 0).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = g.constant(Tensor::from_vec(shifted)).unwrap();
        let t = g.softmax(b, 0).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(g.value(s).data().iter().all(|&v| v >= 0.0));
        for i in 0..n {
            prop_assert!((g.value(s).data()[i] - g.value(t).data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(0.0f64..1.0, 2..30), q in prop::collection::vec(0.0f64..1.0, 2..30)) {
        let n = p.len().min(q.len());
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum::<f64>() + 1e-12;
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (norm(&p[..n]), norm(&q[..n]));
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(p.clone())).unwrap();
        let b = g.constant(Tensor::from_vec(q)).unwrap();
        let k = g.kl_divergence(a, b).unwrap();
        prop_assert!(g.value(k).item() >= -1e-7);
        let s = g.kl_divergence(a, a).unwrap();
        prop_assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn checkpoint_round_trips(vals in prop::collection::vec(-1e6f32..1e6, 0..50), name in "[a-z/_]{1,12}") {
        let mut m = BTreeMap::new();
        let n = vals.len();
        m.insert(name, Tensor::new(vec![n], vals).unwrap());
        let bytes = checkpoint::encode(&m);
        prop_assert_eq!(checkpoint::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn shared_use_sums_gradients(x in -10.0f64..10.0, k in 1usize..6) {
        let mut g = Graph::<f64>::new();
        let v = g.variable(Tensor::scalar(x)).unwrap();
        let mut acc = v;
        for _ in 1..k {
            acc = g.add(acc, v).unwrap();
        }
        g.backward(acc).unwrap();
        prop_assert_eq!(g.grad(v).unwrap()[0], k as f64);
    }
}
