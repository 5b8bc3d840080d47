use mgmap_tensor::gradcheck::{self, rel_err};
use mgmap_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences_in_f64() {
    let reports = gradcheck::op_suite(20, 2024).unwrap();
    assert!(reports.len() >= 30);
    for r in &reports {
        assert_eq!(r.cases, 20);
        assert!(r.passed(1e-5), "{}: max rel err {:e}", r.op, r.max_rel_err);
    }
}

#[test]
fn matmul_gradient_at_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |a: &[f32], b: &[f32]| -> (f32, Vec<f32>, Vec<f32>) {
        let mut g = Graph::<f32>::new();
        let va = g
            .variable(Tensor::new(vec![3, 4], a.to_vec()).unwrap())
            .unwrap();
        let vb = g
            .variable(Tensor::new(vec![4, 2], b.to_vec()).unwrap())
            .unwrap();
        let c = g.matmul(va, vb).unwrap();
        let w = g
            .constant(Tensor::new(vec![3, 2], r.clone()).unwrap())
            .unwrap();
        let p = g.mul(c, w).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        (
            g.value(l).item(),
            g.grad(va).unwrap().to_vec(),
            g.grad(vb).unwrap().to_vec(),
        )
    };
    let (_, ga, gb) = loss(&a, &b);
    let eps = 1e-2f32;
    let mut worst = 0.0f64;
    for j in 0..12 {
        let (mut p, mut m) = (a.clone(), a.clone());
        p[j] += eps;
        m[j] -= eps;
        let num = (loss(&p, &b).0 - loss(&m, &b).0) / (2.0 * eps);
        worst = worst.max(rel_err(ga[j] as f64, num as f64));
    }
    for j in 0..8 {
        let (mut p, mut m) = (b.clone(), b.clone());
        p[j] += eps;
        m[j] -= eps;
        let num = (loss(&a, &p).0 - loss(&a, &m).0) / (2.0 * eps);
        worst = worst.max(rel_err(gb[j] as f64, num as f64));
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn unknown_op_name_is_none() {
    assert!(gradcheck::check_op("no_such_op", 1, 0).unwrap().is_none());
}
