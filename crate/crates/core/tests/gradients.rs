mod common;

use common::{gradient_error, Net};
use proptest::prelude::*;
use rae_core::tensor::{finite_diff_grad, softmax, Graph, Tensor};

#[test]
fn autodiff_matches_reference_differences() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let net = Net::random(seed);
        let (err, gap) = gradient_error(&net);
        assert!(gap <= 1e-4, "seed {seed}: forward passes disagree by {gap}");
        assert!(err <= 1e-3, "seed {seed}: relative gradient error {err}");
        worst = worst.max(err);
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn f32_differences_agree_on_smooth_graph() {
    let x = Tensor::new(vec![2, 2, 1], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
    let w = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::from_vec(vec![0.1, -0.2, 0.05]);
    let loss_of = |x: &Tensor| -> Result<f32, rae_core::tensor::TensorError> {
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let l = g.dense(xi, wi, bi)?;
        let l = g.softmax_cross_entropy(l, 1)?;
        Ok(g.value(l).item())
    };
    let fd = finite_diff_grad(loss_of, &x, 1e-2).unwrap();
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
    let l = g.dense(xi, wi, bi).unwrap();
    let l = g.softmax_cross_entropy(l, 1).unwrap();
    let grads = g.backward(l).unwrap();
    for (a, f) in grads.get(xi).unwrap().data().iter().zip(fd.data()) {
        assert!((a - f).abs() < 1e-3, "{a} vs {f}");
    }
}

#[test]
fn unused_leaf_has_zero_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let b = g.leaf(Tensor::from_vec(vec![5.0]));
    let s = g.sum(a).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
    assert!(grads.get(b).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f32..30.0, 1..12)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sum_gradient_is_ones(v in prop::collection::vec(-5.0f32..5.0, 1..20)) {
        let n = v.len();
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(v));
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        prop_assert_eq!(ga.data().len(), n);
        for (gi, xi) in ga.data().iter().zip(g.value(a).data()) {
            prop_assert!((gi - 2.0 * xi).abs() < 1e-5);
        }
    }
}
