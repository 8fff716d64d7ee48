//! Forward semantics, determinism, and the operator invariants.

use gavatar_tensor::{Graph, Tensor, NORM_EPS};
use rand::{Rng, SeedableRng};

#[test]
fn matmul_identity_returns_input() {
    let mut g = Graph::new();
    let eye = g
        .constant(Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
        .unwrap();
    let a = Tensor::new(&[3, 3], vec![2., -1., 0.5, 3., 7., -2., 0.1, 0.2, 0.3]).unwrap();
    let av = g.constant(a.clone()).unwrap();
    let y = g.matmul(eye, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn softmax_uniform_on_equal_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4])).unwrap();
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let x = Tensor::from_fn(&[5, 9], |_| r.gen_range(-30.0..30.0));
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let y = g.softmax(xv).unwrap();
        for row in 0..5 {
            let s: f64 = g.value(y).row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {}", s);
        }
    }
}

#[test]
fn group_norm_moments_before_affine() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let groups = 4;
    let x = Tensor::from_fn(&[8, 6, 6], |_| r.gen_range(-2.0..5.0));
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let gamma = g.constant(Tensor::ones(&[8])).unwrap();
    let beta = g.constant(Tensor::zeros(&[8])).unwrap();
    let y = g.group_norm(xv, gamma, beta, groups).unwrap();
    let data = g.value(y).data();
    let g_sz = data.len() / groups;
    for gi in 0..groups {
        let seg = &data[gi * g_sz..(gi + 1) * g_sz];
        let mean = seg.iter().sum::<f64>() / g_sz as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g_sz as f64;
        assert!(mean.abs() < 1e-10, "group mean {}", mean);
        assert!((var - 1.0).abs() < 1e-8, "group var {}", var);
    }
}

#[test]
fn conv_stack_1024_reaches_32x32() {
    // Stride-2 k3 stack, channels 3 -> 8 and doubling to a max of 128:
    // five layers take a 1024x1024 input to a 32x32 feature map.
    let mut g = Graph::new();
    let mut x = g.constant(Tensor::zeros(&[3, 1024, 1024])).unwrap();
    let mut c_in = 3usize;
    let mut c_out = 8usize;
    let mut layers = 0;
    while g.shape(x)[1] > 32 {
        let w = g.constant(Tensor::zeros(&[c_out, c_in, 3, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[c_out])).unwrap();
        x = g.conv2d(x, w, b, 2, 1).unwrap();
        c_in = c_out;
        c_out = (c_out * 2).min(128);
        layers += 1;
    }
    assert_eq!(layers, 5);
    assert_eq!(g.shape(x), &[128, 32, 32]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2])).unwrap();
    let y = g.relu(x).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn square_gradient_and_off_path_leaf() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0)).unwrap();
    let unused = g.param(Tensor::scalar(5.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
    // A leaf not on the path to the loss gets exactly zero.
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.get_or_zeros(unused, &[1]).item(), 0.0);
}

#[test]
fn gradient_accumulates_across_uses() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0)).unwrap();
    let a = g.mul(x, x).unwrap(); // x^2, d=4
    let b = g.add(x, a).unwrap(); // x + x^2, d=5
    let grads = g.backward(b).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 5.0);
}

#[test]
fn shape_mismatch_reports_offending_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4, 2])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{}", msg);
}

#[test]
fn non_finite_input_rejected() {
    let mut g = Graph::new();
    assert!(g.constant(Tensor::scalar(f64::NAN)).is_err());
    // With finite checks on, ops reject poisoned values too.
    let mut g = Graph::with_finite_checks();
    let a = g.constant(Tensor::scalar(800.0)).unwrap();
    let e = g.exp(a).unwrap(); // overflows to +inf
    assert!(g.div(e, e).is_err());
}

#[test]
fn forward_backward_deterministic() {
    let run = || {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::from_fn(&[3, 4], |_| r.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[4, 2], |_| r.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.param(x).unwrap();
        let wv = g.param(w).unwrap();
        let y = g.matmul(xv, wv).unwrap();
        let y = g.tanh(y).unwrap();
        let loss = g.mean_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        (
            g.value(loss).item().to_bits(),
            grads.get(wv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn norm_eps_is_small_enough_for_unit_variance() {
    // |var_out - 1| = eps / (var + eps); unit variance must normalize
    // within 1e-8 of 1, which needs eps well below 1e-8.
    assert!(NORM_EPS / (1.0 + NORM_EPS) < 1e-8);
}
