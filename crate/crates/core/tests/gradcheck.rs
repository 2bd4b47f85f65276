//! Per-op gradient checks: analytic reverse-mode gradients vs. central
//! finite differences in f64 on small random probes (relative error < 1e-6).

mod common;

use std::rc::Rc;

use common::finite_difference;
use grl_core::tensor::kernels::Activation;
use grl_core::tensor::PoolMode;
use grl_core::{Graph64, NodeId, Tensor, Tensor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph64, NodeId) -> NodeId;

/// Reduce an arbitrary output to a scalar with a fixed random projection so
/// every output element influences the loss.
fn scalarize(g: &mut Graph64, out: NodeId, weights: &Tensor64) -> NodeId {
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[1, n]).unwrap();
    let wv = g.leaf(weights.clone()).unwrap();
    let prod = g.matmul(flat, wv).unwrap();
    g.sum_all(prod).unwrap()
}

/// Max relative error between analytic and numeric gradients w.r.t. the
/// probe input.
fn gradcheck(build: &Build, x0: &Tensor64, seed: u64) -> f64 {
    let mut g = Graph64::new();
    let x = g.param(0, x0.clone()).unwrap();
    let out = build(&mut g, x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor64::randn(&[g.value(out).numel(), 1], 1.0, &mut rng);
    let loss = scalarize(&mut g, out, &weights);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(x).expect("probe input must be connected").clone();

    let shape = x0.shape().to_vec();
    let mut eval = |xs: &[f64]| -> f64 {
        let mut g = Graph64::new();
        let x = g
            .param(0, Tensor64::from_vec(shape.clone(), xs.to_vec()).unwrap())
            .unwrap();
        let out = build(&mut g, x);
        let loss = scalarize(&mut g, out, &weights);
        g.value(loss).data()[0]
    };
    let numeric = finite_difference(&mut eval, x0.data(), 1e-5);

    analytic
        .data()
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| common::rel_err(a, n))
        .fold(0.0, f64::max)
}

fn randn(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor64::randn(shape, 1.0, &mut rng)
}

/// Nudge values away from zero (relu kink) while keeping them random.
fn randn_off_zero(shape: &[usize], seed: u64) -> Tensor64 {
    randn(shape, seed).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
}

const TOL: f64 = 1e-6;

macro_rules! check {
    ($name:ident, $x0:expr, $build:expr) => {
        #[test]
        fn $name() {
            let x0 = $x0;
            let err = gradcheck(&$build, &x0, 1000);
            assert!(err < TOL, "max rel err {err}");
        }
    };
}

check!(grad_matmul_lhs, randn(&[3, 4], 1), |g: &mut Graph64, x| {
    let b = g.leaf(randn(&[4, 2], 2)).unwrap();
    g.matmul(x, b).unwrap()
});

check!(grad_matmul_rhs, randn(&[4, 2], 3), |g: &mut Graph64, x| {
    let a = g.leaf(randn(&[3, 4], 4)).unwrap();
    g.matmul(a, x).unwrap()
});

check!(grad_transpose_reshape_scale, randn(&[3, 4], 5), |g: &mut Graph64, x| {
    let t = g.transpose(x).unwrap();
    let r = g.reshape(t, &[2, 6]).unwrap();
    g.scale(r, -1.7).unwrap()
});

check!(grad_add, randn(&[2, 5], 6), |g: &mut Graph64, x| {
    let b = g.leaf(randn(&[2, 5], 7)).unwrap();
    g.add(x, b).unwrap()
});

check!(grad_softmax, randn(&[3, 5], 8), |g: &mut Graph64, x| {
    g.softmax_rows(x).unwrap()
});

check!(grad_pairwise_sqdist_q, randn(&[3, 4], 9), |g: &mut Graph64, x| {
    let k = g.leaf(randn(&[5, 4], 10)).unwrap();
    g.pairwise_sqdist(x, k).unwrap()
});

check!(grad_pairwise_sqdist_k, randn(&[5, 4], 11), |g: &mut Graph64, x| {
    let q = g.leaf(randn(&[3, 4], 12)).unwrap();
    g.pairwise_sqdist(q, x).unwrap()
});

check!(grad_linear_x, randn(&[4, 3], 13), |g: &mut Graph64, x| {
    let w = g.leaf(randn(&[3, 2], 14)).unwrap();
    let b = g.leaf(randn(&[2], 15)).unwrap();
    g.linear(x, w, b).unwrap()
});

check!(grad_linear_w, randn(&[3, 2], 16), |g: &mut Graph64, x| {
    let xin = g.leaf(randn(&[4, 3], 17)).unwrap();
    let b = g.leaf(randn(&[2], 18)).unwrap();
    g.linear(xin, x, b).unwrap()
});

check!(grad_linear_b, randn(&[2], 19), |g: &mut Graph64, x| {
    let xin = g.leaf(randn(&[4, 3], 20)).unwrap();
    let w = g.leaf(randn(&[3, 2], 21)).unwrap();
    g.linear(xin, w, x).unwrap()
});

check!(grad_conv2d_x, randn(&[2, 4, 5], 22), |g: &mut Graph64, x| {
    let k = g.leaf(randn(&[3, 2, 3, 3], 23)).unwrap();
    let b = g.leaf(randn(&[3], 24)).unwrap();
    g.conv2d(x, k, b, 1).unwrap()
});

check!(grad_conv2d_k, randn(&[3, 2, 3, 3], 25), |g: &mut Graph64, x| {
    let xin = g.leaf(randn(&[2, 4, 5], 26)).unwrap();
    let b = g.leaf(randn(&[3], 27)).unwrap();
    g.conv2d(xin, x, b, 1).unwrap()
});

check!(grad_conv2d_b, randn(&[3], 28), |g: &mut Graph64, x| {
    let xin = g.leaf(randn(&[2, 4, 5], 29)).unwrap();
    let k = g.leaf(randn(&[3, 2, 3, 3], 30)).unwrap();
    g.conv2d(xin, k, x, 1).unwrap()
});

check!(grad_pool_avg, randn(&[2, 4, 6], 31), |g: &mut Graph64, x| {
    g.pool2d_axes(x, 2, 3, PoolMode::Avg).unwrap()
});

check!(grad_pool_max, randn(&[2, 4, 6], 32), |g: &mut Graph64, x| {
    g.pool2d_axes(x, 2, 2, PoolMode::Max).unwrap()
});

check!(grad_layer_norm_x, randn(&[3, 6], 33), |g: &mut Graph64, x| {
    let gamma = g.leaf(randn(&[6], 34)).unwrap();
    let beta = g.leaf(randn(&[6], 35)).unwrap();
    g.layer_norm(x, gamma, beta, 1e-5).unwrap()
});

check!(grad_layer_norm_gamma, randn(&[6], 36), |g: &mut Graph64, x| {
    let xin = g.leaf(randn(&[3, 6], 37)).unwrap();
    let beta = g.leaf(randn(&[6], 38)).unwrap();
    g.layer_norm(xin, x, beta, 1e-5).unwrap()
});

check!(grad_gelu, randn(&[2, 5], 39), |g: &mut Graph64, x| {
    g.activation(x, Activation::Gelu).unwrap()
});

check!(grad_relu, randn_off_zero(&[2, 5], 40), |g: &mut Graph64, x| {
    g.activation(x, Activation::Relu).unwrap()
});

check!(grad_sigmoid, randn(&[2, 5], 41), |g: &mut Graph64, x| {
    g.activation(x, Activation::Sigmoid).unwrap()
});

check!(grad_pixel_shuffle, randn(&[4, 2, 3], 42), |g: &mut Graph64, x| {
    g.pixel_shuffle(x, 2).unwrap()
});

check!(grad_remap_spatial, randn(&[2, 3, 3], 43), |g: &mut Graph64, x| {
    // pad-like map with duplicated sources
    let src = Rc::new(vec![0, 1, 2, 2, 3, 4, 5, 5, 6, 7, 8, 8, 6, 7, 8, 8]);
    g.remap_spatial(x, src, 4, 4).unwrap()
});

check!(grad_gather_tokens, randn(&[3, 2, 3], 44), |g: &mut Graph64, x| {
    g.gather_tokens(x, Rc::new(vec![4, 0, 3, 1, 5, 2])).unwrap()
});

check!(grad_scatter_tokens, randn(&[4, 3], 45), |g: &mut Graph64, x| {
    let other = g.leaf(randn(&[2, 3], 46)).unwrap();
    g.scatter_tokens(
        &[x, other],
        &[Rc::new(vec![5, 0, 3, 2]), Rc::new(vec![1, 4])],
        2,
        3,
    )
    .unwrap()
});

check!(grad_slices_and_concats, randn(&[4, 6], 47), |g: &mut Graph64, x| {
    let a = g.slice_rows(x, 0, 2).unwrap();
    let b = g.slice_rows(x, 2, 2).unwrap();
    let cat = g.concat_cols(&[a, b]).unwrap();
    let c = g.slice_cols(cat, 3, 6).unwrap();
    let d = g.slice_cols(cat, 0, 3).unwrap();
    let e = g.slice_cols(cat, 9, 3).unwrap();
    let de = g.concat_cols(&[d, e]).unwrap();
    g.concat_rows(&[c, de]).unwrap()
});

check!(grad_global_avg_pool, randn(&[3, 2, 4], 48), |g: &mut Graph64, x| {
    g.global_avg_pool(x).unwrap()
});

check!(grad_channel_scale_x, randn(&[3, 2, 2], 49), |g: &mut Graph64, x| {
    let gate = g.leaf(randn(&[1, 3], 50)).unwrap();
    g.channel_scale(x, gate).unwrap()
});

check!(grad_channel_scale_gate, randn(&[1, 3], 51), |g: &mut Graph64, x| {
    let xin = g.leaf(randn(&[3, 2, 2], 52)).unwrap();
    g.channel_scale(xin, x).unwrap()
});

check!(grad_add_indexed_bias_x, randn(&[3, 3], 53), |g: &mut Graph64, x| {
    let table = g.leaf(randn(&[5], 54)).unwrap();
    g.add_indexed_bias(x, table, Rc::new(vec![0, 1, 2, 3, 4, 0, 1, 2, 3]))
        .unwrap()
});

check!(grad_add_indexed_bias_table, randn(&[5], 55), |g: &mut Graph64, x| {
    let xin = g.leaf(randn(&[3, 3], 56)).unwrap();
    g.add_indexed_bias(xin, x, Rc::new(vec![0, 1, 2, 3, 4, 0, 1, 2, 3]))
        .unwrap()
});

#[test]
fn grad_l1_loss_matches_sign_form() {
    // loss = mean|a − b| with well-separated values: grad a = sign/n
    let a0 = randn(&[2, 5], 57).map(|v| v + 3.0);
    let b0 = randn(&[2, 5], 58).map(|v| v - 3.0);
    let mut g = Graph64::new();
    let a = g.param(0, a0.clone()).unwrap();
    let b = g.leaf(b0.clone()).unwrap();
    let loss = g.l1_loss(a, b).unwrap();
    let grads = g.backward(loss).unwrap();
    let da = grads.get(a).unwrap();
    for i in 0..10 {
        let sign = (a0.data()[i] - b0.data()[i]).signum();
        assert!((da.data()[i] - sign / 10.0).abs() < 1e-15);
    }
    // and against finite differences
    let mut eval = |xs: &[f64]| -> f64 {
        let mut g = Graph64::new();
        let a = g
            .param(0, Tensor64::from_vec(vec![2, 5], xs.to_vec()).unwrap())
            .unwrap();
        let b = g.leaf(b0.clone()).unwrap();
        let loss = g.l1_loss(a, b).unwrap();
        g.value(loss).data()[0]
    };
    let numeric = finite_difference(&mut eval, a0.data(), 1e-5);
    for (g_a, g_n) in da.data().iter().zip(numeric) {
        assert!(common::rel_err(*g_a, g_n) < TOL);
    }
}

#[test]
fn grad_sum_all() {
    let x0 = randn(&[7], 59);
    let mut g = Graph64::new();
    let x = g.param(0, x0).unwrap();
    let loss = g.sum_all(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    let _ = Tensor::<f64>::zeros(&[1]);
}
