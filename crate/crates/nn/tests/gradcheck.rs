//! Every differentiable op against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sharecmp_nn::check::{numeric_gradient_input, relative_error};
use sharecmp_nn::{Conv2dSpec, Graph, Tensor, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

/// Builds `sum(op(inputs) * probe)` for a fixed random probe so that every
/// output element carries a distinct weight.
fn check(inputs: &[Tensor], op: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&g, &vars).value();
        Tensor::randn(out.shape().to_vec(), 1.0, &mut rng)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&g, &vars).value();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = op(&g, &vars).mul(g.constant(probe.clone())).sum();
    let grads = g.backward(loss);
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let numeric = numeric_gradient_input(&inputs[k], H, &mut |t| {
            let mut xs = inputs.to_vec();
            xs[k] = t.clone();
            eval(&xs)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOL, "input {k}: relative error {err:e}");
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn broadcast_arithmetic() {
    check(&[rand(&[2, 3, 4], 1), rand(&[3, 1], 2)], |_, v| v[0].add(v[1]));
    check(&[rand(&[2, 3, 4], 1), rand(&[4], 2)], |_, v| v[0].sub(v[1]));
    check(&[rand(&[2, 3, 4], 1), rand(&[2, 1, 4], 2)], |_, v| v[0].mul(v[1]));
    check(&[rand(&[1, 3, 1], 1), rand(&[2, 1, 5], 2)], |_, v| v[0].mul(v[1]).affine(1.5, 0.3));
}

#[test]
fn matmul_variants() {
    check(&[rand(&[2, 3, 4], 1), rand(&[4, 5], 2)], |_, v| v[0].matmul(v[1]));
    check(&[rand(&[2, 3, 4], 1), rand(&[2, 4, 5], 2)], |_, v| v[0].matmul(v[1]));
    check(&[rand(&[2, 4, 3], 1), rand(&[2, 5, 4], 2)], |_, v| v[0].matmul_t(v[1], true, true));
    check(&[rand(&[3, 4], 1), rand(&[5, 4], 2)], |_, v| v[0].matmul_t(v[1], false, true));
}

#[test]
fn shape_ops() {
    check(&[rand(&[2, 3, 4], 1)], |_, v| v[0].permute(&[2, 0, 1]).reshape(vec![4, 6]));
    check(&[rand(&[2, 6, 3], 1)], |_, v| {
        let parts = v[0].chunk(3, 1);
        parts[2].mul(parts[0]).sub(parts[1])
    });
    check(&[rand(&[2, 3], 1), rand(&[2, 2], 2)], |g, v| g.cat(&[v[0], v[1], v[0]], 1));
}

#[test]
fn pointwise_nonlinearities() {
    // Keep inputs away from the ReLU kink.
    let x = rand(&[3, 7], 3).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    check(std::slice::from_ref(&x), |_, v| v[0].relu());
    check(std::slice::from_ref(&x), |_, v| v[0].sigmoid());
    check(std::slice::from_ref(&x), |_, v| v[0].gelu());
    check(&[x], |_, v| v[0].softmax());
}

#[test]
fn prelu_per_channel_and_shared() {
    let x = rand(&[2, 3, 2, 2], 4).map(|v| if v.abs() < 0.05 { v - 0.2 } else { v });
    check(&[x.clone(), Tensor::new(vec![3], vec![0.25, -0.1, 0.6])], |_, v| v[0].prelu(v[1]));
    check(&[x, Tensor::new(vec![1], vec![0.3])], |_, v| v[0].prelu(v[1]));
}

#[test]
fn layer_norm() {
    check(&[rand(&[2, 3, 6], 5), rand(&[6], 6), rand(&[6], 7)], |_, v| v[0].layer_norm(v[1], v[2], 1e-6));
}

#[test]
fn convolutions() {
    let specs = [
        (3, 4, 3, Conv2dSpec { stride: 1, padding: 1, dilation: 1, groups: 1 }),
        (4, 4, 3, Conv2dSpec { stride: 2, padding: 1, dilation: 1, groups: 4 }),
        (4, 8, 3, Conv2dSpec { stride: 1, padding: 2, dilation: 2, groups: 4 }),
        (3, 5, 1, Conv2dSpec::default()),
        (2, 3, 7, Conv2dSpec { stride: 4, padding: 3, dilation: 1, groups: 1 }),
    ];
    for (i, (cin, cout, k, spec)) in specs.into_iter().enumerate() {
        let seed = 10 * i as u64;
        let x = rand(&[2, cin, 7, 6], seed);
        let w = rand(&[cout, cin / spec.groups, k, k], seed + 1);
        let b = rand(&[cout], seed + 2);
        check(&[x, w, b], move |_, v| v[0].conv2d(v[1], Some(v[2]), spec));
    }
}

#[test]
fn resize_and_pools() {
    let x = rand(&[2, 3, 4, 5], 8);
    check(std::slice::from_ref(&x), |_, v| v[0].resize_bilinear(9, 7));
    check(std::slice::from_ref(&x), |_, v| v[0].resize_bilinear(2, 3));
    check(std::slice::from_ref(&x), |_, v| v[0].avg_pool_global());
    check(&[x], |_, v| v[0].max_pool_global());
}

#[test]
fn cross_entropy_with_ignored_pixels() {
    let logits = rand(&[2, 4, 3, 3], 9);
    let mut targets: Vec<u8> = (0..18).map(|i| (i % 4) as u8).collect();
    targets[5] = 255;
    targets[11] = 255;
    check(&[logits], move |_, v| v[0].cross_entropy(&targets, 255));
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_gradient() {
    let g = Graph::new();
    let x = g.leaf(rand(&[1, 3, 2, 2], 1));
    let loss = x.cross_entropy(&[255; 4], 255);
    assert_eq!(loss.value().item(), 0.0);
    let grads = g.backward(loss);
    assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_matches_hand_computation() {
    // Oracle: -log softmax computed directly.
    let g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 3, 1, 1], vec![1.0, 2.0, 0.5]));
    let loss = x.cross_entropy(&[1], 255).value().item();
    let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
    approx::assert_relative_eq!(loss, -(2.0f64.exp() / z).ln(), epsilon = 1e-12);
}
