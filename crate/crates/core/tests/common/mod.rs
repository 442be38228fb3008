//! Finite-difference micro-cases shared by the gradient tests and the
//! acceptance run. Each case returns `(parameter name, relative error)` for
//! every parameter, plus any input leaves.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sharecmp::cpa::{build_targets, cpa_loss, CpaConfig, CpaHead};
use sharecmp::decoder::{seg_loss, Decoder, DecoderConfig};
use sharecmp::encoder::{Encoder, EncoderConfig};
use sharecmp::image::IGNORE_LABEL;
use sharecmp::pga::{Pga, PgaConfig};
use sharecmp::stages::StageSet;
use sharecmp_nn::check::{numeric_gradient, numeric_gradient_input, relative_error};
use sharecmp_nn::{Ctx, Gradients, Graph, ParamStore, Tensor, Var};
use std::collections::BTreeSet;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ weights ⊙ x`: a scalar that depends on every output element with
/// distinct sensitivities.
pub fn probe<'g>(x: Var<'g>, seed: u64) -> Var<'g> {
    x.mul(x.graph().constant(randn(&x.shape(), seed))).sum()
}

/// A scalar loss over the parameters in `store` and the given inputs. Built
/// with `leaves` when gradients with respect to the inputs are wanted.
pub type LossFn<'a> = dyn for<'g> Fn(&Ctx<'g>, &[Var<'g>]) -> Var<'g> + 'a;

/// Compares analytic and central-difference gradients for every parameter
/// and every input.
pub fn check(store: &mut ParamStore, inputs: &[Tensor], training: bool, loss: &LossFn) -> Vec<(String, f64)> {
    let grads: Gradients;
    let input_grads: Vec<Tensor>;
    {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, training, 7);
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let l = loss(&ctx, &leaves);
        grads = g.backward(l);
        input_grads =
            leaves.iter().map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect();
    }
    let eval = |store: &ParamStore, inputs: &[Tensor]| {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, training, 7);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        loss(&ctx, &vars).value().item()
    };
    let mut out = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
        let numeric = numeric_gradient(store, id, STEP, &mut |s| eval(s, inputs));
        out.push((store.name(id).to_string(), relative_error(&analytic, &numeric)));
    }
    for (k, analytic) in input_grads.iter().enumerate() {
        let numeric = numeric_gradient_input(&inputs[k], STEP, &mut |x| {
            let mut probe_inputs = inputs.to_vec();
            probe_inputs[k] = x.clone();
            eval(store, &probe_inputs)
        });
        out.push((format!("input{k}"), relative_error(analytic, &numeric)));
    }
    out
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a })
}

/// Full PGA on four 8×8 colour angle images.
pub fn pga_case() -> Vec<(String, f64)> {
    let cfg = PgaConfig { mid_channels: 2, ..PgaConfig::default() };
    let mut store = ParamStore::new(0);
    let pga = Pga::new(&mut store, &cfg);
    store.randomize(1, 0.5);
    let inputs: Vec<Tensor> = (0..4).map(|k| randn(&[1, 3, 8, 8], 10 + k)).collect();
    check(&mut store, &inputs, false, &|ctx, x| {
        let out = pga.forward(ctx, [x[0], x[1], x[2], x[3]]).unwrap();
        probe(out.image, 99)
    })
}

/// A micro encoder: stage 1 (separate embeddings, 2× key reduction) on 8×8
/// inputs and stage 2 (shared embedding) on its 2×2 outputs.
pub fn encoder_stage_case() -> Vec<(String, f64)> {
    let cfg = EncoderConfig {
        dims: [4, 4, 4, 4],
        depths: [1, 1, 1, 1],
        heads: [2, 1, 1, 1],
        sr_ratios: [2, 1, 1, 1],
        mlp_ratio: 2,
        me_opembed_stages: StageSet::of(&[1]),
        ..EncoderConfig::mit_b2()
    };
    let mut store = ParamStore::new(0);
    let enc = Encoder::new(&mut store, &cfg);
    // Random weights everywhere, so zero-initialised gates also carry gradient.
    store.randomize(2, 0.5);
    let inputs = vec![randn(&[1, 3, 8, 8], 20), randn(&[1, 3, 8, 8], 21)];
    check(&mut store, &inputs, false, &|ctx, x| {
        let s1 = enc.forward_stage(ctx, 1, x[0], x[1]).unwrap();
        let s2 = enc.forward_stage(ctx, 2, s1.rgb_rectified, s1.polar_rectified).unwrap();
        probe(s1.fused, 30).add(probe(s2.fused, 31)).add(probe(s2.rgb_rectified, 32)).add(probe(s2.polar_rectified, 33))
    })
}

/// CPA head on stages 3 and 4 plus the CPA loss against mask-built targets,
/// at an 8×8 input resolution.
pub fn cpa_case() -> Vec<(String, f64)> {
    let dims = [4, 4, 4, 4];
    let mut store = ParamStore::new(0);
    let head = CpaHead::new(&mut store, &dims, 4, 3, StageSet::of(&[3, 4]));
    store.randomize(3, 0.5);
    let inputs =
        vec![randn(&[1, 4, 2, 2], 40), randn(&[1, 4, 1, 1], 41), randn(&[1, 4, 1, 1], 42), randn(&[1, 4, 1, 1], 43)];
    let mask: Vec<u8> = (0..64).map(|i| if i % 11 == 0 { IGNORE_LABEL } else { (i % 3) as u8 }).collect();
    let aolp = Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i as f64) * 0.7).sin());
    let dolp = Tensor::from_fn(vec![1, 1, 8, 8], |i| 0.5 + 0.4 * ((i as f64) * 0.3).cos());
    let targets = build_targets(&aolp, &dolp, &mask, 3).unwrap();
    let cfg = CpaConfig { active_stages: StageSet::of(&[3, 4]), lambda: 0.01, ..CpaConfig::default() };
    check(&mut store, &inputs, false, &|ctx, x| {
        let est = head.forward(ctx, x, 8, 8).unwrap();
        cpa_loss(&est, &targets, &cfg).unwrap()
    })
}

/// MLP decoder and the masked cross-entropy at 8×8, with dropout active.
pub fn decoder_case() -> Vec<(String, f64)> {
    let dims = [4, 4, 4, 4];
    let mut store = ParamStore::new(0);
    let dec = Decoder::new(&mut store, &dims, 3, &DecoderConfig { embed_dim: 4, dropout: 0.1 });
    store.randomize(4, 0.5);
    let inputs =
        vec![randn(&[1, 4, 2, 2], 50), randn(&[1, 4, 1, 1], 51), randn(&[1, 4, 1, 1], 52), randn(&[1, 4, 1, 1], 53)];
    let mask: Vec<u8> = (0..64).map(|i| if i % 13 == 0 { IGNORE_LABEL } else { (i * 7 % 3) as u8 }).collect();
    check(&mut store, &inputs, true, &|ctx, x| seg_loss(dec.forward(ctx, x, 8, 8).unwrap(), &mask))
}

/// IoU from explicit pixel sets, with nothing shared with the matrix code.
pub fn brute_force_miou(pred: &[u8], truth: &[u8], classes: usize) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| truth[i] != IGNORE_LABEL && pred[i] == c).collect();
        let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
        let union = p.union(&t).count();
        if union > 0 {
            ious.push(p.intersection(&t).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}
