//! Parameterised building blocks.

use crate::graph::{Graph, Var};
use crate::kernels::Conv2dSpec;
use crate::params::{Init, ParamId, ParamStore};
use crate::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

/// Everything a module needs during one forward pass.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub store: &'g ParamStore,
    pub training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, training: bool, seed: u64) -> Self {
        Self { graph, store, training, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    /// Evaluation-mode context (dropout disabled).
    pub fn eval(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self::new(graph, store, false, 0)
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        self.graph.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// Inverted dropout; identity outside training or when `rate == 0`.
    pub fn dropout(&self, x: Var<'g>, rate: f64) -> Var<'g> {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mut rng = self.rng.borrow_mut();
        let mask = Tensor::from_fn(x.shape(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        x.mul(self.graph.constant(mask))
    }
}

/// Affine map over the last axis; the weight is stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::TruncNormal { std: 0.02 })
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], init);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let last = *shape.last().expect("linear input must have rank >= 1");
        assert_eq!(last, self.in_dim, "linear expects {} features, got {last}", self.in_dim);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let y = x.reshape(vec![rows, last]).matmul(ctx.param(self.weight));
        let y = match self.bias {
            Some(b) => y.add(ctx.param(b)),
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(out_shape)
    }
}

/// Convolution over `(n, c, h, w)` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// Weights drawn from `N(0, 2 / fan_out)`, the usual choice for ReLU-family nets.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let fan_out = (kernel * kernel * out_channels / spec.groups).max(1);
        let init = Init::Normal { std: (2.0 / fan_out as f64).sqrt() };
        Self::with_init(store, name, in_channels, out_channels, kernel, spec, bias, init)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        init: Init,
    ) -> Self {
        assert_eq!(in_channels % spec.groups, 0, "{name}: in_channels not divisible by groups");
        assert_eq!(out_channels % spec.groups, 0, "{name}: out_channels not divisible by groups");
        let weight =
            store.add(format!("{name}.weight"), &[out_channels, in_channels / spec.groups, kernel, kernel], init);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_channels], Init::Zeros));
        Self { weight, bias, in_channels, out_channels, kernel, spec }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.spec)
    }

    /// Multiply-accumulates for one output of the given spatial size.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel * out_h * out_w) as u64
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.weight"), &[dim], Init::Ones);
        let beta = store.add(format!("{name}.bias"), &[dim], Init::Zeros);
        Self { gamma, beta, eps }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), self.eps)
    }

    /// Normalises the channel axis of an `(n, c, h, w)` tensor.
    pub fn forward_nchw<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.permute(&[0, 2, 3, 1]);
        self.forward(ctx, y).permute(&[0, 3, 1, 2])
    }
}

/// `(n, c, h, w)` to `(n, h*w, c)`.
pub fn nchw_to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape(vec![s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

/// `(n, h*w, c)` to `(n, c, h, w)`.
pub fn tokens_to_nchw(x: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let s = x.shape();
    assert_eq!(s[1], h * w, "token count {} does not match {h}x{w}", s[1]);
    x.permute(&[0, 2, 1]).reshape(vec![s[0], s[2], h, w])
}
