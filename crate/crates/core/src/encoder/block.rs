//! Transformer trunk: efficient self-attention and Mix-FFN.

use sharecmp_nn::{nchw_to_tokens, tokens_to_nchw, Conv2d, Conv2dSpec, Ctx, LayerNorm, Linear, ParamStore, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Multi-head attention whose keys and values come from a spatially reduced
/// copy of the token grid (a strided `sr×sr` convolution) when `sr > 1`.
#[derive(Clone, Debug)]
pub struct EfficientAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    dim: usize,
}

impl EfficientAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, sr: usize) -> Self {
        assert_eq!(dim % heads, 0, "{name}: dim {dim} not divisible by {heads} heads");
        let reduce = (sr > 1).then(|| {
            let spec = Conv2dSpec { stride: sr, ..Default::default() };
            (
                Conv2d::new(store, &format!("{name}.sr"), dim, dim, sr, spec, true),
                LayerNorm::new(store, &format!("{name}.sr_norm"), dim, LN_EPS),
            )
        });
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true),
            kv: Linear::new(store, &format!("{name}.kv"), dim, 2 * dim, true),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true),
            reduce,
            heads,
            dim,
        }
    }

    /// `x` is `(n, h·w, dim)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>, h: usize, w: usize) -> Var<'g> {
        let [n, len, _] = x.shape()[..] else { panic!("attention expects rank-3 tokens") };
        let d = self.dim / self.heads;
        let q = self.q.forward(ctx, x).reshape(vec![n, len, self.heads, d]).permute(&[0, 2, 1, 3]);
        let source = match &self.reduce {
            Some((conv, norm)) => {
                let grid = conv.forward(ctx, tokens_to_nchw(x, h, w));
                norm.forward(ctx, nchw_to_tokens(grid))
            }
            None => x,
        };
        let kv_len = source.shape()[1];
        let kv = self.kv.forward(ctx, source).reshape(vec![n, kv_len, 2, self.heads, d]).permute(&[2, 0, 3, 1, 4]);
        let k = kv.narrow(0, 0, 1).reshape(vec![n, self.heads, kv_len, d]);
        let v = kv.narrow(0, 1, 1).reshape(vec![n, self.heads, kv_len, d]);
        let attn = q.matmul_t(k, false, true).scale((d as f64).powf(-0.5)).softmax();
        let out = attn.matmul(v).permute(&[0, 2, 1, 3]).reshape(vec![n, len, self.dim]);
        self.proj.forward(ctx, out)
    }
}

/// Linear → 3×3 depth-wise convolution → GELU → linear.
#[derive(Clone, Debug)]
pub struct MixFfn {
    fc1: Linear,
    dw: Conv2d,
    fc2: Linear,
}

impl MixFfn {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Self {
        let spec = Conv2dSpec { padding: 1, groups: hidden, ..Default::default() };
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true),
            dw: Conv2d::new(store, &format!("{name}.dwconv"), hidden, hidden, 3, spec, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>, h: usize, w: usize) -> Var<'g> {
        let y = self.fc1.forward(ctx, x);
        let y = nchw_to_tokens(self.dw.forward(ctx, tokens_to_nchw(y, h, w)));
        self.fc2.forward(ctx, y.gelu())
    }
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    norm1: LayerNorm,
    attn: EfficientAttention,
    norm2: LayerNorm,
    mlp: MixFfn,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, sr: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, LN_EPS),
            attn: EfficientAttention::new(store, &format!("{name}.attn"), dim, heads, sr),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, LN_EPS),
            mlp: MixFfn::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>, h: usize, w: usize) -> Var<'g> {
        let x = x.add(self.attn.forward(ctx, self.norm1.forward(ctx, x), h, w));
        x.add(self.mlp.forward(ctx, self.norm2.forward(ctx, x), h, w))
    }
}

/// Overlapping strided convolution followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        dim: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let spec = Conv2dSpec { stride, padding: kernel / 2, ..Default::default() };
        Self {
            proj: Conv2d::new(store, &format!("{name}.proj"), in_channels, dim, kernel, spec, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, LN_EPS),
            in_channels,
        }
    }

    /// `(n, c, H, W)` to tokens `(n, h·w, dim)` plus the token grid size.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> (Var<'g>, usize, usize) {
        let grid = self.proj.forward(ctx, x);
        let (h, w) = (grid.shape()[2], grid.shape()[3]);
        (self.norm.forward(ctx, nchw_to_tokens(grid)), h, w)
    }
}
