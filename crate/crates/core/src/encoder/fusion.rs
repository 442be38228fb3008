//! Per-stage cross-modal rectification (FRM) and fusion (FFM).
//!
//! The paper defers both modules to CMX. The rectification here is a
//! branch-symmetric variant: one gate network, evaluated as
//! `gate(self, other)` for either branch, so swapping the branches swaps the
//! outputs exactly. The fusion follows CMX's cross-path attention and channel
//! embedding with layer norms in place of batch norms.

use super::block::LN_EPS;
use sharecmp_nn::{
    nchw_to_tokens, tokens_to_nchw, Conv2d, Conv2dSpec, Ctx, Init, LayerNorm, Linear, ParamId, ParamStore, Var,
};

/// Channel and spatial gates computed from `(source, partner)`.
#[derive(Clone, Debug)]
struct Gates {
    fc1: Linear,
    fc2: Linear,
    spatial1: Conv2d,
    spatial2: Conv2d,
}

impl Gates {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let one = Conv2dSpec::default();
        Self {
            fc1: Linear::new(store, &format!("{name}.channel.fc1"), 4 * dim, 4 * dim, true),
            fc2: Linear::with_init(store, &format!("{name}.channel.fc2"), 4 * dim, dim, true, Init::Zeros),
            spatial1: Conv2d::new(store, &format!("{name}.spatial.conv1"), 2 * dim, dim, 1, one, true),
            spatial2: Conv2d::with_init(store, &format!("{name}.spatial.conv2"), dim, 1, 1, one, true, Init::Zeros),
        }
    }

    /// `(n, c, 1, 1)` channel gate and `(n, 1, h, w)` spatial gate, both in (0, 1).
    fn forward<'g>(&self, ctx: &Ctx<'g>, source: Var<'g>, partner: Var<'g>) -> (Var<'g>, Var<'g>) {
        let g = source.graph();
        let [n, c, _, _] = source.shape()[..] else { unreachable!() };
        let pooled = g.cat(
            &[source.avg_pool_global(), source.max_pool_global(), partner.avg_pool_global(), partner.max_pool_global()],
            1,
        );
        let channel = self.fc2.forward(ctx, self.fc1.forward(ctx, pooled).relu()).sigmoid();
        let both = g.cat(&[source, partner], 1);
        let spatial = self.spatial2.forward(ctx, self.spatial1.forward(ctx, both).relu()).sigmoid();
        (channel.reshape(vec![n, c, 1, 1]), spatial)
    }
}

/// `y_rgb' = y_rgb + a·cg(y_p, y_rgb)⊙y_p + b·sg(y_p, y_rgb)⊙y_p`, and the
/// mirror image for the polarisation branch. `a` and `b` start at zero so a
/// fresh module is the identity.
#[derive(Clone, Debug)]
pub struct Rectify {
    gates: Gates,
    channel_weight: ParamId,
    spatial_weight: ParamId,
}

impl Rectify {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gates: Gates::new(store, name, dim),
            channel_weight: store.add(format!("{name}.channel_weight"), &[1], Init::Zeros),
            spatial_weight: store.add(format!("{name}.spatial_weight"), &[1], Init::Zeros),
        }
    }

    /// Both inputs `(n, c, h, w)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, rgb: Var<'g>, polar: Var<'g>) -> (Var<'g>, Var<'g>) {
        let (a, b) = (ctx.param(self.channel_weight), ctx.param(self.spatial_weight));
        let correction = |source: Var<'g>, partner: Var<'g>| {
            let (cg, sg) = self.gates.forward(ctx, source, partner);
            cg.mul(source).mul(a).add(sg.mul(source).mul(b))
        };
        let to_rgb = correction(polar, rgb);
        let to_polar = correction(rgb, polar);
        (rgb.add(to_rgb), polar.add(to_polar))
    }
}

#[derive(Clone, Debug)]
struct CrossBranch {
    channel_proj: Linear,
    kv: Linear,
    end_proj: Linear,
    norm: LayerNorm,
}

impl CrossBranch {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            channel_proj: Linear::new(store, &format!("{name}.channel_proj"), dim, 2 * dim, true),
            kv: Linear::new(store, &format!("{name}.kv"), dim, 2 * dim, false),
            end_proj: Linear::new(store, &format!("{name}.end_proj"), 2 * dim, dim, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, LN_EPS),
        }
    }
}

/// Cross-path attention followed by a convolutional channel embedding of the
/// concatenated branches, producing the fused stage feature.
#[derive(Clone, Debug)]
pub struct Fuse {
    rgb: CrossBranch,
    polar: CrossBranch,
    residual: Conv2d,
    embed_in: Conv2d,
    embed_dw: Conv2d,
    embed_out: Conv2d,
    embed_norm: LayerNorm,
    norm: LayerNorm,
    heads: usize,
    dim: usize,
}

impl Fuse {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        let one = Conv2dSpec::default();
        let dw = Conv2dSpec { padding: 1, groups: dim, ..Default::default() };
        Self {
            rgb: CrossBranch::new(store, &format!("{name}.cross.rgb"), dim),
            polar: CrossBranch::new(store, &format!("{name}.cross.polar"), dim),
            residual: Conv2d::new(store, &format!("{name}.embed.residual"), 2 * dim, dim, 1, one, false),
            embed_in: Conv2d::new(store, &format!("{name}.embed.proj_in"), 2 * dim, dim, 1, one, true),
            embed_dw: Conv2d::new(store, &format!("{name}.embed.dwconv"), dim, dim, 3, dw, true),
            embed_out: Conv2d::new(store, &format!("{name}.embed.proj_out"), dim, dim, 1, one, true),
            embed_norm: LayerNorm::new(store, &format!("{name}.embed.embed_norm"), dim, LN_EPS),
            norm: LayerNorm::new(store, &format!("{name}.embed.norm"), dim, LN_EPS),
            heads,
            dim,
        }
    }

    /// Splits `(n, l, c)` into heads, `(n, heads, l, d)`.
    fn heads_of<'g>(&self, x: Var<'g>) -> Var<'g> {
        let [n, l, _] = x.shape()[..] else { unreachable!() };
        x.reshape(vec![n, l, self.heads, self.dim / self.heads]).permute(&[0, 2, 1, 3])
    }

    /// Global context `softmax_rows(kᵀv · scale)` per head, `(n, heads, d, d)`.
    fn context<'g>(&self, ctx: &Ctx<'g>, branch: &CrossBranch, u: Var<'g>) -> Var<'g> {
        let [n, l, _] = u.shape()[..] else { unreachable!() };
        let d = self.dim / self.heads;
        let kv = branch.kv.forward(ctx, u).reshape(vec![n, l, 2, self.heads, d]).permute(&[2, 0, 3, 1, 4]);
        let k = kv.narrow(0, 0, 1).reshape(vec![n, self.heads, l, d]);
        let v = kv.narrow(0, 1, 1).reshape(vec![n, self.heads, l, d]);
        // Softmax over the key axis (dim −2).
        k.matmul_t(v, true, false).scale((d as f64).powf(-0.5)).transpose(2, 3).softmax().transpose(2, 3)
    }

    /// Both inputs `(n, c, h, w)`; returns `(n, c, h, w)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, rgb: Var<'g>, polar: Var<'g>) -> Var<'g> {
        let [n, _, h, w] = rgb.shape()[..] else { unreachable!() };
        let (x1, x2) = (nchw_to_tokens(rgb), nchw_to_tokens(polar));
        let split = |b: &CrossBranch, x: Var<'g>| {
            let parts = b.channel_proj.forward(ctx, x).relu().chunk(2, 2);
            (parts[0], parts[1])
        };
        let (y1, u1) = split(&self.rgb, x1);
        let (y2, u2) = split(&self.polar, x2);
        let (c1, c2) = (self.context(ctx, &self.rgb, u1), self.context(ctx, &self.polar, u2));
        let merge_heads = |a: Var<'g>| a.permute(&[0, 2, 1, 3]).reshape(vec![n, h * w, self.dim]);
        let v1 = merge_heads(self.heads_of(u1).matmul(c2));
        let v2 = merge_heads(self.heads_of(u2).matmul(c1));
        let g = rgb.graph();
        let out = |b: &CrossBranch, x: Var<'g>, y: Var<'g>, v: Var<'g>| {
            b.norm.forward(ctx, x.add(b.end_proj.forward(ctx, g.cat(&[y, v], 2))))
        };
        let o1 = out(&self.rgb, x1, y1, v1);
        let o2 = out(&self.polar, x2, y2, v2);
        let merged = tokens_to_nchw(g.cat(&[o1, o2], 2), h, w);
        let embed = self.embed_in.forward(ctx, merged);
        let embed = self.embed_dw.forward(ctx, embed).relu();
        let embed = self.embed_norm.forward_nchw(ctx, self.embed_out.forward(ctx, embed));
        self.norm.forward_nchw(ctx, self.residual.forward(ctx, merged).add(embed))
    }
}
