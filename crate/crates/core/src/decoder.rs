//! All-MLP segmentation decoder and the cross-entropy loss.

use crate::error::{Error, Result};
use crate::image::IGNORE_LABEL;
use serde::{Deserialize, Serialize};
use sharecmp_nn::{
    nchw_to_tokens, tokens_to_nchw, Conv2d, Conv2dSpec, Ctx, LayerNorm, Linear, ParamStore, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { embed_dim: 256, dropout: 0.1 }
    }
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        Self { embed_dim: 64, ..Self::default() }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.embed_dim == 0 {
            return Err("decoder.embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("decoder.dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    linears: Vec<Linear>,
    fuse: Conv2d,
    fuse_norm: LayerNorm,
    classifier: Conv2d,
    num_classes: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, dims: &[usize; 4], num_classes: usize, cfg: &DecoderConfig) -> Self {
        let e = cfg.embed_dim;
        let one = Conv2dSpec::default();
        let linears = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(store, &format!("decoder.linear_c{}", i + 1), d, e, true))
            .collect();
        Self {
            cfg: cfg.clone(),
            linears,
            fuse: Conv2d::new(store, "decoder.fuse", 4 * e, e, 1, one, false),
            fuse_norm: LayerNorm::new(store, "decoder.fuse_norm", e, 1e-5),
            classifier: Conv2d::new(store, "decoder.classifier", e, num_classes, 1, one, true),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Logits at stride 4, `(n, Cls, H/4, W/4)`.
    pub fn forward_stride4<'g>(&self, ctx: &Ctx<'g>, fused: &[Var<'g>]) -> Result<Var<'g>> {
        if fused.len() != 4 {
            return Err(Error::InvalidInput(format!("decoder needs four stage features, got {}", fused.len())));
        }
        let base = fused[0].shape();
        let (h4, w4) = (base[2], base[3]);
        let mut projected = Vec::with_capacity(4);
        for (i, (f, lin)) in fused.iter().zip(&self.linears).enumerate().rev() {
            let s = f.shape();
            if s.len() != 4 || s[1] != lin.in_dim {
                return Err(Error::InvalidInput(format!(
                    "decoder stage {} feature has shape {s:?}, expected {} channels",
                    i + 1,
                    lin.in_dim
                )));
            }
            let p = tokens_to_nchw(lin.forward(ctx, nchw_to_tokens(*f)), s[2], s[3]);
            projected.push(p.resize_bilinear(h4, w4));
        }
        let cat = fused[0].graph().cat(&projected, 1);
        let fused = self.fuse_norm.forward_nchw(ctx, self.fuse.forward(ctx, cat)).relu();
        let fused = ctx.dropout(fused, self.cfg.dropout);
        Ok(self.classifier.forward(ctx, fused))
    }

    /// Logits upsampled to `(n, Cls, height, width)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, fused: &[Var<'g>], height: usize, width: usize) -> Result<Var<'g>> {
        Ok(self.forward_stride4(ctx, fused)?.resize_bilinear(height, width))
    }
}

/// Mean cross-entropy over pixels whose label is not 255; zero (with a
/// warning) when every pixel is ignored.
pub fn seg_loss<'g>(logits: Var<'g>, mask: &[u8]) -> Var<'g> {
    if mask.iter().all(|&m| m == IGNORE_LABEL) {
        log::warn!("segmentation loss: every pixel carries the ignore label; loss is 0");
    }
    logits.cross_entropy(mask, IGNORE_LABEL)
}

/// Per-pixel argmax of `(n, Cls, H, W)` logits; ties go to the lowest class.
pub fn predict(logits: &Tensor) -> Vec<u8> {
    let (n, c, h, w) = logits.dims4();
    let plane = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if data[(b * c + k) * plane + p] > data[(b * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
