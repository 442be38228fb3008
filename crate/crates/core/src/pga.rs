//! Polarization Generate Attention: four angle images in, one learned
//! three-channel polarisation image out, at full resolution.
//!
//! ```text
//! f    = concat(conv3x3_k(I_k))            k ∈ {0, 45, 90, 135}
//! attn = SE(grouped_dilated(conv1x1(f)))   one gate per channel
//! I_P  = PReLU(dw3x3(conv1x1(f + attn ⊙ f)))
//! ```

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sharecmp_nn::{Conv2d, Conv2dSpec, Ctx, Init, Linear, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgaConfig {
    /// Output channels of each per-angle convolution.
    pub mid_channels: usize,
    /// Channels of each angle image.
    pub angle_channels: usize,
    pub dilation: usize,
    /// Groups of the dilated 3×3 convolution.
    pub groups: usize,
    /// Squeeze-excitation bottleneck reduction.
    pub reduction: usize,
    /// One PReLU slope for all three output channels instead of one each.
    pub shared_prelu_slope: bool,
    /// Skip PGA and feed stacked precomputed representations to the encoder.
    pub bypass: bool,
    /// In bypass mode, rescale each representation from its declared range to [0, 1].
    pub normalize_representations: bool,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            mid_channels: 50,
            angle_channels: 3,
            dilation: 2,
            groups: 4,
            reduction: 4,
            shared_prelu_slope: false,
            bypass: false,
            normalize_representations: true,
        }
    }
}

pub const PGA_OUT_CHANNELS: usize = 3;

impl PgaConfig {
    pub fn concat_channels(&self) -> usize {
        4 * self.mid_channels
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let cc = self.concat_channels();
        if self.mid_channels == 0 || self.angle_channels == 0 {
            return Err("pga.mid_channels and pga.angle_channels must be positive".into());
        }
        if self.dilation != 2 {
            return Err(format!("pga.dilation must be 2 (paper §3.2), got {}", self.dilation));
        }
        if self.groups == 0 || cc % self.groups != 0 {
            return Err(format!("pga.groups={} must divide 4·mid_channels={cc}", self.groups));
        }
        if self.reduction == 0 || cc / self.reduction == 0 {
            return Err("pga.reduction must leave at least one bottleneck channel".into());
        }
        Ok(())
    }
}

/// Intermediate tensors of one PGA pass, `(n, ·, H, W)` unless noted.
#[derive(Clone, Copy, Debug)]
pub struct PgaOutput<'g> {
    /// Concatenated per-angle features `f_P`.
    pub features: Var<'g>,
    /// Channel gate `Attn_P`, `(n, 4·mid, 1, 1)`.
    pub attention: Var<'g>,
    /// `f_P + Attn_P ⊙ f_P`, the input of the output head.
    pub residual: Var<'g>,
    /// `I_P`, three channels.
    pub image: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct Pga {
    cfg: PgaConfig,
    angle_convs: [Conv2d; 4],
    dw_point: Conv2d,
    dw_dilated: Conv2d,
    se_reduce: Linear,
    se_expand: Linear,
    out_point: Conv2d,
    out_depth: Conv2d,
    prelu: ParamId,
}

impl Pga {
    pub fn new(store: &mut ParamStore, cfg: &PgaConfig) -> Self {
        let (mid, cc) = (cfg.mid_channels, cfg.concat_channels());
        let same = Conv2dSpec { padding: 1, ..Default::default() };
        let one = Conv2dSpec::default();
        let dilated =
            Conv2dSpec { padding: cfg.dilation, dilation: cfg.dilation, groups: cfg.groups, ..Default::default() };
        let depth = Conv2dSpec { padding: 1, groups: PGA_OUT_CHANNELS, ..Default::default() };
        let angle_convs = [0, 45, 90, 135]
            .map(|a| Conv2d::new(store, &format!("pga.angle{a:03}"), cfg.angle_channels, mid, 3, same, true));
        let slopes = if cfg.shared_prelu_slope { 1 } else { PGA_OUT_CHANNELS };
        Self {
            cfg: cfg.clone(),
            angle_convs,
            dw_point: Conv2d::new(store, "pga.dwconv.point", cc, cc, 1, one, true),
            dw_dilated: Conv2d::new(store, "pga.dwconv.dilated", cc, cc, 3, dilated, true),
            se_reduce: Linear::new(store, "pga.attn.fc1", cc, cc / cfg.reduction, true),
            se_expand: Linear::new(store, "pga.attn.fc2", cc / cfg.reduction, cc, true),
            out_point: Conv2d::new(store, "pga.ffn.point", cc, PGA_OUT_CHANNELS, 1, one, true),
            out_depth: Conv2d::new(store, "pga.ffn.depth", PGA_OUT_CHANNELS, PGA_OUT_CHANNELS, 3, depth, true),
            prelu: store.add("pga.ffn.prelu", &[slopes], Init::Const(0.25)),
        }
    }

    pub fn config(&self) -> &PgaConfig {
        &self.cfg
    }

    /// Eq. (5): per-angle 3×3 convolutions, concatenated in angle order.
    pub fn concat<'g>(&self, ctx: &Ctx<'g>, angles: [Var<'g>; 4]) -> Result<Var<'g>> {
        let shape = angles[0].shape();
        for (k, a) in angles.iter().enumerate() {
            let s = a.shape();
            if s.len() != 4 || s[1] != self.cfg.angle_channels || s != shape {
                return Err(Error::InvalidInput(format!(
                    "PGA angle input {k} has shape {s:?}; expected (n, {}, h, w) shared by all four",
                    self.cfg.angle_channels
                )));
            }
        }
        let parts: Vec<Var<'g>> = angles.iter().zip(&self.angle_convs).map(|(x, c)| c.forward(ctx, *x)).collect();
        Ok(angles[0].graph().cat(&parts, 1))
    }

    /// Eq. (6): gate in (0, 1) per concat channel, `(n, 4·mid, 1, 1)`.
    pub fn attention<'g>(&self, ctx: &Ctx<'g>, features: Var<'g>) -> Var<'g> {
        let [n, c, _, _] = features.shape()[..] else { unreachable!("PGA features are rank 4") };
        let d = self.dw_dilated.forward(ctx, self.dw_point.forward(ctx, features));
        let pooled = d.avg_pool_global();
        let gate = self.se_expand.forward(ctx, self.se_reduce.forward(ctx, pooled).relu()).sigmoid();
        gate.reshape(vec![n, c, 1, 1])
    }

    /// Eq. (7).
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, angles: [Var<'g>; 4]) -> Result<PgaOutput<'g>> {
        let features = self.concat(ctx, angles)?;
        let attention = self.attention(ctx, features);
        let residual = features.add(attention.mul(features));
        let image = self.out_depth.forward(ctx, self.out_point.forward(ctx, residual)).prelu(ctx.param(self.prelu));
        Ok(PgaOutput { features, attention, residual, image })
    }
}
