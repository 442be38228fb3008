//! Class Polarization-Aware auxiliary head and loss (Eqs. 8–9).
//!
//! For each active stage the head predicts, per class, an AoLP map and a DoLP
//! map at input resolution. Targets hold the scene AoLP/DoLP on the pixels of
//! that class and zero elsewhere, so off-class estimates are pushed to zero.

use crate::error::{Error, Result};
use crate::image::IGNORE_LABEL;
use crate::stages::StageSet;
use serde::{Deserialize, Serialize};
use sharecmp_nn::{Conv2d, Conv2dSpec, Ctx, ParamStore, Tensor, Var};

/// How Eq. (9) reduces over pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CpaReduction {
    /// Mean over pixels (and images): λ does not depend on resolution.
    #[default]
    Mean,
    /// The paper's bare sum over pixels, averaged over images only. Matching
    /// the mean variant needs λ divided by `H·W`.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpaConfig {
    pub active_stages: StageSet,
    pub lambda: f64,
    pub reduction: CpaReduction,
}

impl Default for CpaConfig {
    fn default() -> Self {
        Self { active_stages: StageSet::of(&[3, 4]), lambda: 0.01, reduction: CpaReduction::Mean }
    }
}

impl CpaConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("cpa.lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.active_stages.is_empty() {
            return Err("cpa.active_stages must be non-empty while cpa.lambda > 0".into());
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.lambda > 0.0 && !self.active_stages.is_empty()
    }
}

#[derive(Clone, Debug)]
struct StageHead {
    stage: usize,
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Clone, Debug)]
pub struct CpaHead {
    heads: Vec<StageHead>,
    num_classes: usize,
}

/// `Â_i` and `D̂_i` for one active stage, each `(n, Cls, H, W)`.
#[derive(Clone, Copy, Debug)]
pub struct StageEstimate<'g> {
    pub stage: usize,
    pub aolp: Var<'g>,
    pub dolp: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct CpaEstimates<'g> {
    pub stages: Vec<StageEstimate<'g>>,
}

impl CpaHead {
    /// Heads exist only for `active` stages; `hidden` is the width after the first 1×1 conv.
    pub fn new(store: &mut ParamStore, dims: &[usize; 4], hidden: usize, num_classes: usize, active: StageSet) -> Self {
        let one = Conv2dSpec::default();
        let heads = active
            .iter()
            .map(|s| StageHead {
                stage: s,
                conv1: Conv2d::new(store, &format!("cpaahead.stage{s}.conv1"), dims[s - 1], hidden, 1, one, true),
                conv2: Conv2d::new(store, &format!("cpaahead.stage{s}.conv2"), hidden, 2 * num_classes, 1, one, true),
            })
            .collect();
        Self { heads, num_classes }
    }

    pub fn stages(&self) -> StageSet {
        StageSet::try_from_iter(self.heads.iter().map(|h| h.stage)).expect("stages in range")
    }

    /// Eq. (8). `fused` holds `f1..f4`; only active stages are read (`f1` also
    /// supplies the stride-4 size).
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g>,
        fused: &[Var<'g>],
        height: usize,
        width: usize,
    ) -> Result<CpaEstimates<'g>> {
        let s1 = fused.first().ok_or_else(|| Error::InvalidInput("CPA head needs stage features".into()))?.shape();
        let (h4, w4) = (s1[2], s1[3]);
        let mut stages = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let f = *fused
                .get(head.stage - 1)
                .ok_or_else(|| Error::InvalidInput(format!("missing stage {} features", head.stage)))?;
            let s = f.shape();
            if s.len() != 4 || s[1] != head.conv1.in_channels {
                return Err(Error::InvalidInput(format!(
                    "CPA stage {} feature has shape {s:?}, expected {} channels",
                    head.stage, head.conv1.in_channels
                )));
            }
            let x = head.conv1.forward(ctx, f).resize_bilinear(h4, w4);
            let x = head.conv2.forward(ctx, x).resize_bilinear(height, width);
            let parts = x.chunk(2, 1);
            stages.push(StageEstimate { stage: head.stage, aolp: parts[0], dolp: parts[1] });
        }
        debug_assert!(stages.iter().all(|e| e.aolp.shape()[1] == self.num_classes));
        Ok(CpaEstimates { stages })
    }
}

/// Per-class targets `A^c`, `D^c`, each `(n, Cls, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CpaTargets {
    pub aolp: Tensor,
    pub dolp: Tensor,
}

/// `A^c = aolp ⊙ [mask == c]`, likewise for DoLP. `aolp`/`dolp` are
/// `(n, 1, H, W)`; the mask is `n·H·W` labels with 255 ignored.
pub fn build_targets(aolp: &Tensor, dolp: &Tensor, mask: &[u8], num_classes: usize) -> Result<CpaTargets> {
    let (n, c, h, w) = aolp.dims4();
    if c != 1 || dolp.shape() != aolp.shape() || mask.len() != n * h * w {
        return Err(Error::InvalidInput(format!(
            "CPA targets need (n, 1, h, w) maps and n·h·w labels; got aolp {:?}, dolp {:?}, {} labels",
            aolp.shape(),
            dolp.shape(),
            mask.len()
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m != IGNORE_LABEL && m as usize >= num_classes) {
        return Err(Error::InvalidInput(format!("mask class {bad} is not below {num_classes}")));
    }
    let plane = h * w;
    let mut a = vec![0.0; n * num_classes * plane];
    let mut d = vec![0.0; n * num_classes * plane];
    for b in 0..n {
        for p in 0..plane {
            let m = mask[b * plane + p];
            if m == IGNORE_LABEL {
                continue;
            }
            let at = (b * num_classes + m as usize) * plane + p;
            a[at] = aolp.data()[b * plane + p];
            d[at] = dolp.data()[b * plane + p];
        }
    }
    let shape = vec![n, num_classes, h, w];
    Ok(CpaTargets { aolp: Tensor::new(shape.clone(), a), dolp: Tensor::new(shape, d) })
}

/// Eq. (9): `λ Σ_stages Σ_c reduce_pixels[(A−Â)² + (D−D̂)²]`.
pub fn cpa_loss<'g>(est: &CpaEstimates<'g>, tgt: &CpaTargets, cfg: &CpaConfig) -> Result<Var<'g>> {
    let first = est.stages.first().ok_or_else(|| Error::InvalidInput("no CPA estimates".into()))?;
    let g = first.aolp.graph();
    let (n, _, h, w) = tgt.aolp.dims4();
    let a = g.constant(tgt.aolp.clone());
    let d = g.constant(tgt.dolp.clone());
    let mut total: Option<Var<'g>> = None;
    for e in &est.stages {
        if e.aolp.shape() != tgt.aolp.shape() || e.dolp.shape() != tgt.dolp.shape() {
            return Err(Error::InvalidInput(format!(
                "CPA stage {} estimates {:?} do not match targets {:?}",
                e.stage,
                e.aolp.shape(),
                tgt.aolp.shape()
            )));
        }
        let term = e.aolp.sub(a).square().sum().add(e.dolp.sub(d).square().sum());
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    let denom = match cfg.reduction {
        CpaReduction::Mean => (n * h * w) as f64,
        CpaReduction::Sum => n as f64,
    };
    Ok(total.expect("at least one stage").scale(cfg.lambda / denom))
}
