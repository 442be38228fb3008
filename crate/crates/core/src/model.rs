//! The full network: PGA → shared encoder → MLP decoder, plus the CPA head
//! used only for the auxiliary loss.

use crate::cpa::{build_targets, cpa_loss, CpaConfig, CpaEstimates, CpaHead};
use crate::data::{Batch, PolarBatch};
use crate::decoder::{seg_loss, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::pga::{Pga, PgaConfig, PgaOutput, PGA_OUT_CHANNELS};
use crate::stages::StageSet;
use serde::{Deserialize, Serialize};
use sharecmp_nn::{Ctx, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub pga: PgaConfig,
    pub cpa: CpaConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// The paper's configuration: MiT-B2 shapes, ME OPEmbed at all stages,
    /// CPA on stages 3 and 4.
    pub fn mit_b2(num_classes: usize) -> Self {
        Self {
            num_classes,
            encoder: EncoderConfig::mit_b2(),
            pga: PgaConfig::default(),
            cpa: CpaConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }

    /// Desk-scale shapes for tests and quick runs.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            encoder: EncoderConfig::tiny(),
            pga: PgaConfig { mid_channels: 8, ..PgaConfig::default() },
            cpa: CpaConfig::default(),
            decoder: DecoderConfig::tiny(),
        }
    }

    /// The non-shared dual-branch comparison model built from the same shapes:
    /// separate trunks and patch embeddings for both branches, the same
    /// fusion modules, and no PGA (it consumes a representation image directly,
    /// as CMX does).
    pub fn dual_baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.encoder.share_trunk = false;
        cfg.encoder.me_opembed_stages = StageSet::ALL;
        cfg.pga.bypass = true;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("model.num_classes must lie in 1..=255, got {}", self.num_classes)));
        }
        self.encoder.validate().map_err(Error::Config)?;
        self.pga.validate().map_err(Error::Config)?;
        self.cpa.validate().map_err(Error::Config)?;
        self.decoder.validate().map_err(Error::Config)
    }
}

#[derive(Clone, Debug)]
pub struct ShareCmp {
    cfg: ModelConfig,
    pub pga: Option<Pga>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub cpa: Option<CpaHead>,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput<'g> {
    /// `(n, Cls, H, W)`.
    pub logits: Var<'g>,
    /// The encoder's polarisation-branch input, `(n, 3, H, W)`.
    pub polar_image: Var<'g>,
    pub pga: Option<PgaOutput<'g>>,
    pub features: StageFeatures<'g>,
    pub cpa: Option<CpaEstimates<'g>>,
}

/// Scalar loss terms; `total = seg + cpa`.
#[derive(Clone, Copy, Debug)]
pub struct Losses<'g> {
    pub seg: Var<'g>,
    pub cpa: Option<Var<'g>>,
    pub total: Var<'g>,
}

impl ShareCmp {
    /// Registers every parameter in `store`. The configuration should already
    /// be validated.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let pga = (!cfg.pga.bypass).then(|| Pga::new(store, &cfg.pga));
        let encoder = Encoder::new(store, &cfg.encoder);
        let decoder = Decoder::new(store, &cfg.encoder.dims, cfg.num_classes, &cfg.decoder);
        let cpa = cfg.cpa.enabled().then(|| {
            CpaHead::new(store, &cfg.encoder.dims, cfg.decoder.embed_dim, cfg.num_classes, cfg.cpa.active_stages)
        });
        Self { cfg: cfg.clone(), pga, encoder, decoder, cpa }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// The polarisation-branch image: PGA output, or the stacked
    /// representations in bypass mode.
    pub fn polar_input<'g>(&self, ctx: &Ctx<'g>, polar: &PolarBatch) -> Result<(Var<'g>, Option<PgaOutput<'g>>)> {
        match (polar, &self.pga) {
            (PolarBatch::Angles(angles), Some(pga)) => {
                let out = pga.forward(ctx, angles.clone().map(|t| ctx.constant(t)))?;
                Ok((out.image, Some(out)))
            }
            (PolarBatch::Angles(_), None) => {
                Err(Error::Config("pga.bypass requested without representations: the batch holds angle images".into()))
            }
            (PolarBatch::Representations(_), Some(_)) => Err(Error::Config(
                "the dataset provides representations instead of angle images; set pga.bypass=true".into(),
            )),
            (PolarBatch::Representations(t), None) => {
                if t.shape()[1] != PGA_OUT_CHANNELS {
                    return Err(Error::Config(format!(
                        "bypass mode needs exactly {PGA_OUT_CHANNELS} representation channels, the dataset provides {}",
                        t.shape()[1]
                    )));
                }
                Ok((ctx.constant(t.clone()), None))
            }
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, batch: &Batch) -> Result<ModelOutput<'g>> {
        let (h, w) = batch.spatial();
        let (polar_image, pga) = self.polar_input(ctx, &batch.polar)?;
        let rgb = ctx.constant(batch.rgb.clone());
        let features = self.encoder.forward(ctx, rgb, polar_image)?;
        let fused = features.all_fused();
        let logits = self.decoder.forward(ctx, &fused, h, w)?;
        let cpa = match &self.cpa {
            Some(head) => Some(head.forward(ctx, &fused, h, w)?),
            None => None,
        };
        Ok(ModelOutput { logits, polar_image, pga, features, cpa })
    }

    /// Loss terms for an already computed forward pass.
    pub fn losses<'g>(&self, out: &ModelOutput<'g>, batch: &Batch) -> Result<Losses<'g>> {
        let seg = seg_loss(out.logits, &batch.mask);
        let cpa = match &out.cpa {
            Some(est) => {
                let targets = build_targets(&batch.aolp, &batch.dolp, &batch.mask, self.cfg.num_classes)?;
                Some(cpa_loss(est, &targets, &self.cfg.cpa)?)
            }
            None => None,
        };
        let total = match cpa {
            Some(c) => seg.add(c),
            None => seg,
        };
        Ok(Losses { seg, cpa, total })
    }
}
