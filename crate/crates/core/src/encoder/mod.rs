//! The shared dual-branch, four-stage encoder.
//!
//! Each stage tokenises both branches with an overlapping patch embedding
//! (modality-exclusive at the stages in `me_opembed_stages`, shared
//! elsewhere), runs the same transformer blocks over both branches when
//! `share_trunk` is set, then rectifies and fuses the pair. Rectified branch
//! features feed the next stage; the fused map `f_i` goes to the heads.
//!
//! Parameter names follow `stage{i}.{rgb|polar|shared}.{embed|block{j}|norm|frm|ffm}.*`.

mod block;
mod fusion;

pub use block::{Block, EfficientAttention, MixFfn, PatchEmbed};
pub use fusion::{Fuse, Rectify};

use crate::error::{Error, Result};
use crate::stages::{StageSet, NUM_STAGES};
use block::LN_EPS;
use serde::{Deserialize, Serialize};
use sharecmp_nn::{tokens_to_nchw, Ctx, LayerNorm, ParamStore, Var};

/// Smallest input side the four strided stages (×32 overall) accept.
pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub patch_sizes: [usize; 4],
    pub patch_strides: [usize; 4],
    /// Stages whose patch embedding has separate weights per branch.
    pub me_opembed_stages: StageSet,
    /// One set of transformer blocks for both branches.
    pub share_trunk: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::mit_b2()
    }
}

impl EncoderConfig {
    /// MiT-B2 shapes with ME OPEmbed at every stage.
    pub fn mit_b2() -> Self {
        Self {
            dims: [64, 128, 320, 512],
            depths: [3, 4, 6, 3],
            heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            patch_sizes: [7, 3, 3, 3],
            patch_strides: [4, 2, 2, 2],
            me_opembed_stages: StageSet::ALL,
            share_trunk: true,
        }
    }

    pub fn tiny() -> Self {
        Self { dims: [16, 32, 64, 128], depths: [1, 1, 1, 1], heads: [1, 2, 4, 8], ..Self::mit_b2() }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for i in 0..NUM_STAGES {
            let s = i + 1;
            if self.dims[i] == 0 || self.heads[i] == 0 || self.dims[i] % self.heads[i] != 0 {
                return Err(format!(
                    "encoder.dims[{i}]={} must be a positive multiple of encoder.heads[{i}]={}",
                    self.dims[i], self.heads[i]
                ));
            }
            if self.sr_ratios[i] == 0 || self.patch_strides[i] == 0 {
                return Err(format!("encoder stage {s}: sr_ratios and patch_strides must be positive"));
            }
            if self.patch_sizes[i] % 2 == 0 || self.patch_sizes[i] < self.patch_strides[i] {
                return Err(format!("encoder stage {s}: patch size must be odd and at least the stride"));
            }
        }
        if self.mlp_ratio == 0 {
            return Err("encoder.mlp_ratio must be positive".into());
        }
        if self.patch_strides.iter().product::<usize>() != 32 {
            return Err("encoder.patch_strides must multiply to 32".into());
        }
        Ok(())
    }

    /// Cumulative stride of each stage's output.
    pub fn strides(&self) -> [usize; 4] {
        let mut out = [0; 4];
        let mut acc = 1;
        for (i, s) in self.patch_strides.iter().enumerate() {
            acc *= s;
            out[i] = acc;
        }
        out
    }

    fn stage_in_channels(&self, stage: usize) -> usize {
        if stage == 1 {
            3
        } else {
            self.dims[stage - 2]
        }
    }
}

/// Patch embedding, trunk blocks and final norm of one branch (or both,
/// when shared).
#[derive(Clone, Debug)]
struct Trunk {
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Trunk {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, i: usize) -> Self {
        let blocks = (1..=cfg.depths[i])
            .map(|j| {
                Block::new(
                    store,
                    &format!("{prefix}.block{j}"),
                    cfg.dims[i],
                    cfg.heads[i],
                    cfg.sr_ratios[i],
                    cfg.mlp_ratio,
                )
            })
            .collect();
        Self { blocks, norm: LayerNorm::new(store, &format!("{prefix}.norm"), cfg.dims[i], LN_EPS) }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, mut tokens: Var<'g>, h: usize, w: usize) -> Var<'g> {
        for b in &self.blocks {
            tokens = b.forward(ctx, tokens, h, w);
        }
        tokens_to_nchw(self.norm.forward(ctx, tokens), h, w)
    }
}

/// A module used by both branches, or one per branch.
#[derive(Clone, Debug)]
enum PerBranch<T> {
    Shared(T),
    Split { rgb: T, polar: T },
}

impl<T> PerBranch<T> {
    fn build(
        store: &mut ParamStore,
        stage: usize,
        split: bool,
        mut make: impl FnMut(&mut ParamStore, &str) -> T,
    ) -> Self {
        if split {
            let rgb = make(store, &format!("stage{stage}.rgb"));
            let polar = make(store, &format!("stage{stage}.polar"));
            PerBranch::Split { rgb, polar }
        } else {
            PerBranch::Shared(make(store, &format!("stage{stage}.shared")))
        }
    }

    fn pair(&self) -> (&T, &T) {
        match self {
            PerBranch::Shared(t) => (t, t),
            PerBranch::Split { rgb, polar } => (rgb, polar),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    embed: PerBranch<PatchEmbed>,
    trunk: PerBranch<Trunk>,
    rectify: Rectify,
    fuse: Fuse,
}

/// Outputs of one stage, all `(n, c, h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput<'g> {
    /// Trunk outputs before rectification (`y_RGB`, `y_P` of Eqs. 3–4).
    pub rgb: Var<'g>,
    pub polar: Var<'g>,
    /// Rectified branch features, the next stage's inputs.
    pub rgb_rectified: Var<'g>,
    pub polar_rectified: Var<'g>,
    pub fused: Var<'g>,
}

/// Per-stage results of a full encoder pass, index 0 is stage 1.
#[derive(Clone, Debug)]
pub struct StageFeatures<'g> {
    pub stages: Vec<StageOutput<'g>>,
}

impl<'g> StageFeatures<'g> {
    /// Fused map of stage `i` (1-based).
    pub fn fused(&self, stage: usize) -> Var<'g> {
        self.stages[stage - 1].fused
    }

    pub fn all_fused(&self) -> Vec<Var<'g>> {
        self.stages.iter().map(|s| s.fused).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Self {
        let stages = (1..=NUM_STAGES)
            .map(|s| {
                let i = s - 1;
                let in_ch = cfg.stage_in_channels(s);
                let embed = PerBranch::build(store, s, cfg.me_opembed_stages.contains(s), |st, p| {
                    PatchEmbed::new(
                        st,
                        &format!("{p}.embed"),
                        in_ch,
                        cfg.dims[i],
                        cfg.patch_sizes[i],
                        cfg.patch_strides[i],
                    )
                });
                let trunk = PerBranch::build(store, s, !cfg.share_trunk, |st, p| Trunk::new(st, p, cfg, i));
                Stage {
                    embed,
                    trunk,
                    rectify: Rectify::new(store, &format!("stage{s}.shared.frm"), cfg.dims[i]),
                    fuse: Fuse::new(store, &format!("stage{s}.shared.ffm"), cfg.dims[i], cfg.heads[i]),
                }
            })
            .collect();
        Self { cfg: cfg.clone(), stages }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs stage `stage` (1-based) on `(n, c, h, w)` branch inputs. Useful on
    /// its own for small gradient checks; the only size requirement is that
    /// the token grid is at least the stage's `sr_ratio` on each side.
    pub fn forward_stage<'g>(
        &self,
        ctx: &Ctx<'g>,
        stage: usize,
        rgb: Var<'g>,
        polar: Var<'g>,
    ) -> Result<StageOutput<'g>> {
        if !(1..=NUM_STAGES).contains(&stage) {
            return Err(Error::InvalidInput(format!("stage {stage} outside 1..=4")));
        }
        let expected = self.cfg.stage_in_channels(stage);
        for (branch, x) in [("rgb", rgb), ("polar", polar)] {
            let shape = x.shape();
            if shape.len() != 4 || shape[1] != expected {
                return Err(Error::InvalidInput(format!(
                    "stage {stage} {branch} input has shape {shape:?}, expected (n, {expected}, h, w)"
                )));
            }
        }
        if rgb.shape() != polar.shape() {
            return Err(Error::InvalidInput(format!(
                "branch inputs differ in shape: {:?} vs {:?}",
                rgb.shape(),
                polar.shape()
            )));
        }
        let i = stage - 1;
        let (k, s, sr) = (self.cfg.patch_sizes[i], self.cfg.patch_strides[i], self.cfg.sr_ratios[i]);
        let grid = |side: usize| (side + 2 * (k / 2)).saturating_sub(k) / s + 1;
        let (gh, gw) = (grid(rgb.shape()[2]), grid(rgb.shape()[3]));
        if gh < sr || gw < sr {
            return Err(Error::InvalidInput(format!(
                "stage {stage} token grid {gh}x{gw} is smaller than its spatial-reduction ratio {sr}"
            )));
        }
        let st = &self.stages[i];
        let (embed_rgb, embed_polar) = st.embed.pair();
        let (trunk_rgb, trunk_polar) = st.trunk.pair();
        let (t_rgb, h, w) = embed_rgb.forward(ctx, rgb);
        let (t_polar, _, _) = embed_polar.forward(ctx, polar);
        let y_rgb = trunk_rgb.forward(ctx, t_rgb, h, w);
        let y_polar = trunk_polar.forward(ctx, t_polar, h, w);
        let (r_rgb, r_polar) = st.rectify.forward(ctx, y_rgb, y_polar);
        let fused = st.fuse.forward(ctx, r_rgb, r_polar);
        Ok(StageOutput { rgb: y_rgb, polar: y_polar, rgb_rectified: r_rgb, polar_rectified: r_polar, fused })
    }

    /// Both inputs `(n, 3, H, W)` with `H, W ≥ 32`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, rgb: Var<'g>, polar: Var<'g>) -> Result<StageFeatures<'g>> {
        let shape = rgb.shape();
        if shape.len() == 4 && (shape[2] < MIN_INPUT_SIDE || shape[3] < MIN_INPUT_SIDE) {
            return Err(Error::InvalidInput(format!(
                "input is {}x{}; the encoder needs at least {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
                shape[2], shape[3]
            )));
        }
        let (mut x_rgb, mut x_polar) = (rgb, polar);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let out = self.forward_stage(ctx, s, x_rgb, x_polar)?;
            x_rgb = out.rgb_rectified;
            x_polar = out.polar_rectified;
            stages.push(out);
        }
        Ok(StageFeatures { stages })
    }
}
