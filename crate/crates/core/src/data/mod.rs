//! Samples, on-disk datasets, synthetic scenes and augmentation.

mod augment;
mod batch;
mod dataset;
mod synth;

pub use augment::{augment, hflip, AugmentConfig, ColorJitter, HflipMode};
pub use batch::{collate, representation_stack, Batch, PolarBatch};
pub use dataset::{load_sample, DatasetIndex, InputKind, ANGLE_DIRS};
pub use synth::{generate_synthetic_dataset, render_scene, sample_id, ClassSpec, SyntheticSceneSpec};

use crate::error::{Error, Result};
use crate::image::{Map, Mask};
use crate::polarization::{
    compute_representation, compute_stokes, PolarizedImageSet, RepresentationKind, RepresentationMap,
};

/// The polarisation-side input of a sample: raw angle images, or
/// precomputed representations for datasets that ship those instead.
#[derive(Clone, Debug, PartialEq)]
pub enum PolarInput {
    Angles(PolarizedImageSet),
    Representations(Vec<RepresentationMap>),
}

/// One training record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: PolarInput,
    /// `S0` of the angle images, always three channels.
    pub rgb: Map,
    pub mask: Mask,
    /// Single-channel AoLP/DoLP of the luminance-weighted Stokes vector.
    pub aolp_target: Map,
    pub dolp_target: Map,
}

impl Sample {
    pub fn from_angles(id: impl Into<String>, angles: PolarizedImageSet, mask: Mask) -> Result<Sample> {
        check_mask_dims(&mask, angles.dims().0, angles.dims().1)?;
        let (rgb, aolp_target, dolp_target) = derive_from_angles(&angles)?;
        Ok(Sample { id: id.into(), input: PolarInput::Angles(angles), rgb, mask, aolp_target, dolp_target })
    }

    /// Requires AoLP and DoLP among the representations; colour
    /// representations are collapsed to one channel with luminance weights.
    pub fn from_representations(
        id: impl Into<String>,
        representations: Vec<RepresentationMap>,
        rgb: Map,
        mask: Mask,
    ) -> Result<Sample> {
        let (h, w) = (rgb.height(), rgb.width());
        check_mask_dims(&mask, h, w)?;
        for r in &representations {
            if (r.values.height(), r.values.width()) != (h, w) {
                return Err(Error::InvalidInput(format!("{} map size differs from the rgb image", r.kind)));
            }
        }
        let target = |kind: RepresentationKind| -> Result<Map> {
            let r = representations
                .iter()
                .find(|r| r.kind == kind)
                .ok_or_else(|| Error::InvalidInput(format!("representation dataset lacks {kind}")))?;
            single_channel(&r.values)
        };
        let aolp_target = target(RepresentationKind::Aolp)?;
        let dolp_target = target(RepresentationKind::Dolp)?;
        let rgb = three_channel(&rgb)?;
        Ok(Sample {
            id: id.into(),
            input: PolarInput::Representations(representations),
            rgb,
            mask,
            aolp_target,
            dolp_target,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.mask.check_classes(num_classes)?;
        check_mask_dims(&self.mask, self.height(), self.width())
    }
}

fn check_mask_dims(mask: &Mask, h: usize, w: usize) -> Result<()> {
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::InvalidInput(format!("mask is {}x{}, image is {h}x{w}", mask.height(), mask.width())));
    }
    Ok(())
}

/// `(rgb, aolp_target, dolp_target)` from four angle images.
pub fn derive_from_angles(angles: &PolarizedImageSet) -> Result<(Map, Map, Map)> {
    let stokes = compute_stokes(angles)?;
    let rgb = three_channel(&stokes.s0)?;
    let luma = stokes.luminance()?;
    let aolp = compute_representation(&luma, RepresentationKind::Aolp)?.values;
    let dolp = compute_representation(&luma, RepresentationKind::Dolp)?.values;
    Ok((rgb, aolp, dolp))
}

fn three_channel(m: &Map) -> Result<Map> {
    match m.channels() {
        3 => Ok(m.clone()),
        1 => Map::stack(&[m, m, m]),
        c => Err(Error::InvalidInput(format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn single_channel(m: &Map) -> Result<Map> {
    match m.channels() {
        1 => Ok(m.clone()),
        3 => m.weighted_channels(&crate::polarization::LUMA_WEIGHTS),
        c => Err(Error::InvalidInput(format!("expected 1 or 3 channels, got {c}"))),
    }
}
