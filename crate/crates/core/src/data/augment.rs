//! Random resize, crop, horizontal flip and colour jitter, applied
//! consistently to every modality, the mask and the polarisation targets.
//!
//! For angle-image samples the rgb image and the targets are recomputed from
//! the transformed angle images rather than resampled, so they stay exactly
//! consistent with the physics (a physical flip negates AoLP by construction).

use super::{derive_from_angles, PolarInput, Sample};
use crate::error::Result;
use crate::image::{Map, Mask, IGNORE_LABEL};
use crate::polarization::{PolarizedImageSet, RepresentationKind, LUMA_WEIGHTS};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sharecmp_nn::kernels::resize::resize_forward;
use std::f64::consts::{FRAC_PI_2, PI};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HflipMode {
    /// Mirror the pixels only.
    #[default]
    Naive,
    /// Also swap the 45°/135° images, which is what a mirror does to the
    /// polariser angles; AoLP changes sign.
    Physical,
}

/// Maximum relative perturbations; zero disables a component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, saturation: 0.2, hue: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub resize_ratio_range: [f64; 2],
    pub hflip_prob: f64,
    pub hflip_mode: HflipMode,
    pub color_jitter: ColorJitter,
    /// `[height, width]`.
    pub crop_size: [usize; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            resize_ratio_range: [0.5, 2.0],
            hflip_prob: 0.5,
            hflip_mode: HflipMode::Naive,
            color_jitter: ColorJitter::default(),
            crop_size: [512, 612],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let [lo, hi] = self.resize_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(format!("augment.resize_ratio_range must satisfy 0 < lo <= hi, got {lo}..{hi}"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err("augment.hflip_prob must lie in [0, 1]".into());
        }
        if self.crop_size.contains(&0) {
            return Err("augment.crop_size must be positive".into());
        }
        let j = self.color_jitter;
        if [j.brightness, j.contrast, j.saturation].iter().any(|v| !(0.0..1.0).contains(v))
            || !(0.0..=0.5).contains(&j.hue)
        {
            return Err("augment.color_jitter: brightness/contrast/saturation in [0, 1), hue in [0, 0.5]".into());
        }
        Ok(())
    }
}

/// Applies one random draw of the pipeline. Identity when disabled.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let [crop_h, crop_w] = cfg.crop_size;
    let [lo, hi] = cfg.resize_ratio_range;
    let ratio = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    // Shorter image side goes to `ratio` times the shorter crop side.
    let scale = ratio * crop_h.min(crop_w) as f64 / sample.height().min(sample.width()) as f64;
    let new_h = ((sample.height() as f64 * scale).round() as usize).max(1);
    let new_w = ((sample.width() as f64 * scale).round() as usize).max(1);
    let (pad_h, pad_w) = (new_h.max(crop_h), new_w.max(crop_w));
    let y0 = rng.random_range(0..=pad_h - crop_h);
    let x0 = rng.random_range(0..=pad_w - crop_w);
    let flip = rng.random_bool(cfg.hflip_prob);
    let geom = Geometry { new_h, new_w, y0, x0, crop_h, crop_w, flip };
    let mut out = geom.apply(sample, cfg.hflip_mode)?;
    if let PolarInput::Angles(angles) = &mut out.input {
        let draw = JitterDraw::sample(&cfg.color_jitter, rng);
        if !draw.is_identity() {
            jitter_angles(angles, &draw)?;
            out.rgb = derive_from_angles(angles)?.0;
        }
    }
    Ok(out)
}

/// Mirrors a sample left-right; an involution in either mode.
pub fn hflip(sample: &Sample, mode: HflipMode) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let geom = Geometry { new_h: h, new_w: w, y0: 0, x0: 0, crop_h: h, crop_w: w, flip: true };
    geom.apply(sample, mode)
}

/// Resize, then pad/crop to the crop window, then optional mirror.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub new_h: usize,
    pub new_w: usize,
    pub y0: usize,
    pub x0: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip: bool,
}

impl Geometry {
    fn map(&self, m: &Map) -> Map {
        let resized = resize_map(m, self.new_h, self.new_w);
        let c = m.channels();
        Map::from_fn(self.crop_h, self.crop_w, c, |y, x, ch| {
            let (sy, sx) = (y + self.y0, if self.flip { self.crop_w - 1 - x } else { x } + self.x0);
            if sy < self.new_h && sx < self.new_w {
                resized.get(sy, sx, ch)
            } else {
                0.0
            }
        })
    }

    fn mask(&self, m: &Mask) -> Mask {
        let (h, w) = (m.height(), m.width());
        let near =
            |dst: usize, out: usize, inp: usize| (((dst as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
        let mut data = Vec::with_capacity(self.crop_h * self.crop_w);
        for y in 0..self.crop_h {
            for x in 0..self.crop_w {
                let (sy, sx) = (y + self.y0, if self.flip { self.crop_w - 1 - x } else { x } + self.x0);
                data.push(if sy < self.new_h && sx < self.new_w {
                    m.get(near(sy, self.new_h, h), near(sx, self.new_w, w))
                } else {
                    IGNORE_LABEL
                });
            }
        }
        Mask::new(self.crop_h, self.crop_w, data).expect("mask size is consistent")
    }

    fn apply(&self, s: &Sample, mode: HflipMode) -> Result<Sample> {
        let physical = self.flip && mode == HflipMode::Physical;
        let mask = self.mask(&s.mask);
        match &s.input {
            PolarInput::Angles(a) => {
                let [i0, i45, i90, i135] = a.angles().map(|m| self.map(m));
                let angles = if physical {
                    PolarizedImageSet::new(i0, i135, i90, i45)?
                } else {
                    PolarizedImageSet::new(i0, i45, i90, i135)?
                };
                Sample::from_angles(s.id.clone(), angles, mask)
            }
            PolarInput::Representations(reps) => {
                let reps = reps
                    .iter()
                    .map(|r| {
                        let mut r = r.clone();
                        r.values = self.map(&r.values);
                        if physical && matches!(r.kind, RepresentationKind::Aolp | RepresentationKind::Saolp) {
                            r.values = r.values.map(|v| mirror_angle(r.kind, v));
                        }
                        r
                    })
                    .collect();
                Sample::from_representations(s.id.clone(), reps, self.map(&s.rgb), mask)
            }
        }
    }
}

/// Negates an angle, keeping AoLP inside `(−π/2, π/2]`.
pub(crate) fn mirror_angle(kind: RepresentationKind, v: f64) -> f64 {
    let m = -v;
    if kind == RepresentationKind::Aolp && m <= -FRAC_PI_2 {
        m + PI
    } else {
        m
    }
}

/// Bilinear resize with half-pixel centres.
pub(crate) fn resize_map(m: &Map, h: usize, w: usize) -> Map {
    if (m.height(), m.width()) == (h, w) {
        return m.clone();
    }
    Map::from_tensor(&resize_forward(&m.to_tensor(), h, w), 0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct JitterDraw {
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
}

impl JitterDraw {
    fn sample(j: &ColorJitter, rng: &mut impl Rng) -> Self {
        let mut factor = |r: f64| if r > 0.0 { rng.random_range(1.0 - r..=1.0 + r) } else { 1.0 };
        let brightness = factor(j.brightness);
        let contrast = factor(j.contrast);
        let saturation = factor(j.saturation);
        let hue = if j.hue > 0.0 { rng.random_range(-j.hue..=j.hue) } else { 0.0 };
        Self { brightness, contrast, saturation, hue }
    }

    fn is_identity(&self) -> bool {
        self.brightness == 1.0 && self.contrast == 1.0 && self.saturation == 1.0 && self.hue == 0.0
    }
}

/// Every step is an affine map shared by the four images, so the Stokes
/// identity `I0 + I90 = I45 + I135` survives until the final clamp.
fn jitter_angles(angles: &mut PolarizedImageSet, d: &JitterDraw) -> Result<()> {
    let colour = angles.dims().2 == 3;
    // Contrast pivots on one scalar shared by all four images.
    let n = angles.i0.data().len() as f64;
    let pivot = angles.angles().iter().map(|m| m.data().iter().sum::<f64>()).sum::<f64>() / (4.0 * n) * d.brightness;
    let (cos, sin) = ((2.0 * PI * d.hue).cos(), (2.0 * PI * d.hue).sin());
    for m in angles.angles_mut() {
        let c = m.channels();
        for px in m.data_mut().chunks_mut(c) {
            for v in px.iter_mut() {
                *v = (*v * d.brightness - pivot) * d.contrast + pivot;
            }
            if colour {
                let grey: f64 = px.iter().zip(LUMA_WEIGHTS).map(|(v, w)| v * w).sum();
                for v in px.iter_mut() {
                    *v = (*v - grey) * d.saturation + grey;
                }
                if d.hue != 0.0 {
                    let (y, i, q) = rgb_to_yiq(px[0], px[1], px[2]);
                    let (i, q) = (i * cos - q * sin, i * sin + q * cos);
                    let (r, g, b) = yiq_to_rgb(y, i, q);
                    px.copy_from_slice(&[r, g, b]);
                }
            }
            px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    angles.validate()
}

fn rgb_to_yiq(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    (
        0.299 * r + 0.587 * g + 0.114 * b,
        0.595_716 * r - 0.274_453 * g - 0.321_263 * b,
        0.211_456 * r - 0.522_591 * g + 0.311_135 * b,
    )
}

fn yiq_to_rgb(y: f64, i: f64, q: f64) -> (f64, f64, f64) {
    (y + 0.956_3 * i + 0.621_0 * q, y - 0.272_1 * i - 0.647_4 * q, y - 1.107_0 * i + 1.704_6 * q)
}
