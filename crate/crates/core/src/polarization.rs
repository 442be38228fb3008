//! Stokes parameters and the four linear-polarization representations.
//!
//! With intensities `I_a` behind a linear polariser at angle `a`:
//!
//! ```text
//! S0 = (I0 + I45 + I90 + I135) / 2      S1 = I0 - I90      S2 = I45 - I135
//! ```
//!
//! All formulas act per channel; colour images are never mixed here.

use crate::error::{Error, Result};
use crate::image::{write_png_u8, Map};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// The polariser angles, in capture order.
pub const ANGLES_DEG: [u32; 4] = [0, 45, 90, 135];

/// Four co-registered intensity maps behind polarisers at 0°, 45°, 90° and 135°.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarizedImageSet {
    pub i0: Map,
    pub i45: Map,
    pub i90: Map,
    pub i135: Map,
}

impl PolarizedImageSet {
    /// Validates shapes (all equal, `C ∈ {1, 3}`) and values (finite, `≥ 0`).
    pub fn new(i0: Map, i45: Map, i90: Map, i135: Map) -> Result<Self> {
        let set = Self { i0, i45, i90, i135 };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.i0.dims();
        if ![1, 3].contains(&dims.2) {
            return Err(Error::InvalidInput(format!("angle images need 1 or 3 channels, got {}", dims.2)));
        }
        for (deg, m) in ANGLES_DEG.iter().zip(self.angles()) {
            if m.dims() != dims {
                return Err(Error::InvalidInput(format!("{deg}° image is {:?}, expected {:?}", m.dims(), dims)));
            }
            if let Some(v) = m.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidInput(format!("{deg}° image contains invalid intensity {v}")));
            }
        }
        Ok(())
    }

    pub fn angles(&self) -> [&Map; 4] {
        [&self.i0, &self.i45, &self.i90, &self.i135]
    }

    pub fn angles_mut(&mut self) -> [&mut Map; 4] {
        [&mut self.i0, &mut self.i45, &mut self.i90, &mut self.i135]
    }

    pub fn from_angles(maps: [Map; 4]) -> Result<Self> {
        let [i0, i45, i90, i135] = maps;
        Self::new(i0, i45, i90, i135)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.i0.dims()
    }
}

/// Per-pixel linear Stokes components.
#[derive(Clone, Debug, PartialEq)]
pub struct StokesMap {
    pub s0: Map,
    pub s1: Map,
    pub s2: Map,
}

impl StokesMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.s0.dims()
    }

    /// Collapses colour channels with fixed weights applied to each of S0, S1, S2.
    pub fn weighted(&self, weights: &[f64]) -> Result<StokesMap> {
        Ok(StokesMap {
            s0: self.s0.weighted_channels(weights)?,
            s1: self.s1.weighted_channels(weights)?,
            s2: self.s2.weighted_channels(weights)?,
        })
    }

    /// Luminance (0.299, 0.587, 0.114) for colour maps; identity for grey.
    pub fn luminance(&self) -> Result<StokesMap> {
        match self.s0.channels() {
            1 => Ok(self.clone()),
            3 => self.weighted(&LUMA_WEIGHTS),
            c => Err(Error::InvalidInput(format!("no luminance rule for {c} channels"))),
        }
    }
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationKind {
    Aolp,
    Dolp,
    Saolp,
    Caolp,
}

impl RepresentationKind {
    pub const ALL: [RepresentationKind; 4] = [Self::Aolp, Self::Dolp, Self::Saolp, Self::Caolp];

    /// Declared value range `(lo, hi)`. AoLP excludes `lo`; every other range is closed.
    pub fn range(self) -> (f64, f64) {
        match self {
            Self::Aolp => (-FRAC_PI_2, FRAC_PI_2),
            Self::Dolp => (0.0, 1.0),
            Self::Saolp => (-FRAC_PI_4, FRAC_PI_4),
            Self::Caolp => (0.0, FRAC_PI_2),
        }
    }

    pub fn contains(self, v: f64) -> bool {
        let (lo, hi) = self.range();
        match self {
            Self::Aolp => v > lo && v <= hi,
            _ => v >= lo && v <= hi,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Aolp => "aolp",
            Self::Dolp => "dolp",
            Self::Saolp => "saolp",
            Self::Caolp => "caolp",
        }
    }

    /// Maps a value in the declared range to `[0, 1]`.
    pub fn normalize(self, v: f64) -> f64 {
        let (lo, hi) = self.range();
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// Inverse of [`RepresentationKind::normalize`], folding the excluded AoLP endpoint.
    pub fn denormalize(self, u: f64) -> f64 {
        let (lo, hi) = self.range();
        let v = lo + u * (hi - lo);
        if self == Self::Aolp && v <= lo {
            v + PI
        } else {
            v
        }
    }
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RepresentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown representation {s:?} (aolp, dolp, saolp, caolp)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationMap {
    pub kind: RepresentationKind,
    pub values: Map,
}

impl RepresentationMap {
    /// Errors if any value falls outside the kind's declared range.
    pub fn new(kind: RepresentationKind, values: Map) -> Result<Self> {
        if let Some(v) = values.data().iter().find(|&&v| !kind.contains(v)) {
            return Err(Error::InvalidInput(format!("{kind} value {v} outside its range")));
        }
        Ok(Self { kind, values })
    }
}

/// How AoLP is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AolpFormula {
    /// `½·atan2(S2, S1)`, range `(−π/2, π/2]`.
    #[default]
    Atan2,
    /// The paper-literal `½·atan(S2/S1)`, range `[−π/4, π/4]`.
    Atan,
}

pub fn compute_stokes(p: &PolarizedImageSet) -> Result<StokesMap> {
    p.validate()?;
    let s0 = Map::new(
        p.i0.height(),
        p.i0.width(),
        p.i0.channels(),
        p.angles()
            .iter()
            .map(|m| m.data())
            .fold(vec![0.0; p.i0.data().len()], |mut acc, d| {
                acc.iter_mut().zip(d).for_each(|(a, v)| *a += v);
                acc
            })
            .into_iter()
            .map(|v| v / 2.0)
            .collect(),
    )?;
    let s1 = p.i0.zip(&p.i90, |a, b| a - b)?;
    let s2 = p.i45.zip(&p.i135, |a, b| a - b)?;
    Ok(StokesMap { s0, s1, s2 })
}

/// Angle of linear polarisation; `0` when `S1 = S2 = 0`.
pub fn aolp(s1: f64, s2: f64, formula: AolpFormula) -> f64 {
    if s1 == 0.0 && s2 == 0.0 {
        return 0.0;
    }
    match formula {
        AolpFormula::Atan2 => {
            let a = 0.5 * s2.atan2(s1);
            if a <= -FRAC_PI_2 {
                a + PI
            } else {
                a
            }
        }
        AolpFormula::Atan => 0.5 * (s2 / s1).atan(),
    }
}

/// Degree of linear polarisation, clamped to `[0, 1]`; `0` when `S0 = 0`.
pub fn dolp(s0: f64, s1: f64, s2: f64) -> f64 {
    if s0 == 0.0 {
        return 0.0;
    }
    (s1.hypot(s2) / s0).clamp(0.0, 1.0)
}

pub fn saolp(s0: f64, s2: f64) -> f64 {
    if s0 == 0.0 {
        return 0.0;
    }
    0.5 * (s2 / s0).clamp(-1.0, 1.0).asin()
}

pub fn caolp(s0: f64, s1: f64) -> f64 {
    if s0 == 0.0 {
        return 0.0;
    }
    0.5 * (s1 / s0).clamp(-1.0, 1.0).acos()
}

pub fn compute_representation(s: &StokesMap, kind: RepresentationKind) -> Result<RepresentationMap> {
    compute_representation_with(s, kind, AolpFormula::Atan2)
}

pub fn compute_representation_with(
    s: &StokesMap,
    kind: RepresentationKind,
    formula: AolpFormula,
) -> Result<RepresentationMap> {
    s.s0.check_same_dims(&s.s1)?;
    s.s0.check_same_dims(&s.s2)?;
    let nan = [&s.s0, &s.s1, &s.s2].iter().any(|m| m.data().iter().any(|v| v.is_nan()));
    if nan {
        return Err(Error::InvalidInput("NaN in Stokes input".into()));
    }
    let (h, w, c) = s.dims();
    let values: Vec<f64> =
        s.s0.data()
            .iter()
            .zip(s.s1.data())
            .zip(s.s2.data())
            .map(|((&s0, &s1), &s2)| match kind {
                RepresentationKind::Aolp => aolp(s1, s2, formula),
                RepresentationKind::Dolp => dolp(s0, s1, s2),
                RepresentationKind::Saolp => saolp(s0, s2),
                RepresentationKind::Caolp => caolp(s0, s1),
            })
            .collect();
    Ok(RepresentationMap { kind, values: Map::new(h, w, c, values)? })
}

/// Renders four angle images by Malus's law, `I_a = I_u/2 + I_p·cos²(θ − a)`.
pub fn synthesize_polarized(unpolarized: &Map, polarized: &Map, theta: &Map) -> Result<PolarizedImageSet> {
    unpolarized.check_same_dims(polarized)?;
    let (h, w, c) = unpolarized.dims();
    if theta.dims() != (h, w, c) && theta.dims() != (h, w, 1) {
        return Err(Error::InvalidInput(format!(
            "angle map {:?} matches neither {:?} nor a single channel",
            theta.dims(),
            (h, w, c)
        )));
    }
    let negative = [unpolarized, polarized].iter().any(|m| m.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()));
    if negative {
        return Err(Error::InvalidInput("intensities must be finite and non-negative".into()));
    }
    let render = |a: f64| {
        Map::from_fn(h, w, c, |y, x, ch| {
            let t = theta.get(y, x, if theta.channels() == 1 { 0 } else { ch });
            unpolarized.get(y, x, ch) / 2.0 + polarized.get(y, x, ch) * (t - a).cos().powi(2)
        })
    };
    PolarizedImageSet::new(render(0.0), render(FRAC_PI_4), render(FRAC_PI_2), render(3.0 * FRAC_PI_4))
}

/// 8-bit code for a representation value: its position in the declared range, rounded.
pub fn quantize(kind: RepresentationKind, v: f64) -> u8 {
    (kind.normalize(v) * 255.0).round() as u8
}

/// Writes an 8-bit PNG with the kind's declared range mapped to `0..=255`.
pub fn export_representation(r: &RepresentationMap, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = r.values.data().iter().map(|&v| quantize(r.kind, v)).collect();
    write_png_u8(path, r.values.height(), r.values.width(), r.values.channels(), &bytes)
}

/// Reads a representation PNG written by [`export_representation`].
pub fn import_representation(kind: RepresentationKind, path: &Path) -> Result<RepresentationMap> {
    let unit = Map::read_png(path)?;
    Ok(RepresentationMap { kind, values: unit.map(|u| kind.denormalize(u)) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(v: f64) -> Map {
        Map::filled(1, 1, 1, v)
    }

    fn stokes(s0: f64, s1: f64, s2: f64) -> StokesMap {
        StokesMap { s0: px(s0), s1: px(s1), s2: px(s2) }
    }

    fn rep(s: &StokesMap, kind: RepresentationKind) -> f64 {
        compute_representation(s, kind).unwrap().values.data()[0]
    }

    #[test]
    fn aolp_negative_half_turn_folds_to_positive() {
        // atan2(-0.0, -1) = -π; the halved angle must land on +π/2.
        assert_eq!(aolp(-1.0, -0.0, AolpFormula::Atan2), FRAC_PI_2);
        assert_eq!(aolp(-1.0, 0.0, AolpFormula::Atan2), FRAC_PI_2);
    }

    #[test]
    fn degenerate_pixels() {
        let s = stokes(0.0, 0.0, 0.0);
        for kind in RepresentationKind::ALL {
            assert_eq!(rep(&s, kind), 0.0, "{kind}");
        }
    }

    #[test]
    fn nan_is_rejected() {
        assert!(compute_representation(&stokes(f64::NAN, 0.0, 0.0), RepresentationKind::Dolp).is_err());
    }

    #[test]
    fn atan_variant_matches_literal_formula() {
        let v = aolp(0.3, -0.4, AolpFormula::Atan);
        assert_eq!(v, 0.5 * (-0.4f64 / 0.3).atan());
        // Quadrant information is lost: the two forms disagree by π/2 here.
        assert!((aolp(-0.3, 0.4, AolpFormula::Atan2) - v - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn denormalize_inverts_normalize() {
        for kind in RepresentationKind::ALL {
            let (lo, hi) = kind.range();
            for k in 1..10 {
                let v = lo + (hi - lo) * k as f64 / 10.0;
                assert!((kind.denormalize(kind.normalize(v)) - v).abs() < 1e-12);
            }
        }
        assert_eq!(RepresentationKind::Aolp.denormalize(0.0), FRAC_PI_2);
    }
}
