//! Synthetic RGB-P scenes: axis-aligned rectangles over a background, each
//! class with its own colour, DoLP and AoLP, rendered through Malus's law.

use super::dataset::{DatasetIndex, InputKind};
use crate::error::{Error, Result};
use crate::image::{Map, Mask};
use crate::polarization::{
    compute_representation, compute_stokes, export_representation, synthesize_polarized, PolarizedImageSet,
    RepresentationKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub dolp: f64,
    /// Radians in `(−π/2, π/2]`.
    pub aolp: f64,
    /// Linear RGB in `[0, 1]`; the total intensity `S0` of the class.
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class 0 is the background.
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
    #[serde(default = "default_shapes")]
    pub shapes_per_image: usize,
    #[serde(default = "default_split")]
    pub split: String,
    /// Write these representations (plus an rgb image) instead of angle images.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub representations: Vec<RepresentationKind>,
}

fn default_shapes() -> usize {
    4
}

fn default_split() -> String {
    "train".into()
}

impl SyntheticSceneSpec {
    /// Three well-separated classes; the default for tests and the overfit check.
    pub fn three_class(height: usize, width: usize, seed: u64) -> Self {
        let class = |name: &str, dolp, aolp, color| ClassSpec { name: name.into(), dolp, aolp, color };
        Self {
            height,
            width,
            classes: vec![
                class("background", 0.5, 0.0, [0.8, 0.8, 0.8]),
                class("glass", 0.8, std::f64::consts::FRAC_PI_4, [0.3, 0.6, 0.9]),
                class("metal", 0.6, -std::f64::consts::FRAC_PI_6, [0.9, 0.5, 0.2]),
            ],
            seed,
            shapes_per_image: 4,
            split: default_split(),
            representations: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("synthetic images must be at least 8x8".into()));
        }
        if self.classes.is_empty() || self.classes.len() > 255 {
            return Err(Error::Config("synthetic spec needs 1..=255 classes".into()));
        }
        for c in &self.classes {
            if !(0.0..=1.0).contains(&c.dolp) {
                return Err(Error::Config(format!("class {:?}: dolp {} outside [0, 1]", c.name, c.dolp)));
            }
            if !(c.aolp > -FRAC_PI_2 && c.aolp <= FRAC_PI_2) {
                return Err(Error::Config(format!("class {:?}: aolp {} outside (-pi/2, pi/2]", c.name, c.aolp)));
            }
            if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("class {:?}: colour outside [0, 1]", c.name)));
            }
        }
        if self.split.is_empty() || self.split.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid split name {:?}", self.split)));
        }
        Ok(())
    }

    fn palette(&self) -> Vec<[u8; 3]> {
        self.classes.iter().map(|c| c.color.map(|v| (v * 255.0).round() as u8)).collect()
    }
}

pub fn sample_id(i: usize) -> String {
    format!("{i:04}")
}

/// Class layout and noise-free angle images of scene `index`.
pub fn render_scene(spec: &SyntheticSceneSpec, index: usize) -> Result<(PolarizedImageSet, Mask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut mask = Mask::filled(h, w, 0);
    let foreground = spec.num_classes() - 1;
    if foreground > 0 {
        for k in 0..spec.shapes_per_image {
            // Cycling guarantees every class appears when there are enough shapes.
            let class = 1 + (k % foreground) as u8;
            let rh = rng.random_range(h / 4..=h / 2);
            let rw = rng.random_range(w / 4..=w / 2);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    mask.set(y, x, class);
                }
            }
        }
    }
    let class_of = |y: usize, x: usize| &spec.classes[mask.get(y, x) as usize];
    let unpol = Map::from_fn(h, w, 3, |y, x, c| {
        let k = class_of(y, x);
        (1.0 - k.dolp) * k.color[c]
    });
    let pol = Map::from_fn(h, w, 3, |y, x, c| {
        let k = class_of(y, x);
        k.dolp * k.color[c]
    });
    let theta = Map::from_fn(h, w, 1, |y, x, _| class_of(y, x).aolp);
    let set = synthesize_polarized(&unpol, &pol, &theta)?;
    Ok((set, mask))
}

/// Writes `n` scenes under `root/<split>/` and returns the saved index.
pub fn generate_synthetic_dataset(spec: &SyntheticSceneSpec, n: usize, root: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one synthetic sample".into()));
    }
    let index = DatasetIndex {
        root: root.to_path_buf(),
        split: spec.split.clone(),
        ids: (0..n).map(sample_id).collect(),
        num_classes: spec.num_classes(),
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        input: if spec.representations.is_empty() { InputKind::Angles } else { InputKind::Representations },
        representations: spec.representations.clone(),
        palette: spec.palette(),
    };
    for (i, id) in index.ids.iter().enumerate() {
        let (set, mask) = render_scene(spec, i)?;
        if spec.representations.is_empty() {
            for (a, m) in set.angles().iter().enumerate() {
                m.write_png(&index.angle_path(a, id))?;
            }
        } else {
            let stokes = compute_stokes(&set)?;
            stokes.s0.write_png(&index.rgb_path(id))?;
            let luma = stokes.luminance()?;
            for &kind in &spec.representations {
                export_representation(&compute_representation(&luma, kind)?, &index.representation_path(kind, id))?;
            }
        }
        mask.write_png(&index.label_path(id))?;
    }
    index.save()?;
    Ok(index)
}
