//! On-disk layout:
//!
//! ```text
//! root/<split>/manifest.json
//! root/<split>/images/{000,045,090,135}/<id>.png     angle datasets
//! root/<split>/images/rgb/<id>.png                   representation datasets
//! root/<split>/representations/<kind>/<id>.png       representation datasets
//! root/<split>/labels/<id>.png                       8-bit class ids, 255 = ignore
//! ```

use super::Sample;
use crate::error::{Error, Result};
use crate::image::{Map, Mask};
use crate::polarization::{import_representation, PolarizedImageSet, RepresentationKind};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ANGLE_DIRS: [&str; 4] = ["000", "045", "090", "135"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    #[default]
    Angles,
    Representations,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    split: String,
    num_classes: usize,
    class_names: Vec<String>,
    ids: Vec<String>,
    #[serde(default)]
    input: InputKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    representations: Vec<RepresentationKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    palette: Vec<[u8; 3]>,
}

/// A split of a dataset; read-only once opened.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: String,
    pub ids: Vec<String>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub input: InputKind,
    pub representations: Vec<RepresentationKind>,
    /// Colours for prediction export; may be empty.
    pub palette: Vec<[u8; 3]>,
}

impl DatasetIndex {
    pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
        root.join(split).join("manifest.json")
    }

    pub fn open(root: &Path, split: &str) -> Result<DatasetIndex> {
        let path = Self::manifest_path(root, split);
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::dataset(&path, format!("cannot read manifest: {e}")))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::dataset(&path, format!("malformed manifest: {e}")))?;
        if m.split != split {
            return Err(Error::dataset(&path, format!("manifest is for split {:?}", m.split)));
        }
        if m.class_names.len() != m.num_classes {
            return Err(Error::dataset(&path, "class_names length differs from num_classes"));
        }
        if m.num_classes == 0 || m.num_classes > 255 {
            return Err(Error::dataset(&path, "num_classes must be in 1..=255"));
        }
        if m.input == InputKind::Representations && m.representations.is_empty() {
            return Err(Error::dataset(&path, "representation dataset lists no representations"));
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            split: m.split,
            ids: m.ids,
            num_classes: m.num_classes,
            class_names: m.class_names,
            input: m.input,
            representations: m.representations,
            palette: m.palette,
        })
    }

    pub fn save(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root, &self.split);
        let m = Manifest {
            split: self.split.clone(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            ids: self.ids.clone(),
            input: self.input,
            representations: self.representations.clone(),
            palette: self.palette.clone(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    pub fn angle_path(&self, angle: usize, id: &str) -> PathBuf {
        self.split_dir().join("images").join(ANGLE_DIRS[angle]).join(format!("{id}.png"))
    }

    pub fn rgb_path(&self, id: &str) -> PathBuf {
        self.split_dir().join("images").join("rgb").join(format!("{id}.png"))
    }

    pub fn representation_path(&self, kind: RepresentationKind, id: &str) -> PathBuf {
        self.split_dir().join("representations").join(kind.name()).join(format!("{id}.png"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.split_dir().join("labels").join(format!("{id}.png"))
    }

    /// Every file a sample needs.
    pub fn required_files(&self, id: &str) -> Vec<PathBuf> {
        let mut files = match self.input {
            InputKind::Angles => (0..4).map(|a| self.angle_path(a, id)).collect(),
            InputKind::Representations => {
                let mut v = vec![self.rgb_path(id)];
                v.extend(self.representations.iter().map(|&k| self.representation_path(k, id)));
                v
            }
        };
        files.push(self.label_path(id));
        files
    }

    /// Checks that every indexed id resolves to all of its files.
    pub fn validate(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::dataset(self.split_dir(), "split has no samples"));
        }
        for id in &self.ids {
            if let Some(missing) = self.required_files(id).into_iter().find(|p| !p.is_file()) {
                return Err(Error::dataset(missing, format!("missing file for sample {id:?}")));
            }
        }
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        load_sample(self, id)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.ids.iter().map(|id| load_sample(self, id)).collect()
    }
}

/// Decodes one sample and derives its rgb image and polarisation targets.
pub fn load_sample(index: &DatasetIndex, id: &str) -> Result<Sample> {
    if !index.ids.iter().any(|i| i == id) {
        return Err(Error::dataset(index.split_dir(), format!("sample id {id:?} is not in the index")));
    }
    let mask = Mask::read_png(&index.label_path(id))?;
    let sample = match index.input {
        InputKind::Angles => {
            let read = |a: usize| Map::read_png(&index.angle_path(a, id));
            let angles = PolarizedImageSet::new(read(0)?, read(1)?, read(2)?, read(3)?)?;
            Sample::from_angles(id, angles, mask)?
        }
        InputKind::Representations => {
            let rgb = Map::read_png(&index.rgb_path(id))?;
            let reps = index
                .representations
                .iter()
                .map(|&k| import_representation(k, &index.representation_path(k, id)))
                .collect::<Result<Vec<_>>>()?;
            Sample::from_representations(id, reps, rgb, mask)?
        }
    };
    sample.validate(index.num_classes)?;
    Ok(sample)
}
