//! The run configuration: one JSON document with a section per module,
//! merged over defaults and then over `section.key=value` overrides.
//!
//! ```
//! use sharecmp::config::RunConfig;
//!
//! let mut cfg = RunConfig::tiny();
//! cfg.apply_override("cpa.active_stages", "1,2,3,4").unwrap();
//! cfg.apply_override("train.lr0", "1e-3").unwrap();
//! assert_eq!(cfg.cpa.active_stages.to_string(), "1,2,3,4");
//! assert!(cfg.apply_override("cpa.bogus", "1").is_err());
//! ```

use crate::cpa::CpaConfig;
use crate::data::AugmentConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::model::ModelConfig;
use crate::pga::PgaConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        // UPLight's class count.
        Self { num_classes: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `<split>/manifest.json`; resolved against the
    /// current directory when relative.
    pub root: PathBuf,
    pub train_split: String,
    /// Evaluated during and after training; the train split when absent.
    pub val_split: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("data"), train_split: "train".into(), val_split: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub encoder: EncoderConfig,
    pub pga: PgaConfig,
    pub cpa: CpaConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

/// Every configuration key with a one-line description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("model.num_classes", "number of segmentation classes, 1..=255 (label 255 is ignored)"),
    ("encoder.dims", "channel width of each of the four stages"),
    ("encoder.depths", "transformer blocks per stage"),
    ("encoder.heads", "attention heads per stage"),
    ("encoder.sr_ratios", "spatial-reduction ratio of the attention keys per stage"),
    ("encoder.mlp_ratio", "hidden width of the Mix-FFN as a multiple of the stage width"),
    ("encoder.patch_sizes", "kernel size of each overlapping patch embedding"),
    ("encoder.patch_strides", "stride of each patch embedding; must multiply to 32"),
    ("encoder.me_opembed_stages", "stages with a separate polarization patch embedding (ME OPEmbed), e.g. 1,2,3,4"),
    ("encoder.share_trunk", "share transformer blocks between the RGB and polarization branches"),
    ("pga.mid_channels", "output channels of each per-angle convolution"),
    ("pga.angle_channels", "channels of each angle image (3 for colour sensors)"),
    ("pga.dilation", "dilation of the grouped 3x3 convolution"),
    ("pga.groups", "groups of the dilated 3x3 convolution"),
    ("pga.reduction", "squeeze-excitation bottleneck reduction"),
    ("pga.shared_prelu_slope", "one PReLU slope for all output channels instead of one each"),
    ("pga.bypass", "skip PGA and feed stacked precomputed representations to the encoder"),
    ("pga.normalize_representations", "in bypass mode, rescale each representation to [0, 1]"),
    ("cpa.active_stages", "stages supervised by the CPA loss; [] disables it"),
    ("cpa.lambda", "weight of the CPA loss"),
    ("cpa.reduction", "mean (per pixel) or sum (per image) reduction of the CPA loss"),
    ("decoder.embed_dim", "channel width of the all-MLP decoder"),
    ("decoder.dropout", "dropout before the classifier during training"),
    ("train.lr0", "peak learning rate"),
    ("train.power", "exponent of the poly decay"),
    ("train.warmup_epochs", "epochs of warmup"),
    ("train.warmup_factor", "warmup starts at warmup_factor * lr0"),
    ("train.warmup_mode", "linear ramp or constant floor during warmup"),
    ("train.weight_decay", "decoupled AdamW weight decay"),
    ("train.batch_size", "images per update"),
    ("train.epochs", "passes over the training split"),
    ("train.max_steps", "stop after this many updates; null runs all epochs"),
    ("train.seed", "seed for weights, shuffling, augmentation and dropout"),
    ("train.eval_every", "evaluate every this many epochs; 0 only at the end"),
    ("train.log_every", "write a metrics record every this many steps"),
    ("data.root", "dataset root containing <split>/manifest.json"),
    ("data.train_split", "split used for training"),
    ("data.val_split", "split used for evaluation; null evaluates on the training split"),
    ("augment.enabled", "apply the augmentation pipeline during training"),
    ("augment.resize_ratio_range", "random rescale range [lo, hi]"),
    ("augment.hflip_prob", "probability of a horizontal flip"),
    ("augment.hflip_mode", "naive (pixels only) or physical (also swaps 45/135 degree images)"),
    ("augment.color_jitter.brightness", "maximum relative brightness change"),
    ("augment.color_jitter.contrast", "maximum relative contrast change"),
    ("augment.color_jitter.saturation", "maximum relative saturation change"),
    ("augment.color_jitter.hue", "maximum hue rotation as a fraction of a turn"),
    ("augment.crop_size", "random crop [height, width]; padded with the ignore label"),
];

/// Text for `--help`: one line per key.
pub fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    CONFIG_KEYS.iter().map(|(k, d)| format!("  --{k:<width$}  {d}\n")).collect()
}

/// Override values are JSON when they parse as JSON, a list when they
/// contain commas, and a string otherwise; so `1,2,3,4`, `[1,2]`, `0.1`,
/// `null` and `linear` all work unquoted.
fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

impl RunConfig {
    /// The paper's model (MiT-B2 shapes) with the desk-scale training defaults.
    pub fn mit_b2() -> Self {
        Self::default()
    }

    pub fn tiny() -> Self {
        let m = ModelConfig::tiny(3);
        Self {
            model: ModelSection { num_classes: m.num_classes },
            encoder: m.encoder,
            pga: m.pga,
            cpa: m.cpa,
            decoder: m.decoder,
            ..Self::default()
        }
    }

    /// Unset keys take their defaults; unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the dotted `key` to `raw` (see [`CONFIG_KEYS`]).
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!("{key:?} is a section, not a key")));
        }
        *slot = parse_value(raw);
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("--{key}={raw}: {e}")))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.model.num_classes,
            encoder: self.encoder.clone(),
            pga: self.pga.clone(),
            cpa: self.cpa.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate().map_err(Error::Config)?;
        self.augment.validate().map_err(Error::Config)?;
        if self.data.train_split.is_empty() || self.data.val_split.as_deref() == Some("") {
            return Err(Error::Config("data splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaves(v, &key, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn key_table_matches_config() {
        let mut keys = Vec::new();
        leaves(&serde_json::to_value(RunConfig::default()).unwrap(), "", &mut keys);
        let mut documented: Vec<String> = CONFIG_KEYS.iter().map(|(k, _)| k.to_string()).collect();
        keys.sort();
        documented.sort();
        assert_eq!(keys, documented);
    }

    #[test]
    fn override_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.max_steps", "10").unwrap();
        assert_eq!(cfg.train.max_steps, Some(10));
        cfg.apply_override("train.max_steps", "null").unwrap();
        assert_eq!(cfg.train.max_steps, None);
        cfg.apply_override("data.root", "/tmp/x").unwrap();
        assert_eq!(cfg.data.root, PathBuf::from("/tmp/x"));
        cfg.apply_override("train.warmup_mode", "constant").unwrap();
        cfg.apply_override("encoder.dims", "8,16,32,64").unwrap();
        assert_eq!(cfg.encoder.dims, [8, 16, 32, 64]);
        cfg.apply_override("augment.color_jitter.hue", "0").unwrap();
        cfg.apply_override("cpa.active_stages", "[]").unwrap();
        assert!(!cfg.cpa.enabled());
    }

    #[test]
    fn override_errors() {
        let mut cfg = RunConfig::default();
        for (k, v) in
            [("nope", "1"), ("train", "1"), ("train.lr0.x", "1"), ("train.lr0", "fast"), ("cpa.active_stages", "5")]
        {
            assert!(matches!(cfg.apply_override(k, v), Err(Error::Config(_))), "{k}={v}");
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"train": {"lr0": 0.001}}"#).unwrap();
        assert_eq!(cfg.train.lr0, 0.001);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
    }
}
