//! File-level drivers behind the command-line tool: each reads its inputs
//! from disk, runs one harness operation and writes its outputs under a
//! directory.
//!
//! Training writes
//!
//! ```text
//! out/config.json       the resolved run configuration
//! out/metrics.jsonl     one LogRecord per line
//! out/checkpoint.tar    see harness::checkpoint
//! out/eval.json         EvalReport of the final model
//! ```

use crate::config::RunConfig;
use crate::data::{collate, DatasetIndex, PolarInput};
use crate::error::{Error, Result};
use crate::harness::{predict_sample, read_checkpoint, save_checkpoint, train, EvalReport, LogRecord};
use crate::image::{Map, Mask};
use crate::model::ShareCmp;
use crate::polarization::{compute_representation, compute_stokes, export_representation, RepresentationKind};
use serde::{Deserialize, Serialize};
use sharecmp_nn::{Ctx, Graph, ParamStore};
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.tar";
pub const EVAL_FILE: &str = "eval.json";

/// An evaluation with the class names it refers to; the JSON report format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub split: String,
    pub class_names: Vec<String>,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl NamedReport {
    /// Per-class IoU table in percent, `-` for classes absent from both
    /// prediction and truth.
    pub fn table(&self) -> String {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  {:>7}\n", "Class", "IoU (%)");
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        for (name, iou) in self.class_names.iter().zip(&self.report.iou) {
            let _ = writeln!(s, "{name:<width$}  {:>7}", pct(*iou));
        }
        let _ = writeln!(s, "{:<width$}  {:>7}", "mIoU", pct(self.report.miou));
        let _ = write!(s, "{:<width$}  {:>7}", "PixAcc", pct(self.report.pixel_accuracy));
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<LogRecord>,
    pub eval: NamedReport,
    pub checkpoint: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn open_split(cfg: &RunConfig, split: &str) -> Result<DatasetIndex> {
    let index = DatasetIndex::open(&cfg.data.root, split)?;
    index.validate()?;
    if index.num_classes != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes is {} but split {split:?} of {} has {} classes",
            cfg.model.num_classes,
            cfg.data.root.display(),
            index.num_classes
        )));
    }
    Ok(index)
}

/// Validates `cfg`, trains on `data.train_split`, evaluates on
/// `data.val_split` (or the training split) and writes everything under `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_index = open_split(cfg, &cfg.data.train_split)?;
    let val_index = match &cfg.data.val_split {
        Some(split) => Some(open_split(cfg, split)?),
        None => None,
    };
    let train_samples = train_index.load_all()?;
    let val_samples = match &val_index {
        Some(index) => index.load_all()?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let metrics_path = out.join(METRICS_FILE);
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut sink = |r: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(metrics, "{line}").and_then(|_| metrics.flush()).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "step {} epoch {} lr {:.3e} seg {:.4} cpa {:.4}{}",
            r.step,
            r.epoch,
            r.lr,
            r.seg_loss,
            r.cpa_loss,
            r.miou.map_or(String::new(), |m| format!(" mIoU {:.4}", m))
        );
        Ok(())
    };
    let outcome = train(&cfg.model_config(), &cfg.train, &cfg.augment, &train_samples, &val_samples, &mut sink)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, cfg, &outcome.trainer.store)?;
    let eval_index = val_index.as_ref().unwrap_or(&train_index);
    let eval = NamedReport {
        split: eval_index.split.clone(),
        class_names: eval_index.class_names.clone(),
        report: outcome.final_eval,
    };
    write_json(&out.join(EVAL_FILE), &eval)?;
    Ok(TrainSummary { steps: outcome.trainer.step(), last: outcome.log.last().cloned(), eval, checkpoint })
}

/// Rebuilds the model stored in a checkpoint archive.
pub fn load_model(path: &Path) -> Result<(RunConfig, ShareCmp, ParamStore)> {
    let ckpt = read_checkpoint(path)?;
    let cfg: RunConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: config.json: {e}", path.display())))?;
    let model_cfg = cfg.model_config();
    model_cfg
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: stored configuration is invalid: {e}", path.display())))?;
    let mut store = ParamStore::new(0);
    let model = ShareCmp::new(&mut store, &model_cfg);
    ckpt.load_into(&mut store)?;
    Ok((cfg, model, store))
}

/// A checkpoint and the dataset split it is applied to. A dataset whose
/// class count differs from the checkpoint's is a checkpoint mismatch.
fn load_for_split(checkpoint: &Path, root: &Path, split: &str) -> Result<(ShareCmp, ParamStore, DatasetIndex)> {
    let (cfg, model, store) = load_model(checkpoint)?;
    let index = DatasetIndex::open(root, split)?;
    index.validate()?;
    if index.num_classes != cfg.model.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes, dataset split {split:?} has {}",
            cfg.model.num_classes, index.num_classes
        )));
    }
    Ok((model, store, index))
}

/// Evaluates a checkpoint on `root/split`.
pub fn eval_run(checkpoint: &Path, root: &Path, split: &str) -> Result<NamedReport> {
    let (model, store, index) = load_for_split(checkpoint, root, split)?;
    let report = crate::harness::evaluate(&model, &store, &index)?;
    Ok(NamedReport { split: split.to_string(), class_names: index.class_names, report })
}

/// Writes the predicted class ids of every sample in `root/split` to
/// `out/<id>.png`, and with `color` also `out/color/<id>.png` drawn in the
/// dataset palette. Returns the number of samples.
pub fn predict_run(checkpoint: &Path, root: &Path, split: &str, out: &Path, color: bool) -> Result<usize> {
    let (model, store, index) = load_for_split(checkpoint, root, split)?;
    for id in &index.ids {
        let sample = index.load(id)?;
        let mask = Mask::new(sample.mask.height(), sample.mask.width(), predict_sample(&model, &store, &sample)?)?;
        mask.write_png(&out.join(format!("{id}.png")))?;
        if color {
            mask.write_color_png(&out.join("color").join(format!("{id}.png")), &index.palette)?;
        }
    }
    Ok(index.ids.len())
}

/// Writes `out/<kind>/<id>.png` for every sample and kind, and with a
/// checkpoint also `out/pga/<id>.png`, the polarisation-branch image the
/// model feeds its encoder. Returns the number of files written.
pub fn stokes_export(
    root: &Path,
    split: &str,
    out: &Path,
    kinds: &[RepresentationKind],
    checkpoint: Option<&Path>,
) -> Result<usize> {
    let index = DatasetIndex::open(root, split)?;
    index.validate()?;
    let model = checkpoint.map(load_model).transpose()?;
    let mut written = 0;
    for id in &index.ids {
        let sample = index.load(id)?;
        for &kind in kinds {
            let map = match &sample.input {
                PolarInput::Angles(angles) => compute_representation(&compute_stokes(angles)?.luminance()?, kind)?,
                PolarInput::Representations(reps) => reps
                    .iter()
                    .find(|r| r.kind == kind)
                    .cloned()
                    .ok_or_else(|| Error::dataset(index.split_dir(), format!("dataset does not provide {kind}")))?,
            };
            export_representation(&map, &out.join(kind.name()).join(format!("{id}.png")))?;
            written += 1;
        }
        if let Some((_, model, store)) = &model {
            let batch = collate(&[&sample], model.config().pga.normalize_representations)?;
            let graph = Graph::new();
            let ctx = Ctx::eval(&graph, store);
            let (image, _) = model.polar_input(&ctx, &batch.polar)?;
            Map::from_tensor(&image.value(), 0).write_png(&out.join("pga").join(format!("{id}.png")))?;
            written += 1;
        }
    }
    Ok(written)
}
