use super::evaluate::{evaluate_samples, EvalReport};
use super::lr::{LrSchedule, WarmupMode};
use crate::data::{augment, collate, AugmentConfig, Batch, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ShareCmp};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sharecmp_nn::{AdamW, AdamWConfig, Ctx, Graph, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub power: f64,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub warmup_mode: WarmupMode,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
    /// Seeds weights, shuffling, augmentation and dropout.
    pub seed: u64,
    /// Evaluate every this many epochs; 0 evaluates only after the last.
    pub eval_every: usize,
    /// Write a log record every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 6e-5,
            power: 1.0,
            warmup_epochs: 5,
            warmup_factor: 1e-6,
            warmup_mode: WarmupMode::Linear,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 20,
            max_steps: None,
            seed: 0,
            eval_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(format!("train.lr0 must be positive, got {}", self.lr0));
        }
        if !(self.power > 0.0) {
            return Err("train.power must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_factor) {
            return Err("train.warmup_factor must lie in [0, 1]".into());
        }
        if self.weight_decay < 0.0 {
            return Err("train.weight_decay must be >= 0".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.log_every == 0 {
            return Err("train.batch_size, train.epochs and train.log_every must be positive".into());
        }
        if self.epochs < self.warmup_epochs {
            return Err(format!(
                "train.epochs ({}) must be at least train.warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            ));
        }
        if self.max_steps == Some(0) {
            return Err("train.max_steps must be positive when set".into());
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        let total = self.epochs * steps_per_epoch;
        LrSchedule {
            lr0: self.lr0,
            power: self.power,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            warmup_factor: self.warmup_factor,
            warmup_mode: self.warmup_mode,
            total_steps: self.max_steps.map_or(total, |m| m.min(total)),
        }
    }
}

/// Loss components of one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub seg: f64,
    pub cpa: f64,
    pub total: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub seg_loss: f64,
    pub cpa_loss: f64,
    pub total_loss: f64,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
}

/// Model, parameters and optimiser state.
pub struct Trainer {
    pub model: ShareCmp,
    pub store: ParamStore,
    optimizer: AdamW,
    seed: u64,
    step: usize,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Self {
        let mut store = ParamStore::new(train_cfg.seed);
        let model = ShareCmp::new(&mut store, model_cfg);
        let optimizer = AdamW::new(AdamWConfig { weight_decay: train_cfg.weight_decay, ..AdamWConfig::default() });
        Self { model, store, optimizer, seed: train_cfg.seed, step: 0 }
    }

    /// Updates taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// Forward, `seg + cpa` loss, backward and one AdamW update at `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepLosses> {
        let grads;
        let losses;
        {
            let graph = Graph::new();
            let dropout_seed = self.seed ^ (self.step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let ctx = Ctx::new(&graph, &self.store, true, dropout_seed);
            let out = self.model.forward(&ctx, batch)?;
            let l = self.model.losses(&out, batch)?;
            losses = StepLosses {
                seg: l.seg.value().item(),
                cpa: l.cpa.map_or(0.0, |c| c.value().item()),
                total: l.total.value().item(),
            };
            if !losses.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {}: seg_loss={}, cpa_loss={}, total={}, lr={lr}",
                    self.step, losses.seg, losses.cpa, losses.total
                )));
            }
            grads = graph.backward(l.total);
        }
        self.optimizer.step(&mut self.store, &grads, lr);
        self.step += 1;
        Ok(losses)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRecord>,
    pub final_eval: EvalReport,
}

/// Runs the full schedule on in-memory samples, evaluating on `eval`
/// (every `eval_every` epochs and after the last step). Every log record is
/// also handed to `sink` as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
    train_samples: &[Sample],
    eval_samples: &[Sample],
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_samples.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    for s in train_samples.iter().chain(eval_samples) {
        s.validate(model_cfg.num_classes)?;
    }
    let steps_per_epoch = train_samples.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    let mut trainer = Trainer::new(model_cfg, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let normalize = model_cfg.pga.normalize_representations;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut last: Option<LogRecord> = None;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if trainer.step() >= schedule.total_steps {
                break 'epochs;
            }
            let augmented =
                chunk.iter().map(|&i| augment(&train_samples[i], augment_cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
            let batch = collate(&augmented.iter().collect::<Vec<_>>(), normalize)?;
            let step = trainer.step();
            let lr = schedule.lr(step);
            let l = trainer.train_step(&batch, lr)?;
            let record =
                LogRecord { step, epoch, lr, seg_loss: l.seg, cpa_loss: l.cpa, total_loss: l.total, miou: None };
            if step % cfg.log_every == 0 {
                sink(&record)?;
                log.push(record.clone());
            }
            last = Some(record);
        }
        let is_last_epoch = epoch + 1 == cfg.epochs || trainer.step() >= schedule.total_steps;
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !is_last_epoch && !eval_samples.is_empty() {
            let report = evaluate_samples(&trainer.model, &trainer.store, eval_samples)?;
            if let Some(rec) = &last {
                let rec = LogRecord { miou: report.miou, ..rec.clone() };
                sink(&rec)?;
                log.push(rec);
            }
        }
    }
    let final_eval = evaluate_samples(
        &trainer.model,
        &trainer.store,
        if eval_samples.is_empty() { train_samples } else { eval_samples },
    )?;
    if let Some(rec) = last {
        let rec = LogRecord { miou: final_eval.miou, ..rec };
        sink(&rec)?;
        log.push(rec);
    }
    Ok(TrainOutcome { trainer, log, final_eval })
}
