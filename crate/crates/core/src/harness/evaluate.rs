use super::metrics::ConfusionMatrix;
use crate::data::{collate, DatasetIndex, Sample};
use crate::decoder::predict;
use crate::error::{Error, Result};
use crate::model::ShareCmp;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sharecmp_nn::{Ctx, Graph, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        Self { iou: confusion.iou(), miou: confusion.miou(), pixel_accuracy: confusion.pixel_accuracy(), confusion }
    }
}

/// Class-id predictions for one sample, row-major `H·W`.
pub fn predict_sample(model: &ShareCmp, store: &ParamStore, sample: &Sample) -> Result<Vec<u8>> {
    let batch = collate(&[sample], model.config().pga.normalize_representations)?;
    let graph = Graph::new();
    let ctx = Ctx::eval(&graph, store);
    let out = model.forward(&ctx, &batch)?;
    Ok(predict(&out.logits.value()))
}

/// Images are processed in parallel; per-image matrices are summed in input
/// order, so the result does not depend on scheduling.
pub fn evaluate_samples(model: &ShareCmp, store: &ParamStore, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let n = model.config().num_classes;
    let per_image: Vec<Result<ConfusionMatrix>> = samples
        .par_iter()
        .map(|s| {
            let pred = predict_sample(model, store, s)?;
            let mut cm = ConfusionMatrix::new(n);
            cm.update(&pred, s.mask.data())?;
            Ok(cm)
        })
        .collect();
    let mut total = ConfusionMatrix::new(n);
    for cm in per_image {
        total.merge(&cm?);
    }
    Ok(EvalReport::from_confusion(total))
}

pub fn evaluate(model: &ShareCmp, store: &ParamStore, index: &DatasetIndex) -> Result<EvalReport> {
    if index.ids.is_empty() {
        return Err(Error::dataset(&index.root, format!("split {:?} is empty", index.split)));
    }
    let samples = index.load_all()?;
    evaluate_samples(model, store, &samples)
}
