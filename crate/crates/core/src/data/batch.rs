use super::{PolarInput, Sample};
use crate::error::{Error, Result};
use crate::image::Map;
use crate::polarization::RepresentationMap;
use sharecmp_nn::Tensor;

/// Model-ready tensors for a batch of equally sized samples, `(N, C, H, W)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub rgb: Tensor,
    pub polar: PolarBatch,
    /// `N·H·W` class ids, row-major per sample.
    pub mask: Vec<u8>,
    pub aolp: Tensor,
    pub dolp: Tensor,
}

#[derive(Clone, Debug)]
pub enum PolarBatch {
    /// The four angle images in 0/45/90/135 order.
    Angles([Tensor; 4]),
    /// Channel-stacked representation maps.
    Representations(Tensor),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.rgb.dims4();
        (h, w)
    }
}

fn stack(maps: &[Tensor]) -> Tensor {
    Tensor::cat(&maps.iter().collect::<Vec<_>>(), 0)
}

/// Stacks representations; with `normalize`, each kind's declared range maps to `[0, 1]`.
pub fn representation_stack(reps: &[RepresentationMap], normalize: bool) -> Result<Map> {
    let maps: Vec<Map> =
        reps.iter().map(|r| if normalize { r.values.map(|v| r.kind.normalize(v)) } else { r.values.clone() }).collect();
    Map::stack(&maps.iter().collect::<Vec<_>>())
}

pub fn collate(samples: &[&Sample], normalize_representations: bool) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let dims = (first.height(), first.width());
    if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != dims) {
        return Err(Error::InvalidInput(format!(
            "sample {} is {}x{}, batch is {}x{}",
            s.id,
            s.height(),
            s.width(),
            dims.0,
            dims.1
        )));
    }
    let polar = match &first.input {
        PolarInput::Angles(_) => {
            let mut per_angle: [Vec<Tensor>; 4] = Default::default();
            for s in samples {
                let PolarInput::Angles(a) = &s.input else {
                    return Err(Error::InvalidInput("batch mixes angle and representation samples".into()));
                };
                for (k, m) in a.angles().iter().enumerate() {
                    per_angle[k].push(m.to_tensor());
                }
            }
            PolarBatch::Angles(per_angle.map(|v| stack(&v)))
        }
        PolarInput::Representations(_) => {
            let mut items = Vec::with_capacity(samples.len());
            for s in samples {
                let PolarInput::Representations(r) = &s.input else {
                    return Err(Error::InvalidInput("batch mixes angle and representation samples".into()));
                };
                items.push(representation_stack(r, normalize_representations)?.to_tensor());
            }
            PolarBatch::Representations(stack(&items))
        }
    };
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        rgb: stack(&samples.iter().map(|s| s.rgb.to_tensor()).collect::<Vec<_>>()),
        polar,
        mask: samples.iter().flat_map(|s| s.mask.data().iter().copied()).collect(),
        aolp: stack(&samples.iter().map(|s| s.aolp_target.to_tensor()).collect::<Vec<_>>()),
        dolp: stack(&samples.iter().map(|s| s.dolp_target.to_tensor()).collect::<Vec<_>>()),
    })
}
