//! Numpy-style broadcasting for binary element-wise ops.

use crate::Tensor;

/// Right-aligned broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How the elements of an operand map onto the broadcast output.
enum Layout {
    /// Operand has the output shape.
    Same,
    /// Operand repeats every `period` output elements (it is a suffix of the output shape).
    Cyclic { period: usize },
    /// Each operand element covers a contiguous run of `run` output elements.
    Blocked { run: usize },
    /// Anything else: strides into the operand, zero on broadcast axes.
    Strided(Vec<usize>),
}

fn layout(operand: &[usize], out: &[usize]) -> Layout {
    let numel: usize = operand.iter().product();
    let out_numel: usize = out.iter().product();
    if numel == out_numel {
        return Layout::Same;
    }
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, rank - operand.len()).chain(operand.iter().copied()).collect();
    // suffix: leading broadcast axes only
    let first_real = padded.iter().position(|&d| d != 1).unwrap_or(rank);
    if padded[first_real..] == out[first_real..] && padded[..first_real].iter().all(|&d| d == 1) {
        return Layout::Cyclic { period: numel };
    }
    // prefix: trailing broadcast axes only
    let last_real = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if padded[..last_real] == out[..last_real] && padded[last_real..].iter().all(|&d| d == 1) {
        let run: usize = out[last_real..].iter().product();
        return Layout::Blocked { run };
    }
    let strides = Tensor::strides_of(&padded);
    Layout::Strided(strides.iter().zip(&padded).map(|(&s, &d)| if d == 1 { 0 } else { s }).collect())
}

/// Index into an operand for every output element, in output order.
fn operand_indices<'a>(layout: &'a Layout, out: &'a [usize]) -> Box<dyn Iterator<Item = usize> + 'a> {
    let n: usize = out.iter().product();
    match layout {
        Layout::Same => Box::new(0..n),
        Layout::Cyclic { period } => {
            let p = *period;
            Box::new((0..n).map(move |i| i % p))
        }
        Layout::Blocked { run } => {
            let r = *run;
            Box::new((0..n).map(move |i| i / r))
        }
        Layout::Strided(strides) => Box::new(StridedIter::new(out, strides)),
    }
}

struct StridedIter<'a> {
    shape: &'a [usize],
    strides: &'a [usize],
    idx: Vec<usize>,
    offset: usize,
    remaining: usize,
}

impl<'a> StridedIter<'a> {
    fn new(shape: &'a [usize], strides: &'a [usize]) -> Self {
        Self { shape, strides, idx: vec![0; shape.len()], offset: 0, remaining: shape.iter().product() }
    }
}

impl Iterator for StridedIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let current = self.offset;
        let mut ax = self.shape.len();
        while ax > 0 {
            ax -= 1;
            self.idx[ax] += 1;
            self.offset += self.strides[ax];
            if self.idx[ax] < self.shape[ax] {
                break;
            }
            self.offset -= self.strides[ax] * self.shape[ax];
            self.idx[ax] = 0;
        }
        Some(current)
    }
}

/// Applies `f` element-wise after broadcasting `a` and `b` together.
pub fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let la = layout(a.shape(), &shape);
    let lb = layout(b.shape(), &shape);
    let (ad, bd) = (a.data(), b.data());
    let data = operand_indices(&la, &shape).zip(operand_indices(&lb, &shape)).map(|(i, j)| f(ad[i], bd[j])).collect();
    Tensor::new(shape, data)
}

/// Sums `grad` (shaped like the broadcast output) back down to `target` shape.
pub fn reduce_to(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let l = layout(target, grad.shape());
    let mut out = vec![0.0; target.iter().product()];
    for (g, j) in grad.data().iter().zip(operand_indices(&l, grad.shape())) {
        out[j] += g;
    }
    Tensor::new(target.to_vec(), out)
}

/// For each output element, pairs of (a index, b index).
pub fn index_pairs(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let shape = broadcast_shape(a, b).expect("incompatible broadcast");
    let la = layout(a, &shape);
    let lb = layout(b, &shape);
    let ia = operand_indices(&la, &shape).collect();
    let ib = operand_indices(&lb, &shape).collect();
    (shape, ia, ib)
}
