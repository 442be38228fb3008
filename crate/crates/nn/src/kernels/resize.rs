//! Bilinear resampling of `(n, c, h, w)` tensors with half-pixel centres
//! (the `align_corners = false` convention).

use crate::Tensor;
use rayon::prelude::*;

/// Source taps `(i0, i1, frac)` for each output coordinate along one axis.
pub fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    out.par_chunks_mut((out_h * out_w).max(1)).zip(x.data().par_chunks((h * w).max(1))).for_each(|(dst, src)| {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn resize_backward(grad: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, out_h, out_w) = grad.dims4();
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let mut dx = vec![0.0; n * c * in_h * in_w];
    dx.par_chunks_mut((in_h * in_w).max(1)).zip(grad.data().par_chunks((out_h * out_w).max(1))).for_each(|(dst, g)| {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[oy * out_w + ox];
                dst[y0 * in_w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += gv * fy * fx;
            }
        }
    });
    Tensor::new(vec![n, c, in_h, in_w], dx)
}
