//! 2-D convolution over `(n, c, h, w)` tensors via im2col + gemm, with a
//! direct path for depth-wise kernels.

use super::gemm::{gemm, MatRef};
use crate::Tensor;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dSpec {
    /// Output extent along one spatial axis, or `None` when the kernel does not fit.
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn new(x: &Tensor, weight: &Tensor, spec: Conv2dSpec) -> Self {
        let (n, cin, h, w) = x.dims4();
        let (cout, cig, kh, kw) = weight.dims4();
        assert!(
            spec.groups > 0 && cin % spec.groups == 0 && cout % spec.groups == 0,
            "channels ({cin} -> {cout}) not divisible by groups {}",
            spec.groups
        );
        assert_eq!(
            cig,
            cin / spec.groups,
            "weight expects {} input channels per group, input has {}",
            cig,
            cin / spec.groups
        );
        let ho = spec.out_size(h, kh).unwrap_or_else(|| panic!("kernel {kh} does not fit height {h}"));
        let wo = spec.out_size(w, kw).unwrap_or_else(|| panic!("kernel {kw} does not fit width {w}"));
        Self { n, cin, h, w, cout, kh, kw, ho, wo, cig, cog: cout / spec.groups, spec }
    }

    fn depthwise(&self) -> bool {
        self.cig == 1 && self.cog == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cig * self.kh * self.kw
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output coordinates `lo..hi` whose tap `k` lands inside an input axis of
    /// length `extent`, for an output axis of length `out`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p, off) = (self.spec.stride, self.spec.padding, k * self.spec.dilation);
        let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
        let hi = if extent + p > off { ((extent - 1 + p - off) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Input column of output column `ox` at tap `kx`; only valid inside [`Self::valid`].
    #[inline]
    fn col_of(&self, ox: usize, kx: usize) -> usize {
        ox * self.spec.stride + kx * self.spec.dilation - self.spec.padding
    }

    /// Unfolds the channels of group `g` of one image into `col`.
    fn im2col(&self, image: &[f64], g: usize, col: &mut [f64]) {
        let plane = self.h * self.w;
        let hw_out = self.ho * self.wo;
        let stride = self.spec.stride;
        for ci in 0..self.cig {
            let chan = &image[(g * self.cig + ci) * plane..][..plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * hw_out..][..hw_out];
                    let (lo, hi) = self.valid(kx, self.w, self.wo);
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..][..self.wo];
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            line.fill(0.0);
                            continue;
                        };
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let src = &chan[iy * self.w..][..self.w];
                            let x0 = self.col_of(lo, kx);
                            if stride == 1 {
                                line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                            } else {
                                for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                    *v = src[x0 + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `col` back, accumulating into the group-`g` channels of `image`.
    fn col2im(&self, col: &[f64], g: usize, image: &mut [f64]) {
        let plane = self.h * self.w;
        let hw_out = self.ho * self.wo;
        let stride = self.spec.stride;
        for ci in 0..self.cig {
            let chan = &mut image[(g * self.cig + ci) * plane..][..plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * hw_out..][..hw_out];
                    let (lo, hi) = self.valid(kx, self.w, self.wo);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = self.col_of(lo, kx);
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        let dst = &mut chan[iy * self.w..][..self.w];
                        if stride == 1 {
                            for (d, v) in dst[x0..x0 + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in line.iter().enumerate() {
                                dst[x0 + j * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
    let geo = Geometry::new(x, weight, spec);
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[geo.cout], "conv bias shape");
    }
    let in_len = geo.cin * geo.h * geo.w;
    let hw_out = geo.ho * geo.wo;
    let out_len = geo.cout * hw_out;
    let mut out = vec![0.0; geo.n * out_len];
    let wdata = weight.data();
    out.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(i, dst)| {
        let image = &x.data()[i * in_len..][..in_len];
        if geo.depthwise() {
            depthwise_forward(&geo, image, wdata, dst);
        } else {
            let rows = geo.col_rows();
            let mut col = if geo.pointwise() { Vec::new() } else { vec![0.0; rows * hw_out] };
            for g in 0..geo.spec.groups {
                let col_ref: &[f64] = if geo.pointwise() {
                    &image[g * geo.cig * hw_out..][..geo.cig * hw_out]
                } else {
                    geo.im2col(image, g, &mut col);
                    &col
                };
                let w_g = &wdata[g * geo.cog * rows..][..geo.cog * rows];
                gemm(
                    MatRef::new(w_g, geo.cog, rows),
                    MatRef::new(col_ref, rows, hw_out),
                    &mut dst[g * geo.cog * hw_out..][..geo.cog * hw_out],
                    0.0,
                );
            }
        }
        if let Some(b) = bias {
            for (c, chan) in dst.chunks_mut(hw_out.max(1)).enumerate() {
                let bc = b.data()[c];
                chan.iter_mut().for_each(|v| *v += bc);
            }
        }
    });
    Tensor::new(vec![geo.n, geo.cout, geo.ho, geo.wo], out)
}

fn depthwise_forward(geo: &Geometry, image: &[f64], wdata: &[f64], dst: &mut [f64]) {
    let plane = geo.h * geo.w;
    let hw_out = geo.ho * geo.wo;
    let taps = geo.kh * geo.kw;
    let stride = geo.spec.stride;
    for c in 0..geo.cout {
        let chan = &image[c * plane..][..plane];
        let wc = &wdata[c * taps..][..taps];
        let out = &mut dst[c * hw_out..][..hw_out];
        for oy in 0..geo.ho {
            let line = &mut out[oy * geo.wo..][..geo.wo];
            for ky in 0..geo.kh {
                let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                let row = &chan[iy * geo.w..][..geo.w];
                for kx in 0..geo.kw {
                    let wv = wc[ky * geo.kw + kx];
                    let (lo, hi) = geo.valid(kx, geo.w, geo.wo);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = geo.col_of(lo, kx);
                    for (j, o) in line[lo..hi].iter_mut().enumerate() {
                        *o += wv * row[x0 + j * stride];
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
/// `d_input` is only computed when `need_input` is set.
pub fn conv2d_backward(
    grad: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    spec: Conv2dSpec,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let geo = Geometry::new(x, weight, spec);
    assert_eq!(grad.shape(), &[geo.n, geo.cout, geo.ho, geo.wo], "conv grad shape");
    let in_len = geo.cin * geo.h * geo.w;
    let hw_out = geo.ho * geo.wo;
    let out_len = geo.cout * hw_out;
    let rows = geo.col_rows();
    let wdata = weight.data();

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..geo.n)
        .into_par_iter()
        .map(|i| {
            let image = &x.data()[i * in_len..][..in_len];
            let g_img = &grad.data()[i * out_len..][..out_len];
            let mut dw = vec![0.0; weight.numel()];
            let mut dx = if need_input { vec![0.0; in_len] } else { Vec::new() };
            if geo.depthwise() {
                depthwise_backward(&geo, image, wdata, g_img, &mut dw, need_input.then_some(&mut dx[..]));
                return (dx, dw);
            }
            let mut col = if geo.pointwise() { Vec::new() } else { vec![0.0; rows * hw_out] };
            let mut dcol = vec![0.0; if need_input { rows * hw_out } else { 0 }];
            for g in 0..geo.spec.groups {
                let g_out = &g_img[g * geo.cog * hw_out..][..geo.cog * hw_out];
                let col_ref: &[f64] = if geo.pointwise() {
                    &image[g * geo.cig * hw_out..][..geo.cig * hw_out]
                } else {
                    geo.im2col(image, g, &mut col);
                    &col
                };
                gemm(
                    MatRef::new(g_out, geo.cog, hw_out),
                    MatRef::new(col_ref, rows, hw_out).t(),
                    &mut dw[g * geo.cog * rows..][..geo.cog * rows],
                    0.0,
                );
                if need_input {
                    let w_g = &wdata[g * geo.cog * rows..][..geo.cog * rows];
                    if geo.pointwise() {
                        gemm(
                            MatRef::new(w_g, geo.cog, rows).t(),
                            MatRef::new(g_out, geo.cog, hw_out),
                            &mut dx[g * geo.cig * hw_out..][..geo.cig * hw_out],
                            0.0,
                        );
                    } else {
                        gemm(MatRef::new(w_g, geo.cog, rows).t(), MatRef::new(g_out, geo.cog, hw_out), &mut dcol, 0.0);
                        geo.col2im(&dcol, g, &mut dx);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut dw = vec![0.0; weight.numel()];
    let mut dx = if need_input { Vec::with_capacity(geo.n * in_len) } else { Vec::new() };
    for (pdx, pdw) in partials {
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += b;
        }
        if need_input {
            dx.extend_from_slice(&pdx);
        }
    }
    let mut db = vec![0.0; geo.cout];
    for i in 0..geo.n {
        for (c, dbc) in db.iter_mut().enumerate() {
            *dbc += grad.data()[i * out_len + c * hw_out..][..hw_out].iter().sum::<f64>();
        }
    }
    (
        need_input.then(|| Tensor::new(x.shape().to_vec(), dx)),
        Tensor::new(weight.shape().to_vec(), dw),
        Tensor::new(vec![geo.cout], db),
    )
}

fn depthwise_backward(
    geo: &Geometry,
    image: &[f64],
    wdata: &[f64],
    g_img: &[f64],
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let plane = geo.h * geo.w;
    let hw_out = geo.ho * geo.wo;
    let taps = geo.kh * geo.kw;
    let stride = geo.spec.stride;
    for c in 0..geo.cout {
        let chan = &image[c * plane..][..plane];
        let gc = &g_img[c * hw_out..][..hw_out];
        for oy in 0..geo.ho {
            let gline = &gc[oy * geo.wo..][..geo.wo];
            for ky in 0..geo.kh {
                let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                let row = &chan[iy * geo.w..][..geo.w];
                for kx in 0..geo.kw {
                    let t = c * taps + ky * geo.kw + kx;
                    let (lo, hi) = geo.valid(kx, geo.w, geo.wo);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = geo.col_of(lo, kx);
                    let mut acc = 0.0;
                    for (j, gv) in gline[lo..hi].iter().enumerate() {
                        acc += gv * row[x0 + j * stride];
                    }
                    dw[t] += acc;
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = wdata[t];
                        let drow = &mut dx[c * plane + iy * geo.w..][..geo.w];
                        for (j, gv) in gline[lo..hi].iter().enumerate() {
                            drow[x0 + j * stride] += wv * gv;
                        }
                    }
                }
            }
        }
    }
}
