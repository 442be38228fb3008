//! Analytic multiply-accumulate count of one forward pass. Informational
//! only: it counts convolutions, linear layers and attention products and
//! ignores norms, activations, resizes and pooling.

use crate::model::ModelConfig;

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

pub fn estimate_macs(cfg: &ModelConfig, height: usize, width: usize) -> u64 {
    let mut macs = 0u64;
    let px = (height * width) as u64;
    if !cfg.pga.bypass {
        let p = &cfg.pga;
        let (mid, cc) = (p.mid_channels as u64, p.concat_channels() as u64);
        macs += 4 * px * mid * p.angle_channels as u64 * 9;
        macs += px * cc * cc;
        macs += px * cc * (cc / p.groups as u64) * 9;
        macs += px * 3 * cc + px * 3 * 9;
    }
    let e = &cfg.encoder;
    let (mut h, mut w) = (height, width);
    let mut in_ch = 3u64;
    let mut spatial = Vec::with_capacity(4);
    for i in 0..4 {
        h = conv_out(h, e.patch_sizes[i], e.patch_strides[i]);
        w = conv_out(w, e.patch_sizes[i], e.patch_strides[i]);
        spatial.push((h * w) as u64);
        let n = (h * w) as u64;
        let c = e.dims[i] as u64;
        let k = e.patch_sizes[i] as u64;
        let sr = e.sr_ratios[i];
        let m = if sr > 1 { ((h / sr) * (w / sr)) as u64 } else { n };
        let embed = n * c * in_ch * k * k;
        let attn = n * c * c
            + m * 2 * c * c
            + n * c * c
            + 2 * n * m * c
            + if sr > 1 { m * c * c * (sr * sr) as u64 } else { 0 };
        let hidden = c * e.mlp_ratio as u64;
        let ffn = 2 * n * c * hidden + n * hidden * 9;
        // Both branches run every block, shared weights or not.
        macs += 2 * (embed + e.depths[i] as u64 * (attn + ffn));
        let d = c / e.heads[i] as u64;
        let frm = 2 * n * 2 * c * c;
        let ffm = 2 * (n * c * 2 * c + n * c * 2 * c + 2 * n * c * d + n * 2 * c * c)
            + 2 * n * 2 * c * c
            + n * c * 9
            + n * c * c;
        macs += frm + ffm;
        in_ch = c;
    }
    let emb = cfg.decoder.embed_dim as u64;
    for i in 0..4 {
        macs += spatial[i] * e.dims[i] as u64 * emb;
    }
    macs += spatial[0] * 4 * emb * emb + spatial[0] * emb * cfg.num_classes as u64;
    macs
}
