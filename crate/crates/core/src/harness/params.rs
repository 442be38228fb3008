//! Structural parameter accounting and the shared-vs-dual comparison of Table 6.

use super::flops::estimate_macs;
use crate::model::{ModelConfig, ShareCmp};
use serde::{Deserialize, Serialize};
use sharecmp_nn::ParamStore;

/// Parameter counts of one model, split by module.
///
/// `inference_total = encoder + pga + decoder`; the CPA head only exists for
/// the auxiliary loss and is reported separately, `total` includes it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCounts {
    pub encoder: usize,
    pub encoder_embed: usize,
    pub encoder_trunk: usize,
    pub encoder_fusion: usize,
    pub pga: usize,
    pub decoder: usize,
    pub cpaahead: usize,
    pub inference_total: usize,
    pub total: usize,
}

impl ModuleCounts {
    pub fn of(store: &ParamStore) -> Self {
        let (mut embed, mut trunk, mut fusion, mut pga, mut decoder, mut cpa, mut other) = (0, 0, 0, 0, 0, 0, 0);
        for (_, p) in store.iter() {
            let parts: Vec<&str> = p.name().split('.').collect();
            let n = p.numel();
            match parts[0] {
                s if s.starts_with("stage") => match parts.get(2) {
                    Some(&"embed") => embed += n,
                    Some(&"frm") | Some(&"ffm") => fusion += n,
                    _ => trunk += n,
                },
                "pga" => pga += n,
                "decoder" => decoder += n,
                "cpaahead" => cpa += n,
                _ => other += n,
            }
        }
        debug_assert_eq!(other, 0, "parameter outside the known modules");
        let encoder = embed + trunk + fusion;
        Self {
            encoder,
            encoder_embed: embed,
            encoder_trunk: trunk,
            encoder_fusion: fusion,
            pga,
            decoder,
            cpaahead: cpa,
            inference_total: encoder + pga + decoder,
            total: encoder + pga + decoder + cpa + other,
        }
    }

    pub fn of_config(cfg: &ModelConfig) -> Self {
        let mut store = ParamStore::shapes_only();
        ShareCmp::new(&mut store, cfg);
        Self::of(&store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub shared: ModuleCounts,
    /// Non-shared dual-branch baseline from [`ModelConfig::dual_baseline`].
    pub dual: ModuleCounts,
    /// `shared.encoder / dual.encoder` (paper: 42.72 / 64.98 = 0.657).
    pub encoder_ratio: f64,
    /// `1 − shared.inference_total / dual.inference_total` (paper: about 26–33 %).
    pub total_reduction: f64,
    /// Analytic multiply-accumulate estimate at `flops_resolution`, in G.
    pub shared_gmacs: f64,
    pub dual_gmacs: f64,
    pub flops_resolution: [usize; 2],
}

/// Structural count of `cfg` and of its dual baseline; no weights are allocated.
pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let dual_cfg = cfg.dual_baseline();
    let shared = ModuleCounts::of_config(cfg);
    let dual = ModuleCounts::of_config(&dual_cfg);
    let res = [512, 512];
    ParamReport {
        encoder_ratio: shared.encoder as f64 / dual.encoder as f64,
        total_reduction: 1.0 - shared.inference_total as f64 / dual.inference_total as f64,
        shared_gmacs: estimate_macs(cfg, res[0], res[1]) as f64 / 1e9,
        dual_gmacs: estimate_macs(&dual_cfg, res[0], res[1]) as f64 / 1e9,
        flops_resolution: res,
        shared,
        dual,
    }
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = |n: usize| n as f64 / 1e6;
        writeln!(f, "{:<22}{:>12}{:>12}", "#Params (M)", "shared", "dual")?;
        let rows = [
            ("encoder", self.shared.encoder, self.dual.encoder),
            ("  patch embeddings", self.shared.encoder_embed, self.dual.encoder_embed),
            ("  trunk", self.shared.encoder_trunk, self.dual.encoder_trunk),
            ("  FRM + FFM", self.shared.encoder_fusion, self.dual.encoder_fusion),
            ("PGA", self.shared.pga, self.dual.pga),
            ("decoder", self.shared.decoder, self.dual.decoder),
            ("total (inference)", self.shared.inference_total, self.dual.inference_total),
            ("CPAAHead (training)", self.shared.cpaahead, self.dual.cpaahead),
        ];
        for (name, s, d) in rows {
            writeln!(f, "{name:<22}{:>12.4}{:>12.4}", m(s), m(d))?;
        }
        writeln!(
            f,
            "{:<22}{:>12.2}{:>12.2}",
            format!("GMACs @{}x{}", self.flops_resolution[0], self.flops_resolution[1]),
            self.shared_gmacs,
            self.dual_gmacs
        )?;
        writeln!(f, "encoder ratio (shared/dual): {:.4}", self.encoder_ratio)?;
        write!(f, "total parameter reduction:   {:.4}", self.total_reduction)
    }
}
