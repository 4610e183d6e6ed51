use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

/// Summary of one held-out-source round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub epoch: usize,
    pub held_out: String,
    pub mean_l_tr: f64,
    pub mean_l_ce_te: f64,
    /// Absent when the variant has no alignment term.
    pub mean_l_dg_te: Option<f64>,
    pub inner_steps: usize,
    pub test_batches: usize,
    pub wall_ms: u64,
}

/// Samples that fed each kind of parameter update, per source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UpdateCounts {
    pub inner_samples: u64,
    pub meta_samples: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunRecord {
    pub rounds: Vec<RoundRecord>,
    /// Keyed by source name.
    pub updates: BTreeMap<String, UpdateCounts>,
    /// Inner-step samples drawn from the round's own held-out source.
    /// Must stay 0: held-out data reaches the parameters only through χ.
    pub held_out_inner_samples: u64,
    pub inner_steps: u64,
    /// Test batches whose alignment term had no same-class pair.
    pub empty_dg_batches: u64,
    pub warnings: Vec<String>,
    /// Epoch whose parameters were returned (1-based).
    pub selected_epoch: usize,
    /// Mean source macro-F1 per epoch, when selecting by F1.
    pub epoch_f1: Vec<f64>,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "epoch,held_out_source,mean_L_tr,mean_L_ce_te,mean_L_dg_te,wall_ms";

    /// One line per round. Loss values use shortest round-trip formatting;
    /// a missing alignment term is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rounds {
            let dg = r.mean_l_dg_te.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.held_out, r.mean_l_tr, r.mean_l_ce_te, dg, r.wall_ms
            );
        }
        out
    }

    /// Total samples from `source` that drove any update.
    pub fn samples_used(&self, source: &str) -> u64 {
        self.updates
            .get(source)
            .map(|u| u.inner_samples + u.meta_samples)
            .unwrap_or(0)
    }

    /// Loss columns only, for comparing runs without timing noise.
    pub fn loss_trace(&self) -> Vec<(f64, f64, Option<f64>)> {
        self.rounds
            .iter()
            .map(|r| (r.mean_l_tr, r.mean_l_ce_te, r.mean_l_dg_te))
            .collect()
    }
}
