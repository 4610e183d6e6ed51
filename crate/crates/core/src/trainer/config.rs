//! Training configuration and its flat `section.key = value` text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which loss terms are active. The four values are the ablation columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+ct")]
    CeCt,
    #[serde(rename = "ce+dg")]
    CeDg,
    #[serde(rename = "ce+ct+dg")]
    CeCtDg,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Ce,
        LossVariant::CeCt,
        LossVariant::CeDg,
        LossVariant::CeCtDg,
    ];

    pub fn uses_contrastive(self) -> bool {
        matches!(self, LossVariant::CeCt | LossVariant::CeCtDg)
    }

    pub fn uses_dg(self) -> bool {
        matches!(self, LossVariant::CeDg | LossVariant::CeCtDg)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::CeCt => "ce+ct",
            LossVariant::CeDg => "ce+dg",
            LossVariant::CeCtDg => "ce+ct+dg",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant {s:?}")))
    }
}

/// When the per-class differential statistics are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsRefresh {
    PerRound,
    PerTestBatch,
}

/// Which parameters `train` returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Parameters after the last epoch.
    Final,
    /// Epoch with the best mean macro-F1 over the rotating meta-test sources.
    BestF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub stats_refresh: StatsRefresh,
    /// Inner batches per meta-test batch; 0 spreads one pass over the
    /// training sources across the meta-test batches of a round.
    pub inner_batches: usize,
    pub selection: Selection,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 32,
            inner_lr: 1e-4,
            meta_lr: 1e-3,
            gamma: 0.7,
            lambda: 1.0,
            tau: 0.05,
            seed: 0,
            loss_variant: LossVariant::CeCtDg,
            stats_refresh: StatsRefresh::PerRound,
            inner_batches: 0,
            selection: Selection::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![256, 128],
            embed_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgSection {
    pub epsilon: f64,
    pub max_pairs_per_class: usize,
    /// Use the covariance itself instead of its regularized inverse.
    pub literal_eq7: bool,
}

impl Default for DgSection {
    fn default() -> Self {
        DgSection {
            epsilon: 1e-3,
            max_pairs_per_class: 256,
            literal_eq7: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSection {
    /// Denominator repeats the positive similarity once per negative.
    pub literal_eq1: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub weighted: bool,
}

/// Every hyperparameter and protocol knob of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub model: ModelSection,
    pub dg: DgSection,
    pub contrastive: ContrastiveSection,
    pub metrics: MetricsSection,
}

impl TrainConfig {
    /// Parses the dotted-key text form. Missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders one `section.key = value` line per field, sorted by key.
    pub fn to_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Overrides one dotted key. `raw` is a TOML value; bare words are
    /// taken as strings.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let mut slot = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        }
        let updated: TrainConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |msg: String| Err(Error::Config(msg));
        if t.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if t.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", t.batch_size));
        }
        if !(t.inner_lr > 0.0 && t.inner_lr.is_finite()) {
            return bad(format!("train.inner_lr must be positive, got {}", t.inner_lr));
        }
        if !(t.meta_lr >= 0.0 && t.meta_lr.is_finite()) {
            return bad(format!("train.meta_lr must be non-negative, got {}", t.meta_lr));
        }
        if !(0.0..=1.0).contains(&t.gamma) {
            return bad(format!("train.gamma must lie in [0, 1], got {}", t.gamma));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return bad(format!("train.lambda must be non-negative, got {}", t.lambda));
        }
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            return bad(format!("train.tau must be positive, got {}", t.tau));
        }
        if self.model.embed_dim == 0 || self.model.hidden.contains(&0) {
            return bad("model dimensions must be positive".into());
        }
        if !(self.dg.epsilon >= 0.0 && self.dg.epsilon.is_finite()) {
            return bad(format!("dg.epsilon must be non-negative, got {}", self.dg.epsilon));
        }
        if self.dg.max_pairs_per_class == 0 {
            return bad("dg.max_pairs_per_class must be at least 1".into());
        }
        Ok(())
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
