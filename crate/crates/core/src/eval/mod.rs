//! Classification metrics, the leave-one-domain-out protocol, and the
//! loss-variant ablation.

mod metrics;

pub use metrics::{ClassMetrics, MetricsReport};

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::trainer::{erm_train, name_hash, train, LossVariant, RunRecord, TrainConfig};

const EVAL_CHUNK: usize = 4096;

/// Arg-max predictions of `params` on every sample of `dataset`.
pub fn evaluate(params: &ModelParams, dataset: &DomainDataset, weighted: bool) -> Result<MetricsReport> {
    if params.input_dim() != dataset.dim() {
        return Err(Error::Contract(format!(
            "model expects input dim {} but dataset {:?} has dim {}",
            params.input_dim(),
            dataset.name(),
            dataset.dim()
        )));
    }
    if params.num_classes() != dataset.num_classes() {
        return Err(Error::Contract(format!(
            "model has {} classes but dataset {:?} has {}",
            params.num_classes(),
            dataset.name(),
            dataset.num_classes()
        )));
    }
    let d = dataset.dim();
    let mut predicted = Vec::with_capacity(dataset.len());
    for chunk in dataset.features().chunks(EVAL_CHUNK * d) {
        let x = Tensor::matrix(chunk.len() / d, d, chunk.to_vec())?;
        predicted.extend(params.predict(&x)?);
    }
    MetricsReport::from_predictions(
        dataset.name(),
        dataset.class_names().to_vec(),
        dataset.labels(),
        &predicted,
        weighted,
    )
}

/// Configuration for the run that holds out `held_out`: the seed is mixed
/// with the domain name so every variant sees the same schedules.
pub fn holdout_config(config: &TrainConfig, held_out: &str) -> TrainConfig {
    let mut c = config.clone();
    c.train.seed = config.train.seed ^ name_hash(held_out);
    c
}

/// Outcome of training without one source and testing on it.
#[derive(Debug, Clone)]
pub struct HoldoutRun {
    pub report: MetricsReport,
    pub record: RunRecord,
    pub params: ModelParams,
}

/// Trains on every source but `held_out` and evaluates on it. With a
/// single remaining source there is nothing to rotate, so that source is
/// fitted with plain supervised training and the record says so.
pub fn run_holdout(sources: &[DomainDataset], held_out: usize, config: &TrainConfig) -> Result<HoldoutRun> {
    let test = sources
        .get(held_out)
        .ok_or_else(|| Error::Config(format!("no source at index {held_out}")))?;
    let cfg = holdout_config(config, test.name());
    let train_sources: Vec<DomainDataset> = sources
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .map(|(_, d)| d.clone())
        .collect();
    let (params, record) = match train_sources.len() {
        0 => return Err(Error::Config("need at least 2 sources for leave-one-out".into())),
        1 => {
            let params = erm_train(&train_sources, &cfg)?;
            let record = RunRecord {
                warnings: vec![format!(
                    "only {:?} remains for training; used plain supervised training",
                    train_sources[0].name()
                )],
                selected_epoch: cfg.train.epochs,
                ..RunRecord::default()
            };
            (params, record)
        }
        _ => train(&train_sources, &cfg)?,
    };
    let report = evaluate(&params, test, cfg.metrics.weighted)?.with_variant(cfg.train.loss_variant.as_str());
    Ok(HoldoutRun { report, record, params })
}

/// One run per source, each evaluated on the source it never saw. Results
/// follow the order of `sources`.
pub fn leave_one_out(sources: &[DomainDataset], config: &TrainConfig) -> Result<Vec<HoldoutRun>> {
    if sources.len() < 2 {
        return Err(Error::Config(format!("need at least 2 sources, got {}", sources.len())));
    }
    (0..sources.len())
        .into_par_iter()
        .map(|i| run_holdout(sources, i, config))
        .collect()
}

/// Held-out reports for every loss variant and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub variants: Vec<LossVariant>,
    pub domains: Vec<String>,
    /// `cells[v][d]` for variant `v` holding out domain `d`.
    pub cells: Vec<Vec<MetricsReport>>,
}

impl Ablation {
    /// Mean headline F1 of a variant across held-out domains.
    pub fn average_f1(&self, variant: LossVariant) -> Option<f64> {
        let v = self.variants.iter().position(|&x| x == variant)?;
        let row = &self.cells[v];
        Some(row.iter().map(|r| r.headline().f1).sum::<f64>() / row.len() as f64)
    }

    /// One row per (variant, domain), then one `average` row per variant.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,domain,precision,recall,f1,n\n");
        for (v, row) in self.variants.iter().zip(&self.cells) {
            for r in row {
                let m = r.headline();
                let _ = writeln!(out, "{v},{},{},{},{},{}", r.domain, m.precision, m.recall, m.f1, r.n);
            }
        }
        for (v, row) in self.variants.iter().zip(&self.cells) {
            let k = row.len() as f64;
            let mean = |f: fn(&ClassMetrics) -> f64| row.iter().map(|r| f(&r.headline())).sum::<f64>() / k;
            let n: u64 = row.iter().map(|r| r.n).sum();
            let _ = writeln!(
                out,
                "{v},average,{},{},{},{n}",
                mean(|m| m.precision),
                mean(|m| m.recall),
                mean(|m| m.f1)
            );
        }
        out
    }
}

/// Leave-one-out for each of the four loss variants with shared seeds.
pub fn ablate(sources: &[DomainDataset], config: &TrainConfig) -> Result<Ablation> {
    ablate_variants(sources, config, &LossVariant::ALL)
}

pub fn ablate_variants(sources: &[DomainDataset], config: &TrainConfig, variants: &[LossVariant]) -> Result<Ablation> {
    if sources.len() < 2 {
        return Err(Error::Config(format!("need at least 2 sources, got {}", sources.len())));
    }
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..sources.len()).map(move |d| (v, d)))
        .collect();
    let reports: Vec<MetricsReport> = jobs
        .par_iter()
        .map(|&(v, d)| {
            let mut cfg = config.clone();
            cfg.train.loss_variant = variants[v];
            run_holdout(sources, d, &cfg).map(|r| r.report)
        })
        .collect::<Result<_>>()?;
    let mut it = reports.into_iter();
    let cells = (0..variants.len())
        .map(|_| it.by_ref().take(sources.len()).collect())
        .collect();
    Ok(Ablation {
        variants: variants.to_vec(),
        domains: sources.iter().map(|d| d.name().to_string()).collect(),
        cells,
    })
}
