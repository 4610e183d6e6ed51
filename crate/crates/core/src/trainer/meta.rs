use std::collections::BTreeSet;
use std::time::Instant;

use super::adam::{adam_step, AdamState};
use super::config::{Selection, StatsRefresh, TrainConfig};
use super::record::{RoundRecord, RunRecord};
use crate::data::{batch_plan, check_compatible, materialize, DomainDataset, SampleRef};
use crate::dg_stats::{class_stats, differential_pairs, dg_loss, ClassStats, MetricKind};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, train_loss, LabeledBatch};
use crate::model::{embed, init_params, logits, BoundParams, ModelParams};
use crate::tensor::{Graph, Tensor, Var};

// Purpose tags mixed into derived seeds.
const SEED_INIT: u64 = 1;
const SEED_TEST_PLAN: u64 = 2;
const SEED_TRAIN_PLAN: u64 = 3;
const SEED_STATS: u64 = 4;
const SEED_DG_PAIRS: u64 = 5;
const SEED_ERM_PLAN: u64 = 6;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes `parts` into `base`; distinct part lists give unrelated seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// 64-bit FNV-1a.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Loss values of one inner step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoss {
    pub total: f64,
    pub ce: f64,
    pub ct: Option<f64>,
}

fn effective_lambda(config: &TrainConfig) -> f64 {
    if config.train.loss_variant.uses_contrastive() {
        config.train.lambda
    } else {
        0.0
    }
}

fn param_grads(g: &Graph, root: Var, bound: &BoundParams, params: &ModelParams) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(root)?;
    Ok(bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect())
}

/// One Adam step on `L_ce + λ·L_ct` over a training batch.
pub fn inner_train_step(
    batch: &LabeledBatch,
    params: &ModelParams,
    adam: &mut AdamState,
    config: &TrainConfig,
) -> Result<(ModelParams, InnerLoss)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = train_loss(
        &mut g,
        batch,
        &bound,
        effective_lambda(config),
        config.train.tau,
        config.contrastive.literal_eq1,
    )?;
    let values = InnerLoss {
        total: g.value(loss.total).item(),
        ce: g.value(loss.ce).item(),
        ct: loss.ct.map(|v| g.value(v).item()),
    };
    if !values.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {}", values.total)));
    }
    let grads = param_grads(&g, loss.total, &bound, params)?;
    let next = adam_step(params, &grads, adam, config.train.inner_lr)?;
    Ok((next, values))
}

/// γ-scaled gradient of the held-out batch loss, plus the loss values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTestOutput {
    pub grads: Vec<Tensor>,
    pub ce: f64,
    pub dg: Option<f64>,
    /// The alignment term found no same-class pair with statistics.
    pub dg_empty: bool,
}

/// `γ·∇(L_ce + L_dg)` at the given parameters; the alignment term is
/// present only for variants that use it. Parameters are not touched.
pub fn meta_test_step(
    batch: &LabeledBatch,
    stats: Option<&ClassStats>,
    params: &ModelParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<MetaTestOutput> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(batch.inputs.clone());
    let p = embed(&mut g, x, &bound)?;
    let z = logits(&mut g, p, &bound)?;
    let ce = cross_entropy(&mut g, z, &batch.labels)?;
    let (root, dg, dg_empty) = if config.train.loss_variant.uses_dg() {
        let stats = stats.ok_or_else(|| Error::Contract("alignment term needs class statistics".into()))?;
        let d = dg_loss(&mut g, p, &batch.labels, stats, config.dg.max_pairs_per_class, seed)?;
        let root = g.add(ce, d.loss)?;
        (root, Some(g.value(d.loss).item()), d.empty)
    } else {
        (ce, None, false)
    };
    let total = g.value(root).item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite held-out loss {total}")));
    }
    let gamma = config.train.gamma;
    let grads = param_grads(&g, root, &bound, params)?
        .into_iter()
        .map(|t| t.map(|v| gamma * v))
        .collect();
    Ok(MetaTestOutput {
        grads,
        ce: g.value(ce).item(),
        dg,
        dg_empty,
    })
}

/// Per-class differential statistics of the training sources under the
/// current parameters.
pub fn source_stats(
    sources: &[&DomainDataset],
    params: &ModelParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<ClassStats> {
    check_compatible(sources)?;
    let dim = sources[0].dim();
    let mut features = Vec::with_capacity(sources.iter().map(|d| d.features().len()).sum());
    let mut labels = Vec::new();
    for d in sources {
        features.extend_from_slice(d.features());
        labels.extend_from_slice(d.labels());
    }
    let x = Tensor::matrix(labels.len(), dim, features)?;
    let emb = params.embed_values(&x)?;
    let pairs = differential_pairs(
        &emb,
        &labels,
        sources[0].num_classes(),
        config.dg.max_pairs_per_class,
        seed,
    )?;
    let kind = if config.dg.literal_eq7 {
        MetricKind::Covariance
    } else {
        MetricKind::RegularizedInverse
    };
    class_stats(&pairs.per_class, config.dg.epsilon, kind)
}

/// Batches of one held-out-source round. `SampleRef::source` indexes the
/// full source list.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub test_batches: Vec<Vec<SampleRef>>,
    /// Inner batches run before each test batch.
    pub inner: Vec<Vec<Vec<SampleRef>>>,
}

/// Folds a trailing single-sample batch into its predecessor; the
/// contrastive term is undefined on one sample.
fn merge_singleton_tail(plan: &mut Vec<Vec<SampleRef>>) {
    if plan.len() >= 2 && plan.last().is_some_and(|b| b.len() == 1) {
        let tail = plan.pop().unwrap();
        plan.last_mut().unwrap().extend(tail);
    }
}

pub fn round_seed(config: &TrainConfig, epoch: usize, held_out: &str) -> u64 {
    derive_seed(config.train.seed, &[epoch as u64, name_hash(held_out)])
}

/// Test batches come from the held-out source alone; inner batches
/// interleave the remaining sources round-robin. With
/// `train.inner_batches = 0` one pass over the training sources is spread
/// evenly over the test batches, otherwise each test batch takes that many
/// inner batches, cycling through the pass.
pub fn plan_round(sizes: &[usize], held_out: usize, seed: u64, config: &TrainConfig) -> RoundPlan {
    let b = config.train.batch_size;
    let test_batches: Vec<Vec<SampleRef>> = batch_plan(&[sizes[held_out]], b, derive_seed(seed, &[SEED_TEST_PLAN]), false)
        .into_iter()
        .map(|batch| {
            batch
                .into_iter()
                .map(|r| SampleRef {
                    source: held_out,
                    index: r.index,
                })
                .collect()
        })
        .collect();

    let train_ids: Vec<usize> = (0..sizes.len()).filter(|&i| i != held_out).collect();
    let train_sizes: Vec<usize> = train_ids.iter().map(|&i| sizes[i]).collect();
    let mut pass: Vec<Vec<SampleRef>> = batch_plan(&train_sizes, b, derive_seed(seed, &[SEED_TRAIN_PLAN]), true)
        .into_iter()
        .map(|batch| {
            batch
                .into_iter()
                .map(|r| SampleRef {
                    source: train_ids[r.source],
                    index: r.index,
                })
                .collect()
        })
        .collect();
    merge_singleton_tail(&mut pass);

    let t_count = test_batches.len();
    let n = pass.len();
    let inner = (0..t_count)
        .map(|t| match config.train.inner_batches {
            0 => pass[t * n / t_count..(t + 1) * n / t_count].to_vec(),
            _ if n == 0 => Vec::new(),
            k => (0..k).map(|j| pass[(t * k + j) % n].clone()).collect(),
        })
        .collect();
    RoundPlan { test_batches, inner }
}

fn at_step(step: u64) -> impl Fn(Error) -> Error {
    at_site(format!("inner step {step}"))
}

fn at_site(site: String) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{site}: {m}")),
        other => other,
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One held-out-source round: χ starts at zero, each test batch follows
/// its inner steps and adds `γ·∇L_te` at the current θ′ to χ, and the
/// round ends with `θ″ = θ′ − η·χ`.
pub fn meta_round(
    sources: &[DomainDataset],
    held_out: usize,
    params: ModelParams,
    adam: &mut AdamState,
    config: &TrainConfig,
    epoch: usize,
    record: &mut RunRecord,
) -> Result<ModelParams> {
    let started = Instant::now();
    let test_name = sources[held_out].name().to_string();
    let seed = round_seed(config, epoch, &test_name);
    let sizes: Vec<usize> = sources.iter().map(DomainDataset::len).collect();
    let plan = plan_round(&sizes, held_out, seed, config);
    if plan.test_batches.is_empty() {
        return Err(Error::Config(format!("held-out source {test_name:?} is empty")));
    }
    let all: Vec<&DomainDataset> = sources.iter().collect();
    let tags: Vec<usize> = (0..sources.len()).collect();
    let train_sources: Vec<&DomainDataset> = all
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .map(|(_, d)| *d)
        .collect();
    let uses_dg = config.train.loss_variant.uses_dg();

    let mut theta = params;
    let mut chi: Vec<Tensor> = theta.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut stats = None;
    if uses_dg && config.train.stats_refresh == StatsRefresh::PerRound {
        stats = Some(source_stats(&train_sources, &theta, config, derive_seed(seed, &[SEED_STATS]))?);
    }
    let (mut l_tr, mut l_ce, mut l_dg) = (Vec::new(), Vec::new(), Vec::new());
    for (t, (test_refs, inner)) in plan.test_batches.iter().zip(&plan.inner).enumerate() {
        if uses_dg && config.train.stats_refresh == StatsRefresh::PerTestBatch {
            stats = Some(source_stats(
                &train_sources,
                &theta,
                config,
                derive_seed(seed, &[SEED_STATS, t as u64]),
            )?);
        }
        for refs in inner {
            let batch = materialize(&all, &tags, refs)?;
            for &d in &batch.domains {
                if d == held_out {
                    record.held_out_inner_samples += 1;
                }
                record.updates.entry(sources[d].name().to_string()).or_default().inner_samples += 1;
            }
            record.inner_steps += 1;
            let (next, loss) = inner_train_step(&batch, &theta, adam, config).map_err(at_step(record.inner_steps))?;
            theta = next;
            log::debug!(
                "step={} epoch={epoch} held_out={test_name} l_tr={} l_ce={} l_ct={}",
                record.inner_steps,
                loss.total,
                loss.ce,
                loss.ct.map(|v| v.to_string()).unwrap_or_default()
            );
            l_tr.push(loss.total);
        }
        let batch = materialize(&all, &tags, test_refs)?;
        let out = meta_test_step(
            &batch,
            stats.as_ref(),
            &theta,
            config,
            derive_seed(seed, &[SEED_DG_PAIRS, t as u64]),
        )
        .map_err(at_site(format!("held-out batch {t} after inner step {}", record.inner_steps)))?;
        for (acc, g) in chi.iter_mut().zip(&out.grads) {
            acc.add_assign(g);
        }
        record.updates.entry(test_name.clone()).or_default().meta_samples += batch.len() as u64;
        if out.dg_empty {
            record.empty_dg_batches += 1;
        }
        log::debug!(
            "meta epoch={epoch} held_out={test_name} batch={t} l_ce_te={} l_dg_te={}",
            out.ce,
            out.dg.map(|v| v.to_string()).unwrap_or_default()
        );
        l_ce.push(out.ce);
        if let Some(d) = out.dg {
            l_dg.push(d);
        }
    }

    let eta = config.train.meta_lr;
    let updated: Vec<Tensor> = theta
        .tensors()
        .iter()
        .zip(&chi)
        .map(|(p, c)| p.zip(c, |x, g| x - eta * g))
        .collect();
    let theta = ModelParams::from_tensors(updated).map_err(|e| match e {
        Error::Contract(m) => Error::Numeric(format!("meta update after inner step {}: {m}", record.inner_steps)),
        other => other,
    })?;

    record.rounds.push(RoundRecord {
        epoch,
        held_out: test_name,
        mean_l_tr: mean(&l_tr),
        mean_l_ce_te: mean(&l_ce),
        mean_l_dg_te: uses_dg.then(|| mean(&l_dg)),
        inner_steps: l_tr.len(),
        test_batches: plan.test_batches.len(),
        wall_ms: started.elapsed().as_millis() as u64,
    });
    Ok(theta)
}

fn check_sources(sources: &[DomainDataset], config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if sources.len() < 2 {
        return Err(Error::Config(format!("need at least 2 sources, got {}", sources.len())));
    }
    let refs: Vec<&DomainDataset> = sources.iter().collect();
    check_compatible(&refs)?;
    let mut names = BTreeSet::new();
    for d in sources {
        if !names.insert(d.name()) {
            return Err(Error::Dataset(format!("duplicate source name {:?}", d.name())));
        }
    }
    Ok(())
}

/// Initial parameters for a run over sources of this shape.
pub fn initial_params(input_dim: usize, num_classes: usize, config: &TrainConfig) -> Result<ModelParams> {
    let mut layers = vec![input_dim];
    layers.extend_from_slice(&config.model.hidden);
    init_params(
        &layers,
        config.model.embed_dim,
        num_classes,
        derive_seed(config.train.seed, &[SEED_INIT]),
    )
}

/// Full meta-train/meta-test training: every epoch rotates each source
/// through the held-out role once.
pub fn train(sources: &[DomainDataset], config: &TrainConfig) -> Result<(ModelParams, RunRecord)> {
    check_sources(sources, config)?;
    let init = initial_params(sources[0].dim(), sources[0].num_classes(), config)?;
    train_from(sources, config, init)
}

/// [`train`] from given initial parameters.
pub fn train_from(
    sources: &[DomainDataset],
    config: &TrainConfig,
    init: ModelParams,
) -> Result<(ModelParams, RunRecord)> {
    check_sources(sources, config)?;
    if init.input_dim() != sources[0].dim() || init.num_classes() != sources[0].num_classes() {
        return Err(Error::Contract(format!(
            "model maps {} inputs to {} classes but data has dim {} and {} classes",
            init.input_dim(),
            init.num_classes(),
            sources[0].dim(),
            sources[0].num_classes()
        )));
    }
    let mut adam = AdamState::new(&init);
    let mut record = RunRecord::default();
    let mut params = init;
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 1..=config.train.epochs {
        for held_out in 0..sources.len() {
            params = meta_round(sources, held_out, params, &mut adam, config, epoch, &mut record)?;
        }
        log::info!(
            "epoch {epoch}: mean L_tr {:.6}",
            mean(&record.rounds[record.rounds.len() - sources.len()..]
                .iter()
                .map(|r| r.mean_l_tr)
                .collect::<Vec<_>>())
        );
        if config.train.selection == Selection::BestF1 {
            let scores = sources
                .iter()
                .map(|d| crate::eval::evaluate(&params, d, config.metrics.weighted).map(|r| r.headline().f1))
                .collect::<Result<Vec<f64>>>()?;
            let f1 = mean(&scores);
            record.epoch_f1.push(f1);
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, params.clone()));
                record.selected_epoch = epoch;
            }
        }
    }
    if record.empty_dg_batches > 0 {
        record.warnings.push(format!(
            "{} held-out batches had no same-class pair for the alignment term",
            record.empty_dg_batches
        ));
    }
    let params = match best {
        Some((_, p)) => p,
        None => {
            record.selected_epoch = config.train.epochs;
            params
        }
    };
    Ok((params, record))
}

/// The inner batches [`train`] runs, in order, over all epochs and rounds.
pub fn inner_schedule(sources: &[DomainDataset], config: &TrainConfig) -> Vec<Vec<SampleRef>> {
    let sizes: Vec<usize> = sources.iter().map(DomainDataset::len).collect();
    let mut out = Vec::new();
    for epoch in 1..=config.train.epochs {
        for (held_out, d) in sources.iter().enumerate() {
            let plan = plan_round(&sizes, held_out, round_seed(config, epoch, d.name()), config);
            out.extend(plan.inner.into_iter().flatten());
        }
    }
    out
}

/// Pooled-shuffle batches for plain supervised training.
pub fn erm_schedule(sources: &[DomainDataset], config: &TrainConfig) -> Vec<Vec<SampleRef>> {
    let sizes: Vec<usize> = sources.iter().map(DomainDataset::len).collect();
    let mut out = Vec::new();
    for epoch in 1..=config.train.epochs {
        let seed = derive_seed(config.train.seed, &[SEED_ERM_PLAN, epoch as u64]);
        let mut plan = batch_plan(&sizes, config.train.batch_size, seed, false);
        merge_singleton_tail(&mut plan);
        out.extend(plan);
    }
    out
}

/// Plain Adam on `L_ce` over the pooled sources.
pub fn erm_train(sources: &[DomainDataset], config: &TrainConfig) -> Result<ModelParams> {
    config.validate()?;
    let refs: Vec<&DomainDataset> = sources.iter().collect();
    check_compatible(&refs)?;
    let init = initial_params(sources[0].dim(), sources[0].num_classes(), config)?;
    erm_train_schedule(sources, &erm_schedule(sources, config), init, config)
}

/// Plain Adam on `L_ce` over an explicit batch schedule.
pub fn erm_train_schedule(
    sources: &[DomainDataset],
    schedule: &[Vec<SampleRef>],
    init: ModelParams,
    config: &TrainConfig,
) -> Result<ModelParams> {
    let mut ce_only = config.clone();
    ce_only.train.lambda = 0.0;
    let all: Vec<&DomainDataset> = sources.iter().collect();
    let tags: Vec<usize> = (0..sources.len()).collect();
    let mut adam = AdamState::new(&init);
    let mut params = init;
    for (step, refs) in schedule.iter().enumerate() {
        let batch = materialize(&all, &tags, refs)?;
        params = inner_train_step(&batch, &params, &mut adam, &ce_only)
            .map_err(at_step(step as u64 + 1))?
            .0;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::trainer::LossVariant;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.train.epochs = 1;
        c.train.batch_size = 8;
        c.model.hidden = vec![16];
        c.model.embed_dim = 6;
        c.dg.max_pairs_per_class = 16;
        c
    }

    fn sources(n: usize, per_class: usize, seed: u64) -> Vec<DomainDataset> {
        gen_synthetic(&SyntheticSpec {
            num_domains: n,
            num_classes: 3,
            dim: 5,
            per_class,
            delta: 4.0,
            alpha: 0.3,
            sigma: 0.5,
            seed,
        })
        .unwrap()
    }

    fn blobs() -> DomainDataset {
        // Two well-separated classes on a line.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            features.extend([sign * (2.0 + (i as f64) * 0.01), 0.1 * (i as f64).sin()]);
            labels.push(c);
        }
        DomainDataset::new("blobs", vec!["a".into(), "b".into()], 2, features, labels).unwrap()
    }

    #[test]
    fn derived_seeds_differ_by_part() {
        assert_ne!(derive_seed(1, &[2]), derive_seed(1, &[3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(9, &[4]), derive_seed(9, &[4]));
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(name_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn inner_steps_descend_on_separable_blobs() {
        let d = blobs();
        let mut cfg = tiny_config();
        cfg.train.inner_lr = 1e-2;
        let all = [&d];
        let refs: Vec<SampleRef> = (0..d.len()).map(|index| SampleRef { source: 0, index }).collect();
        let batch = materialize(&all, &[0], &refs).unwrap();
        let mut params = initial_params(2, 2, &cfg).unwrap();
        let mut adam = AdamState::new(&params);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (next, loss) = inner_train_step(&batch, &params, &mut adam, &cfg).unwrap();
            params = next;
            losses.push(loss.total);
        }
        assert!(losses[49] < losses[0], "{} !< {}", losses[49], losses[0]);
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn ce_variant_has_no_contrastive_term() {
        let d = blobs();
        let mut cfg = tiny_config();
        cfg.train.loss_variant = LossVariant::Ce;
        let refs: Vec<SampleRef> = (0..8).map(|index| SampleRef { source: 0, index }).collect();
        let batch = materialize(&[&d], &[0], &refs).unwrap();
        let p = initial_params(2, 2, &cfg).unwrap();
        let (_, loss) = inner_train_step(&batch, &p, &mut AdamState::new(&p), &cfg).unwrap();
        assert_eq!(loss.ct, None);
        assert_eq!(loss.total, loss.ce);
    }

    #[test]
    fn meta_test_gradient_matches_finite_differences() {
        let ds = sources(3, 4, 1);
        let mut cfg = tiny_config();
        cfg.train.gamma = 1.0;
        let p = initial_params(5, 3, &cfg).unwrap();
        let train_refs = [&ds[0], &ds[1]];
        let stats = source_stats(&train_refs, &p, &cfg, 3).unwrap();
        let refs: Vec<SampleRef> = (0..12).map(|index| SampleRef { source: 0, index }).collect();
        let batch = materialize(&[&ds[2]], &[2], &refs).unwrap();
        let out = meta_test_step(&batch, Some(&stats), &p, &cfg, 0).unwrap();
        let value = |q: &ModelParams| {
            let o = meta_test_step(&batch, Some(&stats), q, &cfg, 0).unwrap();
            o.ce + o.dg.unwrap()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for ti in 0..p.tensors().len() {
            for k in 0..p.tensors()[ti].len() {
                let bump = |delta: f64| {
                    let mut ts = p.tensors().to_vec();
                    ts[ti].data_mut()[k] += delta;
                    ModelParams::from_tensors(ts).unwrap()
                };
                let fd = (value(&bump(h)) - value(&bump(-h))) / (2.0 * h);
                let an = out.grads[ti].data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn meta_test_gamma_scales_and_is_deterministic() {
        let ds = sources(3, 4, 2);
        let mut cfg = tiny_config();
        let p = initial_params(5, 3, &cfg).unwrap();
        let stats = source_stats(&[&ds[0], &ds[1]], &p, &cfg, 3).unwrap();
        let refs: Vec<SampleRef> = (0..12).map(|index| SampleRef { source: 0, index }).collect();
        let batch = materialize(&[&ds[2]], &[2], &refs).unwrap();
        let a = meta_test_step(&batch, Some(&stats), &p, &cfg, 0).unwrap();
        assert_eq!(a, meta_test_step(&batch, Some(&stats), &p, &cfg, 0).unwrap());
        cfg.train.gamma = 0.0;
        let z = meta_test_step(&batch, Some(&stats), &p, &cfg, 0).unwrap();
        assert!(z.grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(z.ce, a.ce);
        cfg.train.loss_variant = LossVariant::CeDg;
        assert!(matches!(
            meta_test_step(&batch, None, &p, &cfg, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn plan_spreads_one_pass_over_test_batches() {
        let cfg = tiny_config();
        let plan = plan_round(&[20, 30, 17], 1, 5, &cfg);
        assert_eq!(plan.test_batches.len(), 4);
        assert!(plan.test_batches.iter().flatten().all(|r| r.source == 1));
        let inner: Vec<SampleRef> = plan.inner.iter().flatten().flatten().copied().collect();
        assert_eq!(inner.len(), 37);
        assert!(inner.iter().all(|r| r.source != 1));
        assert!(plan.inner.iter().all(|b| !b.is_empty()));
        assert!(plan.inner.iter().flatten().all(|b| b.len() >= 2));

        let mut fixed = cfg.clone();
        fixed.train.inner_batches = 3;
        let plan = plan_round(&[20, 30, 17], 1, 5, &fixed);
        assert!(plan.inner.iter().all(|b| b.len() == 3));
    }

    #[test]
    fn single_epoch_two_sources_has_two_rounds() {
        let ds = sources(2, 5, 3);
        let (p, record) = train(&ds, &tiny_config()).unwrap();
        assert_eq!(record.rounds.len(), 2);
        assert_eq!(record.rounds[0].held_out, "domain0");
        assert_eq!(record.rounds[1].held_out, "domain1");
        assert!(p.tensors().iter().all(Tensor::is_finite));
        assert_eq!(record.held_out_inner_samples, 0);
        assert_eq!(record.selected_epoch, 1);
        let csv = record.to_csv();
        assert!(csv.starts_with("epoch,held_out_source,mean_L_tr,mean_L_ce_te,mean_L_dg_te,wall_ms\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = sources(3, 5, 4);
        let mut cfg = tiny_config();
        cfg.train.epochs = 2;
        let (pa, ra) = train(&ds, &cfg).unwrap();
        let (pb, rb) = train(&ds, &cfg).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ra.loss_trace(), rb.loss_trace());
        assert_eq!(ra.updates, rb.updates);
    }

    #[test]
    fn update_counts_cover_each_source() {
        let ds = sources(3, 5, 6);
        let (_, r) = train(&ds, &tiny_config()).unwrap();
        for d in &ds {
            let u = r.updates[d.name()];
            // Inner training on the two other rounds, χ on its own round.
            assert_eq!(u.inner_samples, 2 * d.len() as u64);
            assert_eq!(u.meta_samples, d.len() as u64);
        }
        assert_eq!(r.held_out_inner_samples, 0);
    }

    #[test]
    fn zero_meta_weights_collapse_to_inner_training() {
        let ds = sources(3, 6, 7);
        let mut cfg = tiny_config();
        cfg.train.epochs = 2;
        cfg.train.gamma = 0.0;
        cfg.train.meta_lr = 0.0;
        cfg.train.lambda = 0.0;
        let (meta, _) = train(&ds, &cfg).unwrap();
        let init = initial_params(5, 3, &cfg).unwrap();
        let erm = erm_train_schedule(&ds, &inner_schedule(&ds, &cfg), init, &cfg).unwrap();
        assert_eq!(meta, erm);
    }

    #[test]
    fn variants_coincide_when_weights_are_zero() {
        let ds = sources(3, 5, 8);
        let mut cfg = tiny_config();
        cfg.train.gamma = 0.0;
        cfg.train.lambda = 0.0;
        let results: Vec<ModelParams> = LossVariant::ALL
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                c.train.loss_variant = v;
                train(&ds, &c).unwrap().0
            })
            .collect();
        for r in &results[1..] {
            assert_eq!(r, &results[0]);
        }
    }

    #[test]
    fn per_test_batch_refresh_runs() {
        let ds = sources(3, 5, 9);
        let mut cfg = tiny_config();
        cfg.train.stats_refresh = StatsRefresh::PerTestBatch;
        let (p, r) = train(&ds, &cfg).unwrap();
        assert!(p.tensors().iter().all(Tensor::is_finite));
        assert!(r.rounds.iter().all(|x| x.mean_l_dg_te.is_some_and(f64::is_finite)));
    }

    #[test]
    fn best_f1_selection_records_scores() {
        let ds = sources(3, 5, 10);
        let mut cfg = tiny_config();
        cfg.train.epochs = 3;
        cfg.train.selection = Selection::BestF1;
        let (_, r) = train(&ds, &cfg).unwrap();
        assert_eq!(r.epoch_f1.len(), 3);
        let best = r.epoch_f1.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(r.epoch_f1[r.selected_epoch - 1], best);
    }

    #[test]
    fn erm_fits_separable_blobs() {
        let d = blobs();
        let mut cfg = tiny_config();
        cfg.train.inner_lr = 1e-2;
        cfg.train.epochs = 40; // 5 batches per epoch: 200 steps
        let ds = vec![d];
        assert_eq!(erm_schedule(&ds, &cfg).len(), 200);
        let p = erm_train(&ds, &cfg).unwrap();
        let acc = crate::eval::evaluate(&p, &ds[0], false).unwrap().accuracy();
        assert!(acc >= 0.95, "accuracy {acc}");
        assert_eq!(p, erm_train(&ds, &cfg).unwrap());
    }

    #[test]
    fn overflow_aborts_with_step_index() {
        // A huge step size sends the weights past 1e300 after one update,
        // so the second forward pass overflows.
        let ds = sources(2, 4, 11);
        let mut cfg = tiny_config();
        cfg.train.inner_lr = 1e305;
        let err = train(&ds, &cfg).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("after inner step 1")), "{err}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = sources(2, 3, 0);
        assert!(matches!(train(&ds[..1], &tiny_config()), Err(Error::Config(_))));
        let dup = vec![ds[0].clone(), ds[0].clone()];
        assert!(matches!(train(&dup, &tiny_config()), Err(Error::Dataset(_))));
    }
}
