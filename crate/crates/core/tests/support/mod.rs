//! Finite-difference and brute-force oracles shared by the integration
//! tests and the acceptance run.
#![allow(dead_code)]

use dgcore::dg_stats::{class_stats, dg_loss, ClassStats, MetricKind};
use dgcore::losses::{contrastive_batch_loss, cross_entropy, train_loss, LabeledBatch};
use dgcore::model::{embed, init_params, logits, BoundParams, ModelParams};
use dgcore::tensor::{Graph, Tensor, Var};
use dgcore::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Below this magnitude the relative error is measured against the floor.
const REL_FLOOR: f64 = 1e-3;

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn eval<F>(params: &ModelParams, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let root = f(&mut g, &bound)?;
    Ok(g.value(root).item())
}

/// Largest relative error between the analytic gradient of `f` and a
/// central difference, over every parameter entry.
pub fn fd_max_rel_error<F>(params: &ModelParams, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let root = f(&mut g, &bound)?;
    let grads = g.backward(root)?;
    let mut worst: f64 = 0.0;
    for (k, t) in params.tensors().iter().enumerate() {
        let zero = Tensor::zeros(t.shape());
        let analytic = grads.get(bound.vars()[k]).unwrap_or(&zero);
        for i in 0..t.len() {
            let shifted = |delta: f64| {
                let mut ts = params.tensors().to_vec();
                ts[k].data_mut()[i] += delta;
                ModelParams::from_tensors(ts)
            };
            let up = eval(&shifted(FD_STEP)?, &f)?;
            let down = eval(&shifted(-FD_STEP)?, &f)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// The gradient-check fixture: a two-layer extractor on 8-dim inputs, a
/// batch of six with two samples per class, and alignment statistics from
/// an unrelated draw.
pub struct GradFixture {
    pub params: ModelParams,
    pub batch: LabeledBatch,
    pub stats: ClassStats,
    pub tau: f64,
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&[8, 8], 4, 3, seed).unwrap();
    // Small random biases keep every ReLU away from its kink.
    let tensors = params
        .tensors()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.rank() == 1 {
                for v in t.data_mut() {
                    *v = 0.1 * rng.random_range(-1.0..1.0);
                }
            }
            t
        })
        .collect();
    let params = ModelParams::from_tensors(tensors).unwrap();
    let inputs = Tensor::matrix(6, 8, normal(&mut rng, 48)).unwrap();
    let batch = LabeledBatch::new(inputs, vec![0, 0, 1, 1, 2, 2], vec![0; 6]).unwrap();
    let z_lists: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| (0..10).map(|_| normal(&mut rng, 4)).collect())
        .collect();
    let stats = class_stats(&z_lists, 1e-3, MetricKind::RegularizedInverse).unwrap();
    GradFixture {
        params,
        batch,
        stats,
        tau: 0.05,
    }
}

/// `(name, max relative error)` for cross-entropy, contrastive, alignment
/// and the combined training loss.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let fx = grad_fixture(seed);
    let (batch, stats, tau) = (&fx.batch, &fx.stats, fx.tau);
    let features = |g: &mut Graph, b: &BoundParams| {
        let x = g.constant(batch.inputs.clone());
        embed(g, x, b)
    };
    let ce = fd_max_rel_error(&fx.params, |g, b| {
        let p = features(g, b)?;
        let z = logits(g, p, b)?;
        cross_entropy(g, z, &batch.labels)
    })?;
    let ct = fd_max_rel_error(&fx.params, |g, b| {
        let p = features(g, b)?;
        contrastive_batch_loss(g, p, &batch.labels, tau, false)
    })?;
    let dg = fd_max_rel_error(&fx.params, |g, b| {
        let p = features(g, b)?;
        Ok(dg_loss(g, p, &batch.labels, stats, 256, 0)?.loss)
    })?;
    let tr = fd_max_rel_error(&fx.params, |g, b| {
        Ok(train_loss(g, batch, b, 1.0, tau, false)?.total)
    })?;
    Ok(vec![("L_ce", ce), ("L_ct", ct), ("L_dg", dg), ("L_tr", tr)])
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Contrastive loss evaluated pair by pair with plain exponentials.
pub fn contrastive_oracle(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let s = |a: usize, b: usize| (cosine(&emb[a], &emb[b]) / tau).exp();
    let (mut total, mut count) = (0.0, 0usize);
    for a in 0..emb.len() {
        for b in 0..emb.len() {
            if a == b || labels[a] != labels[b] {
                continue;
            }
            let negatives: f64 = (0..emb.len()).filter(|&l| labels[l] != labels[a]).map(|l| s(a, l)).sum();
            total -= (s(a, b) / (s(a, b) + negatives)).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Alignment loss from every unordered same-class pair, one explicit
/// quadratic form at a time.
pub fn dg_oracle(emb: &[Vec<f64>], labels: &[usize], stats: &ClassStats) -> f64 {
    let dim = stats.dim;
    let mut class_means = Vec::new();
    for (c, stat) in stats.classes.iter().enumerate() {
        let Some(stat) = stat else { continue };
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mut dists = Vec::new();
        for x in 0..members.len() {
            for y in x + 1..members.len() {
                let d: Vec<f64> = (0..dim)
                    .map(|k| emb[members[x]][k] - emb[members[y]][k] - stat.mean[k])
                    .collect();
                let mut q = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        q += d[i] * stat.metric[i * dim + j] * d[j];
                    }
                }
                dists.push(q.max(0.0).sqrt());
            }
        }
        if !dists.is_empty() {
            class_means.push(dists.iter().sum::<f64>() / dists.len() as f64);
        }
    }
    if class_means.is_empty() {
        0.0
    } else {
        class_means.iter().sum::<f64>() / class_means.len() as f64
    }
}

/// Population covariance through `E[zzᵀ] − μμᵀ`, a different route from
/// the centered two-pass sum under test.
pub fn covariance_oracle(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let second = rows.iter().map(|r| r[i] * r[j]).sum::<f64>() / n;
            cov[i * d + j] = second - mean[i] * mean[j];
        }
    }
    (mean, cov)
}

/// Worst deviations over `trials` random batches of size 2..=8:
/// `(contrastive, alignment)`.
pub fn loss_oracle_errors(trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ct_err, mut dg_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let dim = rng.random_range(2..=5);
        let classes = 3;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let emb: Vec<Vec<f64>> = (0..n).map(|_| normal(&mut rng, dim)).collect();
        let tau = rng.random_range(0.05..1.0);
        let z_lists: Vec<Vec<Vec<f64>>> = (0..classes)
            .map(|_| (0..12).map(|_| normal(&mut rng, dim)).collect())
            .collect();
        let stats = class_stats(&z_lists, 1e-3, MetricKind::RegularizedInverse)?;

        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&emb)?);
        let ct = contrastive_batch_loss(&mut g, e, &labels, tau, false)?;
        ct_err = ct_err.max((g.value(ct).item() - contrastive_oracle(&emb, &labels, tau)).abs());
        let dg = dg_loss(&mut g, e, &labels, &stats, 256, 0)?;
        dg_err = dg_err.max((g.value(dg.loss).item() - dg_oracle(&emb, &labels, &stats)).abs());
    }
    Ok((ct_err, dg_err))
}

/// Worst covariance deviation over `trials` random sets of at most 32
/// vectors of at most 16 entries.
pub fn covariance_oracle_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| normal(&mut rng, d)).collect();
        let stats = class_stats(std::slice::from_ref(&rows), 1e-3, MetricKind::RegularizedInverse)?;
        let stat = stats.get(0).expect("one class");
        let (mean, cov) = covariance_oracle(&rows);
        for (a, b) in stat.mean.iter().zip(&mean).chain(stat.covariance.iter().zip(&cov)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}
