//! Per-class statistics of differential features and the Mahalanobis
//! alignment loss.
//!
//! A differential feature is the difference `p_i − p_j` of two same-class
//! embeddings. On the training sources each class gets a mean `μ_c` and a
//! covariance `Ξ_c` of those differences; on a meta-test batch, the loss is
//! the class-averaged mean Mahalanobis distance of its own differential
//! features to those distributions.

mod linalg;

pub use linalg::{cholesky, spd_inverse};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Quadratic forms down to this negative value are treated as rounding noise.
pub const QUAD_FORM_TOLERANCE: f64 = 1e-9;

/// Unordered same-class index pairs `(i, j)`, `i < j`, grouped by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub per_class: Vec<Vec<(usize, usize)>>,
    /// Classes with fewer than two samples.
    pub skipped: Vec<usize>,
}

impl PairSet {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }
}

/// Enumerates same-class pairs, keeping at most `max_pairs_per_class` per
/// class by seeded uniform sampling without replacement. Kept pairs stay in
/// enumeration order.
pub fn pair_indices(
    labels: &[usize],
    num_classes: usize,
    max_pairs_per_class: usize,
    seed: u64,
) -> Result<PairSet> {
    if max_pairs_per_class == 0 {
        return Err(Error::Config("max_pairs_per_class must be at least 1".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = Vec::with_capacity(num_classes);
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < 2 {
            skipped.push(c);
            per_class.push(Vec::new());
            continue;
        }
        let k = members.len();
        let total = k * (k - 1) / 2;
        let pair_at = |mut idx: usize| {
            // Row-major position in the strict upper triangle.
            let mut a = 0;
            while idx >= k - 1 - a {
                idx -= k - 1 - a;
                a += 1;
            }
            (members[a], members[a + 1 + idx])
        };
        let pairs = if total <= max_pairs_per_class {
            (0..total).map(pair_at).collect()
        } else {
            let mut chosen = index::sample(&mut rng, total, max_pairs_per_class).into_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(pair_at).collect()
        };
        per_class.push(pairs);
    }
    Ok(PairSet { per_class, skipped })
}

/// Differential vectors `z = p_i − p_j` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialPairs {
    pub per_class: Vec<Vec<Vec<f64>>>,
    pub skipped: Vec<usize>,
}

pub fn differential_pairs(
    embeddings: &Tensor,
    labels: &[usize],
    num_classes: usize,
    max_pairs_per_class: usize,
    seed: u64,
) -> Result<DifferentialPairs> {
    if embeddings.rank() != 2 || embeddings.rows() != labels.len() {
        return Err(Error::dim(
            "differential_pairs",
            format!("embeddings {:?} with {} labels", embeddings.shape(), labels.len()),
        ));
    }
    let pairs = pair_indices(labels, num_classes, max_pairs_per_class, seed)?;
    let per_class = pairs
        .per_class
        .iter()
        .map(|ps| {
            ps.iter()
                .map(|&(i, j)| {
                    embeddings
                        .row(i)
                        .iter()
                        .zip(embeddings.row(j))
                        .map(|(a, b)| a - b)
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(DifferentialPairs {
        per_class,
        skipped: pairs.skipped,
    })
}

/// How the quadratic form in the distance is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricKind {
    /// `(Ξ_c + εI)⁻¹`: the Mahalanobis distance.
    #[default]
    RegularizedInverse,
    /// `Ξ_c` itself, un-inverted.
    Covariance,
}

/// Statistics of one class's differential features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStat {
    pub mean: Vec<f64>,
    /// Row-major `dim×dim`, normalized by the pair count.
    pub covariance: Vec<f64>,
    /// Matrix used in the distance, row-major `dim×dim`.
    pub metric: Vec<f64>,
    pub count: usize,
}

/// Per-class statistics; `None` for classes without any differential vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub dim: usize,
    pub epsilon: f64,
    pub kind: MetricKind,
    pub classes: Vec<Option<ClassStat>>,
}

impl ClassStats {
    pub fn get(&self, class: usize) -> Option<&ClassStat> {
        self.classes.get(class).and_then(Option::as_ref)
    }
}

/// Mean and population covariance of each class's vectors, plus the
/// metric matrix selected by `kind`. Classes are processed in parallel and
/// merged in class order.
pub fn class_stats(z_lists: &[Vec<Vec<f64>>], epsilon: f64, kind: MetricKind) -> Result<ClassStats> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let dim = z_lists
        .iter()
        .flatten()
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Dataset("no differential vectors in any class".into()))?;
    if z_lists.iter().flatten().any(|z| z.len() != dim) {
        return Err(Error::dim("class_stats", "differential vectors differ in length"));
    }
    if z_lists.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite differential feature".into()));
    }
    let classes = z_lists
        .par_iter()
        .map(|zs| {
            if zs.is_empty() {
                return Ok(None);
            }
            let n = zs.len() as f64;
            let mut mean = vec![0.0; dim];
            for z in zs {
                for (m, v) in mean.iter_mut().zip(z) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut cov = vec![0.0; dim * dim];
            for z in zs {
                let d: Vec<f64> = z.iter().zip(&mean).map(|(a, b)| a - b).collect();
                for i in 0..dim {
                    for j in i..dim {
                        cov[i * dim + j] += d[i] * d[j];
                    }
                }
            }
            for i in 0..dim {
                for j in i..dim {
                    let v = cov[i * dim + j] / n;
                    cov[i * dim + j] = v;
                    cov[j * dim + i] = v;
                }
            }
            let metric = match kind {
                MetricKind::RegularizedInverse => {
                    let mut reg = cov.clone();
                    for i in 0..dim {
                        reg[i * dim + i] += epsilon;
                    }
                    spd_inverse(&reg, dim)?
                }
                MetricKind::Covariance => cov.clone(),
            };
            Ok(Some(ClassStat {
                mean,
                covariance: cov,
                metric,
                count: zs.len(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassStats {
        dim,
        epsilon,
        kind,
        classes,
    })
}

/// `sqrt((z − μ)ᵀ M (z − μ))`.
pub fn mahalanobis(z: &[f64], mean: &[f64], metric: &[f64]) -> Result<f64> {
    let n = z.len();
    if mean.len() != n || metric.len() != n * n {
        return Err(Error::dim(
            "mahalanobis",
            format!("z {n}, mean {}, metric {}", mean.len(), metric.len()),
        ));
    }
    let d: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += d[i] * metric[i * n + j] * d[j];
        }
    }
    clamp_quadratic_form(q).map(f64::sqrt)
}

fn clamp_quadratic_form(q: f64) -> Result<f64> {
    if q < -QUAD_FORM_TOLERANCE || q.is_nan() {
        return Err(Error::Numeric(format!(
            "negative quadratic form {q:e}: metric is not positive semidefinite"
        )));
    }
    Ok(q.max(0.0))
}

/// Alignment loss on one batch, built in `g`.
#[derive(Debug, Clone, Copy)]
pub struct DgLoss {
    pub loss: Var,
    /// Classes that contributed to the outer average.
    pub classes_used: usize,
    /// Set when no class had both a pair and statistics; the loss is then 0.
    pub empty: bool,
}

/// Mean over classes of the mean Mahalanobis distance of the batch's
/// same-class differential features to that class's training
/// distribution. Classes missing from the batch or from `stats` are left
/// out of the average.
pub fn dg_loss(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    stats: &ClassStats,
    max_pairs_per_class: usize,
    seed: u64,
) -> Result<DgLoss> {
    let dim = match g.shape(embeddings) {
        [r, d] if *r == labels.len() => *d,
        s => {
            return Err(Error::dim(
                "dg_loss",
                format!("embeddings {s:?} with {} labels", labels.len()),
            ))
        }
    };
    if dim != stats.dim {
        return Err(Error::dim(
            "dg_loss",
            format!("embedding dim {dim} but statistics dim {}", stats.dim),
        ));
    }
    let pairs = pair_indices(labels, stats.classes.len(), max_pairs_per_class, seed)?;
    let mut terms = Vec::new();
    for (c, ps) in pairs.per_class.iter().enumerate() {
        let Some(stat) = stats.get(c) else { continue };
        if ps.is_empty() {
            continue;
        }
        let (left, right): (Vec<usize>, Vec<usize>) = ps.iter().copied().unzip();
        let zi = g.select_rows(embeddings, left)?;
        let zj = g.select_rows(embeddings, right)?;
        let z = g.sub(zi, zj)?;
        let neg_mean = g.constant(Tensor::vector(stat.mean.iter().map(|v| -v).collect()));
        let centered = g.add_row(z, neg_mean)?;
        let metric = g.constant(Tensor::from_parts(vec![dim, dim], stat.metric.clone()));
        let projected = g.matmul(centered, metric)?;
        let prod = g.mul(centered, projected)?;
        let quad = g.sum(prod, Some(1))?;
        for &q in g.value(quad).data() {
            clamp_quadratic_form(q)?;
        }
        let quad = g.relu(quad)?;
        let dist = g.sqrt(quad)?;
        terms.push(g.mean(dist, None)?);
    }
    if terms.is_empty() {
        return Ok(DgLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            classes_used: 0,
            empty: true,
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, 1.0 / terms.len() as f64)?;
    Ok(DgLoss {
        loss,
        classes_used: terms.len(),
        empty: false,
    })
}
