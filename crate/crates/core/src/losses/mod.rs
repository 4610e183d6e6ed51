//! Cross-entropy, temperature-scaled cosine contrastive loss, and the
//! combined training objective `L_ce + λ·L_ct`.

use crate::error::{Error, Result};
use crate::model::{embed, logits, BoundParams};
use crate::tensor::{Graph, Tensor, Var};

/// Embeddings with a norm below this are rejected by cosine similarity.
pub const MIN_EMBED_NORM: f64 = 1e-12;

/// A batch of labeled samples with their source-domain tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, domains: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() || labels.len() != domains.len() {
            return Err(Error::Contract(format!(
                "batch inputs {:?}, {} labels, {} domain tags",
                inputs.shape(),
                labels.len(),
                domains.len()
            )));
        }
        Ok(LabeledBatch {
            inputs,
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = match g.shape(logits) {
        [r, c] => (*r, *c),
        s => return Err(Error::dim("cross_entropy", format!("logits shape {s:?}"))),
    };
    if rows != labels.len() {
        return Err(Error::Contract(format!(
            "cross_entropy: {rows} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let log_probs = g.log_softmax_rows(logits)?;
    let picked = g.gather(
        log_probs,
        labels.iter().enumerate().map(|(r, &l)| r * classes + l).collect(),
    )?;
    let mean = g.mean(picked, None)?;
    g.neg(mean)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `pᵀq / (‖p‖‖q‖)`.
pub fn cosine_similarity(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(
            "cosine_similarity",
            format!("lengths {} and {}", p.len(), q.len()),
        ));
    }
    let (np, nq) = (norm(p), norm(q));
    for n in [np, nq] {
        if !(n >= MIN_EMBED_NORM) {
            return Err(Error::DegenerateEmbedding {
                norm: n,
                min: MIN_EMBED_NORM,
            });
        }
    }
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    Ok((dot / (np * nq)).clamp(-1.0, 1.0))
}

/// `log S(p, q) = cos(p, q) / τ`, the form every loss works with.
pub fn log_pair_similarity(p: &[f64], q: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(cosine_similarity(p, q)? / tau)
}

/// `S(p, q) = exp(cos(p, q) / τ)`.
pub fn pair_similarity(p: &[f64], q: &[f64], tau: f64) -> Result<f64> {
    Ok(log_pair_similarity(p, q, tau)?.exp())
}

/// Contrastive loss over every ordered same-class pair `(a, b)`, `a ≠ b`:
///
/// `-log[ S(a,b) / (S(a,b) + Σ_{l: class(l) ≠ class(a)} S(a,l)) ]`
///
/// averaged over pairs and evaluated as log-sum-exp of `cos/τ`. Returns 0
/// when the batch has no positive pair.
///
/// With `literal_denominator` the denominator is `Σ_l I(a,l)·S(a,b)`,
/// i.e. the positive similarity repeated once per negative; the loss then
/// reduces to `log(#negatives)` and carries no gradient. Pairs without
/// negatives contribute 0 in that mode.
pub fn contrastive_batch_loss(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    tau: f64,
    literal_denominator: bool,
) -> Result<Var> {
    let n = match g.shape(embeddings) {
        [r, _] => *r,
        s => return Err(Error::dim("contrastive_batch_loss", format!("shape {s:?}"))),
    };
    if n < 2 {
        return Err(Error::Contract(format!(
            "contrastive loss needs a batch of at least 2, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} embeddings but {} labels", labels.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }

    let mut positives = Vec::new();
    let mut groups = Vec::new();
    let mut literal_terms = Vec::new();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n)
            .filter(|&l| labels[l] != labels[a])
            .map(|l| a * n + l)
            .collect();
        for b in (0..n).filter(|&b| b != a && labels[b] == labels[a]) {
            positives.push(a * n + b);
            let mut group = Vec::with_capacity(negatives.len() + 1);
            group.push(a * n + b);
            group.extend_from_slice(&negatives);
            groups.push(group);
            literal_terms.push(if negatives.is_empty() {
                0.0
            } else {
                (negatives.len() as f64).ln()
            });
        }
    }
    if positives.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let unit = g.normalize_rows(embeddings, MIN_EMBED_NORM)?;
    if literal_denominator {
        // Value only: the positive similarity cancels between numerator and denominator.
        let mean = literal_terms.iter().sum::<f64>() / literal_terms.len() as f64;
        return Ok(g.constant(Tensor::scalar(mean)));
    }
    let unit_t = g.transpose(unit)?;
    let cos = g.matmul(unit, unit_t)?;
    let scaled = g.scale(cos, 1.0 / tau)?;
    let lse = g.logsumexp_groups(scaled, groups)?;
    let pos = g.gather(scaled, positives)?;
    let per_pair = g.sub(lse, pos)?;
    g.mean(per_pair, None)
}

/// Loss terms built for one batch.
#[derive(Debug, Clone, Copy)]
pub struct TrainLoss {
    pub total: Var,
    pub ce: Var,
    /// Absent when λ is 0.
    pub ct: Option<Var>,
}

/// `L_tr = L_ce + λ·L_ct` on the batch embeddings.
///
/// With `λ = 0` the contrastive term is not built at all, so the result is
/// exactly the cross-entropy.
pub fn train_loss(
    g: &mut Graph,
    batch: &LabeledBatch,
    params: &BoundParams,
    lambda: f64,
    tau: f64,
    literal_denominator: bool,
) -> Result<TrainLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("λ must be non-negative, got {lambda}")));
    }
    let x = g.constant(batch.inputs.clone());
    let p = embed(g, x, params)?;
    let z = logits(g, p, params)?;
    let ce = cross_entropy(g, z, &batch.labels)?;
    if lambda == 0.0 {
        return Ok(TrainLoss {
            total: ce,
            ce,
            ct: None,
        });
    }
    let ct = contrastive_batch_loss(g, p, &batch.labels, tau, literal_denominator)?;
    let weighted = g.scale(ct, lambda)?;
    let total = g.add(ce, weighted)?;
    Ok(TrainLoss {
        total,
        ce,
        ct: Some(ct),
    })
}
