use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{default_class_names, DomainDataset};
use crate::error::{Error, Result};

/// Parameters of the synthetic multi-domain benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Norm of every class mean.
    pub delta: f64,
    /// Strength of each domain's random affine distortion.
    pub alpha: f64,
    /// Within-class noise standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The reference benchmark: 4 domains, 4 classes, dim 16, 200 per class.
    pub fn reference(seed: u64) -> Self {
        SyntheticSpec {
            num_domains: 4,
            num_classes: 4,
            dim: 16,
            per_class: 200,
            delta: 5.0,
            alpha: 0.4,
            sigma: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::Config(format!(
                "need at least 2 domains, got {}",
                self.num_domains
            )));
        }
        if self.num_classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::Config("classes, dim and per-class count must be positive".into()));
        }
        if self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("too many classes: {}", self.num_classes)));
        }
        for (name, v) in [("delta", self.delta), ("alpha", self.alpha), ("sigma", self.sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `num_domains` datasets sharing class means but each seen through
/// its own affine map `x = A_i (m_c + σ ε) + b_i` with
/// `A_i = I + α R_i`, `R_i` standard normal entrywise, and `b_i ~ N(0, α² I)`.
///
/// Features are rounded to `f32` precision so the on-disk form is exact.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let g = gaussian(&mut rng, d);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            g.iter().map(|v| spec.delta * v / norm).collect()
        })
        .collect();

    let class_names = default_class_names(spec.num_classes);
    let mut out = Vec::with_capacity(spec.num_domains);
    for i in 0..spec.num_domains {
        let r = gaussian(&mut rng, d * d);
        let mut a: Vec<f64> = r.iter().map(|v| spec.alpha * v).collect();
        for k in 0..d {
            a[k * d + k] += 1.0;
        }
        let b: Vec<f64> = gaussian(&mut rng, d).iter().map(|v| spec.alpha * v).collect();

        let n = spec.num_classes * spec.per_class;
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..spec.per_class {
                let noise = gaussian(&mut rng, d);
                let latent: Vec<f64> = mean
                    .iter()
                    .zip(&noise)
                    .map(|(m, e)| m + spec.sigma * e)
                    .collect();
                for row in 0..d {
                    let v: f64 = (0..d).map(|k| a[row * d + k] * latent[k]).sum::<f64>() + b[row];
                    features.push(v as f32 as f64);
                }
                labels.push(c);
            }
        }
        out.push(DomainDataset::new(
            format!("domain{i}"),
            class_names.clone(),
            d,
            features,
            labels,
        )?);
    }
    Ok(out)
}
