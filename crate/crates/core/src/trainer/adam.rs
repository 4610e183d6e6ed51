use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update. The state advances in place; the parameters come back
/// as a new snapshot.
pub fn adam_step(params: &ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<ModelParams> {
    let tensors = params.tensors();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} parameters, {} gradients, {} moments", tensors.len(), grads.len(), state.m.len()),
        ));
    }
    let names = params.names();
    for ((t, g), name) in tensors.iter().zip(grads).zip(&names) {
        if t.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("{name}: parameter {:?} vs gradient {:?}", t.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let mut out = Vec::with_capacity(tensors.len());
    for (i, (p, g)) in tensors.iter().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let mut next = p.clone();
        for (k, (x, &gk)) in next.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        out.push(next);
    }
    ModelParams::from_tensors(out)
}
