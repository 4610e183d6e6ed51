//! Dense feature extractor plus a fully connected logit head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Model weights: feature-extractor layers followed by the logit head.
///
/// Tensors are stored flat as `[w0, b0, w1, b1, ..., head_w, head_b]`, with
/// each weight laid out `in × out`. The last extractor layer has no
/// activation so embeddings can take either sign.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Validates the layer chain and wraps the tensors.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() < 4 || !tensors.len().is_multiple_of(2) {
            return Err(Error::dim(
                "model",
                format!("expected an even count of at least 4 tensors, got {}", tensors.len()),
            ));
        }
        let mut prev_out = None;
        for (i, pair) in tensors.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let [fan_in, fan_out] = w.shape() else {
                return Err(Error::dim("model", format!("layer {i} weight is not a matrix")));
            };
            if b.shape() != [*fan_out] {
                return Err(Error::dim(
                    "model",
                    format!("layer {i} bias {:?} does not match weight {:?}", b.shape(), w.shape()),
                ));
            }
            if let Some(p) = prev_out {
                if p != *fan_in {
                    return Err(Error::dim(
                        "model",
                        format!("layer {i} expects {fan_in} inputs but previous layer emits {p}"),
                    ));
                }
            }
            prev_out = Some(*fan_out);
        }
        if let Some(bad) = tensors.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("parameter tensor {bad} is not finite")));
        }
        Ok(ModelParams { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Names aligned with [`ModelParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let layers = self.num_extractor_layers();
        (0..self.tensors.len())
            .map(|i| {
                let kind = if i % 2 == 0 { "weight" } else { "bias" };
                if i / 2 < layers {
                    format!("layer{}.{kind}", i / 2)
                } else {
                    format!("head.{kind}")
                }
            })
            .collect()
    }

    pub fn num_extractor_layers(&self) -> usize {
        self.tensors.len() / 2 - 1
    }

    pub fn input_dim(&self) -> usize {
        self.tensors[0].shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.head_weight().shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.head_weight().shape()[1]
    }

    fn head_weight(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 2]
    }

    /// Registers every tensor in `g`, as trainable parameters or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Embeddings of the rows of `x`, without gradient tracking.
    pub fn embed_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let p = embed(&mut g, xv, &bound)?;
        Ok(g.value(p).clone())
    }

    /// Logits for the rows of `x`, without gradient tracking.
    pub fn logit_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let p = embed(&mut g, xv, &bound)?;
        let l = logits(&mut g, p, &bound)?;
        Ok(g.value(l).clone())
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.logit_values(x)?;
        Ok((0..l.rows()).map(|r| argmax(l.row(r))).collect())
    }
}

/// Graph handles for the tensors of a [`ModelParams`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn num_extractor_layers(&self) -> usize {
        self.vars.len() / 2 - 1
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights from a seeded generator, zero biases.
///
/// `layer_sizes` is `[input_dim, hidden...]`; one more layer maps the last
/// entry to `embed_dim`, then the head maps `embed_dim` to `num_classes`.
pub fn init_params(
    layer_sizes: &[usize],
    embed_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    if layer_sizes.is_empty() {
        return Err(Error::Config("layer_sizes must not be empty".into()));
    }
    if layer_sizes.contains(&0) || embed_dim == 0 || num_classes == 0 {
        return Err(Error::Config(format!(
            "dimensions must be positive: layers {layer_sizes:?}, embed {embed_dim}, classes {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = layer_sizes.to_vec();
    dims.push(embed_dim);
    dims.push(num_classes);
    let mut tensors = Vec::with_capacity(2 * (dims.len() - 1));
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        tensors.push(Tensor::from_parts(vec![fan_in, fan_out], w));
        tensors.push(Tensor::zeros(&[fan_out]));
    }
    ModelParams::from_tensors(tensors)
}

/// Feature extractor: affine+ReLU layers, final layer affine only.
pub fn embed(g: &mut Graph, x: Var, params: &BoundParams) -> Result<Var> {
    let layers = params.num_extractor_layers();
    let mut h = x;
    for i in 0..layers {
        let (w, b) = params.layer(i);
        let expected = g.shape(w)[0];
        match g.shape(h) {
            [_, d] if *d == expected => {}
            s => {
                return Err(Error::dim(
                    "embed",
                    format!("input shape {s:?} does not match layer {i} input dim {expected}"),
                ))
            }
        }
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        h = if i + 1 < layers { g.relu(z)? } else { z };
    }
    Ok(h)
}

/// Logit head `p · W + b`.
pub fn logits(g: &mut Graph, p: Var, params: &BoundParams) -> Result<Var> {
    let (w, b) = params.layer(params.num_extractor_layers());
    let z = g.matmul(p, w)?;
    g.add_row(z, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(d: usize, classes: usize) -> ModelParams {
        ModelParams::from_tensors(vec![
            Tensor::identity(d),
            Tensor::zeros(&[d]),
            Tensor::zeros(&[d, classes]),
            Tensor::zeros(&[classes]),
        ])
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let a = init_params(&[8, 16], 16, 4, 3).unwrap();
        let b = init_params(&[8, 16], 16, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&[8, 16], 16, 4, 4).unwrap());
        assert_eq!(a.tensors().last().unwrap().shape(), &[4]);
        assert_eq!(a.tensors()[a.tensors().len() - 2].shape(), &[16, 4]);
        assert_eq!(a.input_dim(), 8);
        assert_eq!(a.embed_dim(), 16);
        assert_eq!(a.num_classes(), 4);
        for (name, t) in a.names().iter().zip(a.tensors()) {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert_eq!(
            a.names(),
            ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias", "head.weight", "head.bias"]
        );
    }

    #[test]
    fn init_weights_respect_glorot_bound() {
        let p = init_params(&[10, 30], 20, 3, 0).unwrap();
        let limit = (6.0f64 / 40.0).sqrt();
        assert!(p.tensors()[0].data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_params(&[], 4, 2, 0), Err(Error::Config(_))));
        assert!(matches!(init_params(&[4, 0], 4, 2, 0), Err(Error::Config(_))));
        assert!(matches!(init_params(&[4], 0, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_model_gives_zero_embedding_and_uniform_softmax() {
        let p = ModelParams::from_tensors(vec![
            Tensor::zeros(&[3, 4]),
            Tensor::zeros(&[4]),
            Tensor::zeros(&[4, 5]),
            Tensor::zeros(&[5]),
        ])
        .unwrap();
        let x = Tensor::zeros(&[2, 3]);
        assert!(p.embed_values(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let l = p.logit_values(&Tensor::full(&[2, 3], 0.7)).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_reproduces_input() {
        let p = identity_model(3, 2);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, -1.0]]).unwrap();
        assert_eq!(p.embed_values(&x).unwrap(), x);
    }

    #[test]
    fn duplicated_rows_embed_identically() {
        let p = init_params(&[4, 6], 5, 3, 1).unwrap();
        let row = vec![0.3, -0.1, 0.8, 0.2];
        let x = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let e = p.embed_values(&x).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn logits_hand_case() {
        let p = ModelParams::from_tensors(vec![
            Tensor::identity(2),
            Tensor::zeros(&[2]),
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            Tensor::vector(vec![0.5, -0.5]),
        ])
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let l = p.logit_values(&x).unwrap();
        assert_eq!(l.data(), &[4.5, 5.5, 2.5, 3.5]);
    }

    #[test]
    fn embed_rejects_wrong_input_width() {
        let p = init_params(&[4], 3, 2, 0).unwrap();
        let err = p.embed_values(&Tensor::zeros(&[2, 5])).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "embed", .. }));
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn from_tensors_rejects_broken_chain() {
        let err = ModelParams::from_tensors(vec![
            Tensor::zeros(&[3, 4]),
            Tensor::zeros(&[4]),
            Tensor::zeros(&[5, 2]),
            Tensor::zeros(&[2]),
        ]);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
