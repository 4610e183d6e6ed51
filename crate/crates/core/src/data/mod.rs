//! Multi-domain data: in-memory datasets, the synthetic domain generator,
//! VOC crop ingestion, batching, and the on-disk dataset format.

mod batch;
mod format;
mod ingest;
mod synthetic;

pub use batch::{batch_iterator, batch_plan, materialize, SampleRef};
pub use format::{read_dataset, write_dataset, SAMPLES_MAGIC, SAMPLES_VERSION};
pub use ingest::{ingest_crops, table_row, IngestOptions, IngestReport};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default class names: longitudinal, transverse and alligator cracks, and
/// the merged rutting/bump/pothole class.
pub const DEFECT_CLASSES: [&str; 4] = ["D00", "D10", "D20", "D40"];

/// Labeled feature vectors from one source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    name: String,
    class_names: Vec<String>,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if labels.is_empty() {
            return Err(Error::Dataset(format!("dataset {name:?} is empty")));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Dataset(format!(
                "dataset {name:?}: {} features for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::Dataset(format!("dataset {name:?} has no classes")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Dataset(format!(
                "dataset {name:?}: class id {bad} with {} classes",
                class_names.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("dataset {name:?} has non-finite features")));
        }
        Ok(DomainDataset {
            name,
            class_names,
            dim,
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    /// All samples as a `len × dim` matrix.
    pub fn inputs(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.features.clone()).expect("validated shape")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Checks that datasets agree on feature width and class set.
pub fn check_compatible(datasets: &[&DomainDataset]) -> Result<()> {
    let Some(first) = datasets.first() else {
        return Err(Error::Dataset("no datasets given".into()));
    };
    for d in &datasets[1..] {
        if d.dim != first.dim {
            return Err(Error::Dataset(format!(
                "dataset {:?} has dim {} but {:?} has dim {}",
                d.name, d.dim, first.name, first.dim
            )));
        }
        if d.class_names != first.class_names {
            return Err(Error::Dataset(format!(
                "dataset {:?} classes {:?} differ from {:?}",
                d.name, d.class_names, first.class_names
            )));
        }
    }
    Ok(())
}

/// Class names used when none are given: the defect classes for four
/// classes, otherwise `class0`, `class1`, ...
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    if num_classes == DEFECT_CLASSES.len() {
        DEFECT_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|c| format!("class{c}")).collect()
    }
}
