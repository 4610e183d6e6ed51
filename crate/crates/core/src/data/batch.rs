use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::LabeledBatch;
use crate::tensor::Tensor;

/// Position of one sample: which source, which row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub source: usize,
    pub index: usize,
}

/// One epoch of batches over sources of the given sizes.
///
/// Without interleaving, all samples are pooled and shuffled. With
/// interleaving, each source is shuffled on its own and the sources are
/// then taken round-robin, so consecutive samples alternate domains. The
/// final short batch is kept.
pub fn batch_plan(sizes: &[usize], batch_size: usize, seed: u64, interleave: bool) -> Vec<Vec<SampleRef>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<SampleRef> = if interleave {
        let mut queues: Vec<Vec<SampleRef>> = sizes
            .iter()
            .enumerate()
            .map(|(source, &n)| {
                let mut q: Vec<SampleRef> = (0..n).map(|index| SampleRef { source, index }).collect();
                q.shuffle(&mut rng);
                q
            })
            .collect();
        queues.iter_mut().for_each(|q| q.reverse());
        let mut merged = Vec::with_capacity(sizes.iter().sum());
        while queues.iter().any(|q| !q.is_empty()) {
            for q in queues.iter_mut() {
                if let Some(s) = q.pop() {
                    merged.push(s);
                }
            }
        }
        merged
    } else {
        let mut all: Vec<SampleRef> = sizes
            .iter()
            .enumerate()
            .flat_map(|(source, &n)| (0..n).map(move |index| SampleRef { source, index }))
            .collect();
        all.shuffle(&mut rng);
        all
    };
    order.chunks(batch_size).map(<[SampleRef]>::to_vec).collect()
}

/// Gathers the referenced samples into a batch. `tags[s]` is the domain
/// tag written for samples of `sources[s]`.
pub fn materialize(sources: &[&DomainDataset], tags: &[usize], refs: &[SampleRef]) -> Result<LabeledBatch> {
    let dim = sources
        .first()
        .map(|d| d.dim())
        .ok_or_else(|| Error::Dataset("no sources".into()))?;
    if refs.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let mut inputs = Vec::with_capacity(refs.len() * dim);
    let mut labels = Vec::with_capacity(refs.len());
    let mut domains = Vec::with_capacity(refs.len());
    for r in refs {
        let (x, y) = sources[r.source].sample(r.index);
        if x.len() != dim {
            return Err(Error::Dataset("sources differ in feature dim".into()));
        }
        inputs.extend_from_slice(x);
        labels.push(y);
        domains.push(tags[r.source]);
    }
    LabeledBatch::new(Tensor::matrix(refs.len(), dim, inputs)?, labels, domains)
}

/// One epoch of materialized batches; domain tags are source positions.
pub fn batch_iterator<'a>(
    sources: &'a [&'a DomainDataset],
    batch_size: usize,
    seed: u64,
    interleave: bool,
) -> impl Iterator<Item = LabeledBatch> + 'a {
    let sizes: Vec<usize> = sources.iter().map(|d| d.len()).collect();
    let tags: Vec<usize> = (0..sources.len()).collect();
    batch_plan(&sizes, batch_size, seed, interleave)
        .into_iter()
        .map(move |refs| materialize(sources, &tags, &refs).expect("plan indexes its own sources"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn dataset(n: usize, name: &str) -> DomainDataset {
        DomainDataset::new(
            name,
            vec!["a".into(), "b".into()],
            1,
            (0..n).map(|i| i as f64).collect(),
            (0..n).map(|i| i % 2).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ten_samples_batch_four() {
        let sizes: Vec<usize> = batch_plan(&[10], 4, 0, false).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_plan() {
        assert_eq!(batch_plan(&[9, 5], 3, 8, true), batch_plan(&[9, 5], 3, 8, true));
        assert_eq!(batch_plan(&[9, 5], 3, 8, false), batch_plan(&[9, 5], 3, 8, false));
        assert_ne!(batch_plan(&[20], 4, 8, false), batch_plan(&[20], 4, 9, false));
    }

    #[test]
    fn interleaved_batches_mix_domains() {
        let (a, b) = (dataset(8, "a"), dataset(8, "b"));
        let sources = [&a, &b];
        let batches: Vec<_> = batch_iterator(&sources, 4, 3, true).collect();
        assert_eq!(batches.len(), 4);
        for batch in &batches {
            let tags: BTreeSet<usize> = batch.domains.iter().copied().collect();
            assert_eq!(tags, BTreeSet::from([0, 1]));
        }
    }

    #[test]
    fn epoch_covers_every_sample_once() {
        for interleave in [false, true] {
            let plan = batch_plan(&[7, 3, 11], 4, 1, interleave);
            let all: Vec<SampleRef> = plan.into_iter().flatten().collect();
            let set: BTreeSet<SampleRef> = all.iter().copied().collect();
            assert_eq!(all.len(), 21);
            assert_eq!(set.len(), 21);
        }
    }

    #[test]
    fn tags_follow_sources() {
        let (a, b) = (dataset(3, "a"), dataset(4, "b"));
        let refs = batch_plan(&[3, 4], 7, 0, false).remove(0);
        let batch = materialize(&[&a, &b], &[10, 20], &refs).unwrap();
        for (r, tag) in refs.iter().zip(&batch.domains) {
            assert_eq!(*tag, if r.source == 0 { 10 } else { 20 });
        }
    }
}
