//! Frozen-backbone features and the incremental class protocol.
//!
//! The backbone itself is never run here. A dataset is a bag of precomputed
//! embeddings (optionally paired with the pre-FFN "msa" activations used by
//! parallel adapters), either read from a `.mote` file or generated from a
//! Gaussian-cluster model.

mod format;
mod manifest;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseVector, SeededRng};

pub use format::{
    decode_embeddings, encode_embeddings, read_embeddings, read_embeddings_with, write_embeddings,
    ReadOptions, FORMAT_VERSION, MAGIC,
};
pub use manifest::{concat_protocols, load_manifest, ProtocolManifest};
pub use synthetic::{class_means, generate_synthetic, SyntheticSpec};

pub type ClassId = u32;
pub type TaskId = u32;

/// Fraction of each class held out for testing when no split flag exists.
pub const TEST_FRACTION_DENOM: usize = 5;

const STREAM_CLASS_ORDER: u64 = 0x0c1a_55e5;
const STREAM_SPLIT: u64 = 0x5b11_7000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: ClassId,
    pub features: DenseVector,
    pub msa_features: Option<DenseVector>,
    pub split: Option<Split>,
}

impl Sample {
    pub fn new(label: ClassId, features: DenseVector) -> Self {
        Self {
            label,
            features,
            msa_features: None,
            split: None,
        }
    }

    /// The pre-FFN input, defaulting to the features themselves.
    pub fn msa_or_features(&self) -> &DenseVector {
        self.msa_features.as_ref().unwrap_or(&self.features)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    name: String,
    dim: usize,
    samples: Vec<Sample>,
    class_ids: BTreeSet<ClassId>,
}

impl EmbeddingDataset {
    pub fn new(name: impl Into<String>, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dataset dimension must be positive".into()));
        }
        let has_msa = samples.first().is_some_and(|s| s.msa_features.is_some());
        for s in &samples {
            if s.features.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.features.dim(),
                });
            }
            match &s.msa_features {
                Some(m) if m.dim() != dim => {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: m.dim(),
                    })
                }
                Some(_) if !has_msa => {
                    return Err(Error::Invalid(
                        "msa features must be present on all samples or none".into(),
                    ))
                }
                None if has_msa => {
                    return Err(Error::Invalid(
                        "msa features must be present on all samples or none".into(),
                    ))
                }
                _ => {}
            }
        }
        let class_ids = samples.iter().map(|s| s.label).collect();
        Ok(Self {
            name: name.into(),
            dim,
            samples,
            class_ids,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_ids(&self) -> &BTreeSet<ClassId> {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_msa(&self) -> bool {
        self.samples.first().is_some_and(|s| s.msa_features.is_some())
    }

    pub(crate) fn into_parts(self) -> (String, usize, Vec<Sample>) {
        (self.name, self.dim, self.samples)
    }
}

/// One contiguous run of tasks taken from a single source dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBlock {
    pub name: String,
    pub classes: usize,
}

/// A B-m/Inc-n class split over a fixed class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub base_classes: usize,
    pub increment: usize,
    pub class_order: Vec<ClassId>,
    pub seed: u64,
    /// Source datasets in stage order, when several are chained.
    pub stage_manifests: Option<Vec<DatasetBlock>>,
}

impl Protocol {
    pub fn new(
        base_classes: usize,
        increment: usize,
        class_order: Vec<ClassId>,
        seed: u64,
    ) -> Result<Self> {
        let protocol = Self {
            base_classes,
            increment,
            class_order,
            seed,
            stage_manifests: None,
        };
        protocol.validate()?;
        Ok(protocol)
    }

    /// Protocol over every class of `dataset`, in an order shuffled by `seed`.
    pub fn shuffled(
        dataset: &EmbeddingDataset,
        base_classes: usize,
        increment: usize,
        seed: u64,
    ) -> Result<Self> {
        let order = shuffled_order(dataset.class_ids().iter().copied().collect(), seed, 0);
        Self::new(base_classes, increment, order, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_order.len();
        let distinct: BTreeSet<_> = self.class_order.iter().collect();
        if distinct.len() != n {
            return Err(Error::Invalid("class order repeats a class".into()));
        }
        if n == 0 {
            return Err(Error::Invalid("protocol has no classes".into()));
        }
        let uneven = Error::UnevenSplit {
            classes: n,
            base: self.base_classes,
            increment: self.increment,
        };
        if self.increment == 0 {
            if self.base_classes != n {
                return Err(uneven);
            }
            return Ok(());
        }
        if self.base_classes > n || !(n - self.base_classes).is_multiple_of(self.increment) {
            return Err(uneven);
        }
        if let Some(blocks) = &self.stage_manifests {
            let total: usize = blocks.iter().map(|b| b.classes).sum();
            if total != n {
                return Err(Error::Invalid(format!(
                    "dataset blocks cover {total} classes, protocol has {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.task_class_sets().len()
    }

    /// Class ids of each task, in protocol order.
    pub fn task_class_sets(&self) -> Vec<Vec<ClassId>> {
        let mut tasks = Vec::new();
        let mut rest: &[ClassId] = &self.class_order;
        if self.base_classes > 0 {
            let (head, tail) = rest.split_at(self.base_classes);
            tasks.push(head.to_vec());
            rest = tail;
        }
        if self.increment > 0 {
            for chunk in rest.chunks(self.increment) {
                tasks.push(chunk.to_vec());
            }
        }
        tasks
    }

    /// Number of tasks contributed by each chained dataset.
    pub fn tasks_per_block(&self) -> Option<Vec<usize>> {
        let blocks = self.stage_manifests.as_ref()?;
        let sets = self.task_class_sets();
        let mut out = Vec::with_capacity(blocks.len());
        let mut task = 0;
        for block in blocks {
            let mut covered = 0;
            let mut count = 0;
            while covered < block.classes && task < sets.len() {
                covered += sets[task].len();
                task += 1;
                count += 1;
            }
            out.push(count);
        }
        Some(out)
    }
}

pub(crate) fn shuffled_order(mut classes: Vec<ClassId>, seed: u64, block: u64) -> Vec<ClassId> {
    classes.sort_unstable();
    let mut rng = SeededRng::with_stream(seed, STREAM_CLASS_ORDER + block);
    rng.shuffle(&mut classes);
    classes
}

/// A sample as consumed by training and inference: the pre-FFN input is
/// always materialized, and `id` is its index in the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub id: usize,
    pub label: ClassId,
    pub features: DenseVector,
    pub msa_features: DenseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub task_id: TaskId,
    pub classes: Vec<ClassId>,
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

/// Cut `dataset` into the protocol's tasks, each with its own train/test
/// partition.
///
/// Classes whose samples all carry a split flag use it; other classes get a
/// seeded 80/20 split that depends only on the protocol seed and class id.
pub fn make_splits(dataset: &EmbeddingDataset, protocol: &Protocol) -> Result<Vec<TaskSplit>> {
    protocol.validate()?;
    for c in &protocol.class_order {
        if !dataset.class_ids().contains(c) {
            return Err(Error::Invalid(format!(
                "protocol class {c} not present in dataset {}",
                dataset.name()
            )));
        }
    }

    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }

    let mut is_test = vec![false; dataset.len()];
    for (&class, indices) in &by_class {
        let flagged = indices
            .iter()
            .all(|&i| dataset.samples()[i].split.is_some());
        if flagged {
            for &i in indices {
                is_test[i] = dataset.samples()[i].split == Some(Split::Test);
            }
        } else {
            let mut shuffled = indices.clone();
            let mut rng = SeededRng::with_stream(protocol.seed, STREAM_SPLIT + class as u64);
            rng.shuffle(&mut shuffled);
            let n_test = shuffled.len() / TEST_FRACTION_DENOM;
            for &i in &shuffled[..n_test] {
                is_test[i] = true;
            }
        }
    }

    let to_task_sample = |i: usize| {
        let s = &dataset.samples()[i];
        TaskSample {
            id: i,
            label: s.label,
            features: s.features.clone(),
            msa_features: s.msa_or_features().clone(),
        }
    };

    let mut tasks = Vec::new();
    for (t, classes) in protocol.task_class_sets().into_iter().enumerate() {
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut members: Vec<usize> = classes
            .iter()
            .flat_map(|c| by_class[c].iter().copied())
            .collect();
        members.sort_unstable();
        for i in members {
            if is_test[i] {
                test.push(to_task_sample(i));
            } else {
                train.push(to_task_sample(i));
            }
        }
        tasks.push(TaskSplit {
            task_id: t as TaskId,
            classes,
            train,
            test,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_dataset(classes: u32, per_class: usize) -> EmbeddingDataset {
        let spec = SyntheticSpec {
            n_classes: classes as usize,
            dim: 4,
            samples_per_class: per_class,
            cluster_radius: 5.0,
            noise_sigma: 1.0,
            task_drift: 0.0,
            seed: 1,
        };
        generate_synthetic(&spec).unwrap()
    }

    fn order(n: u32) -> Vec<ClassId> {
        (0..n).collect()
    }

    #[test]
    fn b0_inc10_over_100_classes() {
        let p = Protocol::new(0, 10, order(100), 1993).unwrap();
        let sets = p.task_class_sets();
        assert_eq!(sets.len(), 10);
        assert!(sets.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn b50_inc10_over_100_classes() {
        let p = Protocol::new(50, 10, order(100), 1993).unwrap();
        let sizes: Vec<usize> = p.task_class_sets().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![50, 10, 10, 10, 10, 10]);
    }

    #[test]
    fn b100_inc20_over_200_classes() {
        let p = Protocol::new(100, 20, order(200), 1993).unwrap();
        let sizes: Vec<usize> = p.task_class_sets().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![100, 20, 20, 20, 20, 20]);
    }

    #[test]
    fn remainder_is_rejected() {
        assert!(matches!(
            Protocol::new(0, 30, order(100), 0),
            Err(Error::UnevenSplit { .. })
        ));
        assert!(matches!(
            Protocol::new(10, 0, order(100), 0),
            Err(Error::UnevenSplit { .. })
        ));
        assert!(Protocol::new(100, 0, order(100), 0).is_ok());
        assert!(Protocol::new(0, 5, vec![1, 1, 2, 3, 4], 0).is_err());
    }

    #[test]
    fn splits_use_file_flags_when_present() {
        let mut samples = Vec::new();
        for (i, split) in [Split::Train, Split::Test, Split::Train].into_iter().enumerate() {
            let mut s = Sample::new(0, DenseVector::new(vec![i as f64 + 1.0, 0.0]).unwrap());
            s.split = Some(split);
            samples.push(s);
        }
        let ds = EmbeddingDataset::new("flags", 2, samples).unwrap();
        let p = Protocol::new(1, 0, vec![0], 0).unwrap();
        let tasks = make_splits(&ds, &p).unwrap();
        let train: Vec<usize> = tasks[0].train.iter().map(|s| s.id).collect();
        let test: Vec<usize> = tasks[0].test.iter().map(|s| s.id).collect();
        assert_eq!(train, vec![0, 2]);
        assert_eq!(test, vec![1]);
        // no msa in the file: the pre-FFN input defaults to the features
        assert_eq!(tasks[0].train[0].msa_features, tasks[0].train[0].features);
    }

    #[test]
    fn synthetic_split_is_80_20() {
        let ds = toy_dataset(4, 50);
        let p = Protocol::shuffled(&ds, 0, 2, 7).unwrap();
        let tasks = make_splits(&ds, &p).unwrap();
        for t in &tasks {
            assert_eq!(t.train.len(), 80);
            assert_eq!(t.test.len(), 20);
        }
    }

    #[test]
    fn unknown_protocol_class_rejected() {
        let ds = toy_dataset(4, 5);
        let p = Protocol::new(0, 1, vec![0, 1, 2, 9], 0).unwrap();
        assert!(make_splits(&ds, &p).is_err());
    }

    #[test]
    fn mixed_msa_rejected() {
        let f = DenseVector::new(vec![1.0, 2.0]).unwrap();
        let mut a = Sample::new(0, f.clone());
        a.msa_features = Some(f.clone());
        let b = Sample::new(1, f);
        assert!(EmbeddingDataset::new("mixed", 2, vec![a, b]).is_err());
    }

    proptest! {
        #[test]
        fn tasks_partition_classes_without_leakage(seed in any::<u64>(), inc in prop::sample::select(vec![1usize, 2, 3, 6])) {
            let ds = toy_dataset(6, 10);
            let p = Protocol::shuffled(&ds, 0, inc, seed).unwrap();
            let tasks = make_splits(&ds, &p).unwrap();

            let mut seen = BTreeSet::new();
            for t in &tasks {
                for c in &t.classes {
                    prop_assert!(seen.insert(*c));
                }
            }
            prop_assert_eq!(&seen, ds.class_ids());

            let train_ids: BTreeSet<usize> = tasks.iter().flat_map(|t| t.train.iter().map(|s| s.id)).collect();
            let test_ids: BTreeSet<usize> = tasks.iter().flat_map(|t| t.test.iter().map(|s| s.id)).collect();
            prop_assert!(train_ids.is_disjoint(&test_ids));
            prop_assert_eq!(train_ids.len() + test_ids.len(), ds.len());
        }
    }
}
