//! Protocol manifests and cross-dataset chaining.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_embeddings, shuffled_order, DatasetBlock, EmbeddingDataset, Protocol, Sample};
use crate::error::{Error, Result};

/// JSON description of a run's data: `{name, base, increment, seed, datasets}`.
/// Relative dataset paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolManifest {
    pub name: String,
    pub base: usize,
    pub increment: usize,
    pub seed: u64,
    pub datasets: Vec<PathBuf>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ProtocolManifest> {
    let path = path.as_ref();
    let mut manifest: ProtocolManifest = serde_json::from_slice(&crate::io::read_file(path)?)?;
    if manifest.datasets.is_empty() {
        return Err(Error::Invalid("manifest lists no datasets".into()));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    for p in &mut manifest.datasets {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    Ok(manifest)
}

impl ProtocolManifest {
    pub fn load_datasets(&self) -> Result<Vec<EmbeddingDataset>> {
        self.datasets.iter().map(read_embeddings).collect()
    }

    /// Load every dataset and chain them under `seed`.
    pub fn build(&self, seed: u64) -> Result<(EmbeddingDataset, Protocol)> {
        let datasets = self.load_datasets()?;
        let (mut ds, protocol) = concat_protocols(&datasets, self.base, self.increment, seed)?;
        if datasets.len() > 1 {
            let (_, dim, samples) = ds.into_parts();
            ds = EmbeddingDataset::new(self.name.clone(), dim, samples)?;
        }
        Ok((ds, protocol))
    }
}

/// Chain datasets into one class-incremental stream: every task of the first
/// dataset, then every task of the second, and so on. Class ids of later
/// datasets are offset past the largest id of the earlier ones.
///
/// `base` applies to the first dataset only; each dataset's classes must
/// divide evenly into tasks so that no task straddles two datasets.
pub fn concat_protocols(
    datasets: &[EmbeddingDataset],
    base: usize,
    increment: usize,
    seed: u64,
) -> Result<(EmbeddingDataset, Protocol)> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Invalid("no datasets to chain".into()))?;
    if datasets.len() == 1 {
        let protocol = Protocol::shuffled(first, base, increment, seed)?;
        return Ok((first.clone(), protocol));
    }

    let dim = first.dim();
    let any_msa = datasets.iter().any(EmbeddingDataset::has_msa);
    let mut samples = Vec::new();
    let mut order = Vec::new();
    let mut blocks = Vec::new();
    let mut offset: u32 = 0;
    for (k, ds) in datasets.iter().enumerate() {
        if ds.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: ds.dim(),
            });
        }
        let classes = ds.class_ids().len();
        let block_base = if k == 0 { base } else { 0 };
        let rest = classes.checked_sub(block_base).ok_or(Error::UnevenSplit {
            classes,
            base: block_base,
            increment,
        })?;
        if increment == 0 || rest % increment != 0 {
            return Err(Error::UnevenSplit {
                classes,
                base: block_base,
                increment,
            });
        }

        let local: Vec<u32> = ds.class_ids().iter().map(|c| c + offset).collect();
        order.extend(shuffled_order(local, seed, k as u64));
        for s in ds.samples() {
            let mut s: Sample = s.clone();
            s.label += offset;
            if any_msa && s.msa_features.is_none() {
                s.msa_features = Some(s.features.clone());
            }
            samples.push(s);
        }
        blocks.push(DatasetBlock {
            name: ds.name().to_string(),
            classes,
        });
        let max = ds.class_ids().iter().next_back().copied().unwrap_or(0);
        offset = offset
            .checked_add(max + 1)
            .ok_or_else(|| Error::Invalid("class id space exhausted".into()))?;
    }

    let name = blocks
        .iter()
        .map(|b| b.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let dataset = EmbeddingDataset::new(name, dim, samples)?;
    let mut protocol = Protocol::new(base, increment, order, seed)?;
    protocol.stage_manifests = Some(blocks);
    protocol.validate()?;
    Ok((dataset, protocol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, make_splits, write_embeddings, SyntheticSpec};

    fn synth(classes: usize, dim: usize, seed: u64) -> EmbeddingDataset {
        generate_synthetic(&SyntheticSpec {
            n_classes: classes,
            dim,
            samples_per_class: 2,
            cluster_radius: 4.0,
            noise_sigma: 1.0,
            task_drift: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn two_datasets_chain_in_order() {
        let a = synth(100, 4, 1);
        let b = synth(200, 4, 2);
        let (ds, p) = concat_protocols(&[a, b], 0, 20, 1993).unwrap();
        let sets = p.task_class_sets();
        assert_eq!(sets.len(), 15);
        assert!(sets[..5].iter().flatten().all(|&c| c < 100));
        assert!(sets[5..].iter().flatten().all(|&c| (100..300).contains(&c)));
        assert_eq!(ds.class_ids().len(), 300);
        assert_eq!(p.tasks_per_block(), Some(vec![5, 10]));
    }

    #[test]
    fn single_dataset_matches_plain_protocol() {
        let a = synth(20, 4, 3);
        let (ds, p) = concat_protocols(std::slice::from_ref(&a), 0, 5, 42).unwrap();
        let plain = Protocol::shuffled(&a, 0, 5, 42).unwrap();
        assert_eq!(p, plain);
        assert_eq!(make_splits(&ds, &p).unwrap(), make_splits(&a, &plain).unwrap());
    }

    #[test]
    fn ordering_changes_stage_layout() {
        let cifar = synth(100, 4, 1);
        let cub = synth(200, 4, 2);
        let inr = synth(200, 4, 3);
        let (_, fwd) = concat_protocols(&[cifar.clone(), cub.clone(), inr.clone()], 0, 20, 1).unwrap();
        let (_, rev) = concat_protocols(&[inr, cub, cifar], 0, 20, 1).unwrap();
        assert_eq!(fwd.tasks_per_block(), Some(vec![5, 10, 10]));
        assert_eq!(rev.tasks_per_block(), Some(vec![10, 10, 5]));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let err = concat_protocols(&[synth(4, 4, 1), synth(4, 6, 2)], 0, 2, 0).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_embeddings(&synth(4, 4, 1), dir.path().join("a.mote")).unwrap();
        write_embeddings(&synth(6, 4, 2), dir.path().join("b.mote")).unwrap();
        let json = r#"{"name":"ab","base":0,"increment":2,"seed":5,"datasets":["a.mote","b.mote"]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, json).unwrap();
        let m = load_manifest(&path).unwrap();
        let (ds, p) = m.build(m.seed).unwrap();
        assert_eq!(ds.name(), "ab");
        assert_eq!(p.num_tasks(), 5);
    }
}
