//! `.mote` embedding files.
//!
//! Little-endian layout:
//!
//! ```text
//! "MOTE" | u32 version=1 | u32 n_samples | u32 dim | u8 has_msa | u8 has_split_flag
//! per sample: u32 label | [u8 split] | dim × f32 features | [dim × f32 msa_features]
//! ```

use std::path::Path;

use super::{EmbeddingDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::numerics::DenseVector;

pub const MAGIC: [u8; 4] = *b"MOTE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1 + 1;

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Labels must be below this limit when set.
    pub class_limit: Option<u32>,
}

pub fn encode_embeddings(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    let samples = dataset.samples();
    let has_msa = dataset.has_msa();
    let flagged = samples.iter().filter(|s| s.split.is_some()).count();
    if flagged != 0 && flagged != samples.len() {
        return Err(Error::Invalid(
            "split flags must be present on all samples or none".into(),
        ));
    }
    let has_split = flagged != 0;
    let n = u32::try_from(samples.len()).map_err(|_| Error::Invalid("too many samples".into()))?;
    let dim = u32::try_from(dataset.dim()).map_err(|_| Error::Invalid("dim too large".into()))?;

    let per_sample = 4 + usize::from(has_split) + 4 * dataset.dim() * (1 + usize::from(has_msa));
    let mut out = Vec::with_capacity(HEADER_LEN + per_sample * samples.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.push(u8::from(has_msa));
    out.push(u8::from(has_split));
    for s in samples {
        out.extend_from_slice(&s.label.to_le_bytes());
        if has_split {
            out.push(match s.split {
                Some(Split::Test) => 1,
                _ => 0,
            });
        }
        for &x in s.features.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        if let Some(msa) = &s.msa_features {
            for &x in msa.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_embeddings(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_file(path.as_ref(), &encode_embeddings(dataset)?)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    read_embeddings_with(path, ReadOptions::default())
}

pub fn read_embeddings_with(path: impl AsRef<Path>, opts: ReadOptions) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = crate::io::read_file(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".into());
    decode_embeddings(&bytes, name, opts)
}

fn flag(value: u8, field: &'static str) -> Result<bool> {
    match value {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::InvalidFlag { field, value }),
    }
}

pub fn decode_embeddings(
    bytes: &[u8],
    name: impl Into<String>,
    opts: ReadOptions,
) -> Result<EmbeddingDataset> {
    let mut cur = ByteReader::new(bytes);
    cur.magic(MAGIC)?;
    cur.version(FORMAT_VERSION)?;
    let n = cur.u32("n_samples")? as usize;
    let dim = cur.u32("dim")? as usize;
    let has_msa = flag(cur.u8("has_msa")?, "has_msa")?;
    let has_split = flag(cur.u8("has_split_flag")?, "has_split_flag")?;

    let mut samples = Vec::with_capacity(n.min(bytes.len()));
    for i in 0..n {
        let label = cur.u32("label")?;
        if let Some(limit) = opts.class_limit {
            if label >= limit {
                return Err(Error::LabelOutOfRange { label, limit });
            }
        }
        let split = if has_split {
            Some(if flag(cur.u8("split")?, "split")? {
                Split::Test
            } else {
                Split::Train
            })
        } else {
            None
        };
        let features = DenseVector::new(cur.f32_vec(dim, &format!("sample {i} features"))?)?;
        let msa_features = if has_msa {
            Some(DenseVector::new(cur.f32_vec(dim, &format!("sample {i} msa"))?)?)
        } else {
            None
        };
        samples.push(Sample {
            label,
            features,
            msa_features,
            split,
        });
    }
    cur.finish()?;
    EmbeddingDataset::new(name, dim, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn le32(x: u32) -> [u8; 4] {
        x.to_le_bytes()
    }

    fn handcrafted() -> Vec<u8> {
        // 3 samples, dim 2, no msa, split flags present
        let mut b = Vec::new();
        b.extend_from_slice(b"MOTE");
        b.extend_from_slice(&le32(1));
        b.extend_from_slice(&le32(3));
        b.extend_from_slice(&le32(2));
        b.push(0);
        b.push(1);
        for (label, split, x, y) in [(4u32, 0u8, 1.0f32, -2.0f32), (4, 1, 0.5, 0.25), (7, 0, -3.0, 8.0)] {
            b.extend_from_slice(&le32(label));
            b.push(split);
            b.extend_from_slice(&x.to_le_bytes());
            b.extend_from_slice(&y.to_le_bytes());
        }
        b
    }

    #[test]
    fn handcrafted_bytes_parse_exactly() {
        let bytes = handcrafted();
        assert_eq!(bytes.len(), 18 + 3 * (4 + 1 + 8));
        // first feature of sample 0 sits right after header + label + split byte
        assert_eq!(&bytes[23..27], &[0x00, 0x00, 0x80, 0x3f]);

        let ds = decode_embeddings(&bytes, "hand", ReadOptions::default()).unwrap();
        assert_eq!(ds.dim(), 2);
        let s = ds.samples();
        assert_eq!(s[0].label, 4);
        assert_eq!(s[0].split, Some(Split::Train));
        assert_eq!(s[0].features.as_slice(), &[1.0, -2.0]);
        assert_eq!(s[1].split, Some(Split::Test));
        assert_eq!(s[1].features.as_slice(), &[0.5, 0.25]);
        assert_eq!(s[2].label, 7);
        assert_eq!(s[2].features.as_slice(), &[-3.0, 8.0]);
        assert!(s.iter().all(|x| x.msa_features.is_none()));
        assert_eq!(encode_embeddings(&ds).unwrap(), bytes);
    }

    #[test]
    fn each_corruption_has_its_own_error() {
        let good = handcrafted();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let e = decode_embeddings(&bad, "x", ReadOptions::default()).unwrap_err();
        assert_eq!(e.code(), "bad_magic");

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&le32(2));
        let e = decode_embeddings(&bad, "x", ReadOptions::default()).unwrap_err();
        assert_eq!(e.code(), "version_mismatch");

        let e = decode_embeddings(&good[..good.len() - 3], "x", ReadOptions::default()).unwrap_err();
        assert_eq!(e.code(), "truncated_payload");

        let e = decode_embeddings(&good, "x", ReadOptions { class_limit: Some(5) }).unwrap_err();
        assert_eq!(e.code(), "label_out_of_range");

        let mut bad = good.clone();
        bad[22] = 3;
        let e = decode_embeddings(&bad, "x", ReadOptions::default()).unwrap_err();
        assert_eq!(e.code(), "invalid_flag");
    }

    #[test]
    fn round_trip_within_f32() {
        let spec = SyntheticSpec {
            n_classes: 4,
            dim: 6,
            samples_per_class: 5,
            cluster_radius: 3.0,
            noise_sigma: 0.7,
            task_drift: 0.0,
            seed: 12,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.mote");
        write_embeddings(&ds, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.name(), "rt");
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.features.as_slice().iter().zip(b.features.as_slice()) {
                assert_eq!(*y, *x as f32 as f64);
            }
            let (ma, mb) = (a.msa_features.as_ref().unwrap(), b.msa_features.as_ref().unwrap());
            for (x, y) in ma.as_slice().iter().zip(mb.as_slice()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        // f32 data survives a second trip bit-exactly
        assert_eq!(encode_embeddings(&back).unwrap(), std::fs::read(&path).unwrap());
    }
}
