//! Gaussian-cluster stand-in for backbone embeddings.

use serde::{Deserialize, Serialize};

use super::{EmbeddingDataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, vec_mat, DenseMatrix, DenseVector, SeededRng};

const STREAM_MEANS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_ROTATION: u64 = 3;
const STREAM_DRIFT: u64 = 4;

/// Class `c` draws samples from `Normal(μ_c, σ²I)` with `μ_c` uniform on the
/// sphere of radius `cluster_radius`. A nonzero `task_drift` shifts every
/// class mean of the dataset by one shared random offset of that length,
/// so chained datasets can sit in different domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub cluster_radius: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub task_drift: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Invalid("synthetic dim must be at least 2".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Invalid("synthetic n_classes must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Invalid(
                "synthetic samples_per_class must be positive".into(),
            ));
        }
        if !(self.cluster_radius > 0.0 && self.cluster_radius.is_finite()) {
            return Err(Error::Invalid("cluster radius must be > 0".into()));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invalid("noise sigma must be > 0".into()));
        }
        if !(self.task_drift >= 0.0 && self.task_drift.is_finite()) {
            return Err(Error::Invalid("task drift must be >= 0".into()));
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// The true class means the generator samples around.
pub fn class_means(spec: &SyntheticSpec) -> Result<Vec<DenseVector>> {
    spec.validate()?;
    let mut rng = SeededRng::with_stream(spec.seed, STREAM_MEANS);
    let mut means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            unit_gaussian(&mut rng, spec.dim)
                .into_iter()
                .map(|x| x * spec.cluster_radius)
                .collect()
        })
        .collect();
    if spec.task_drift > 0.0 {
        let mut drift_rng = SeededRng::with_stream(spec.seed, STREAM_DRIFT);
        let offset = unit_gaussian(&mut drift_rng, spec.dim);
        for m in &mut means {
            for (x, o) in m.iter_mut().zip(&offset) {
                *x += spec.task_drift * o;
            }
        }
    }
    means.into_iter().map(DenseVector::new).collect()
}

/// Random orthogonal matrix by modified Gram-Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut SeededRng, dim: usize) -> DenseMatrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for r in &rows {
            let p = dot(&v, r);
            for (x, y) in v.iter_mut().zip(r) {
                *x -= p * y;
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    DenseMatrix::from_rows(&rows).expect("rotation rows are finite and square")
}

/// Samples are emitted class-major (class 0 first) and carry no split flag;
/// `msa_features` is a fixed seeded rotation of `features`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    let means = class_means(spec)?;
    let rotation = random_rotation(
        &mut SeededRng::with_stream(spec.seed, STREAM_ROTATION),
        spec.dim,
    );
    let mut noise = SeededRng::with_stream(spec.seed, STREAM_NOISE);
    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let features: Vec<f64> = mean
                .as_slice()
                .iter()
                .map(|&m| m + spec.noise_sigma * noise.normal())
                .collect();
            let msa = vec_mat(&features, &rotation);
            let mut s = Sample::new(class as u32, DenseVector::new(features)?);
            s.msa_features = Some(DenseVector::new(msa)?);
            samples.push(s);
        }
    }
    EmbeddingDataset::new(
        format!("synthetic-{}c-{}d-s{}", spec.n_classes, spec.dim, spec.seed),
        spec.dim,
        samples,
    )
}
