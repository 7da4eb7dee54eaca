//! Class prototypes and the pool the cosine classifier compares against.
//!
//! A prototype is the mean adapted feature of one class under the expert
//! trained on that class's task. Once the adapter limit is reached, new
//! classes get a merged prototype instead: each existing expert embeds the
//! class, scores it by its best cosine match inside its own training scope,
//! and the per-expert means are blended with those scores.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, TaskId, TaskSample};
use crate::error::{Error, Result};
use crate::expert::AdapterExpert;
use crate::io::ByteReader;
use crate::numerics::{cosine_with_norms, norm, softmax_slice, DenseVector, NORM_EPS};

pub const POOL_MAGIC: [u8; 4] = *b"MOTP";
const POOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeOrigin {
    Expert(TaskId),
    Merged,
}

impl PrototypeOrigin {
    fn to_i32(self) -> i32 {
        match self {
            PrototypeOrigin::Expert(id) => id as i32,
            PrototypeOrigin::Merged => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    class_id: ClassId,
    task_id: TaskId,
    vector: DenseVector,
    origin: PrototypeOrigin,
    norm: f64,
}

impl Prototype {
    pub fn new(
        class_id: ClassId,
        task_id: TaskId,
        vector: DenseVector,
        origin: PrototypeOrigin,
    ) -> Result<Self> {
        if !vector.is_finite() {
            return Err(Error::NonFinite("prototype"));
        }
        let norm = vector.norm();
        if norm <= NORM_EPS {
            return Err(Error::DegenerateVector(NORM_EPS));
        }
        Ok(Self {
            class_id,
            task_id,
            vector,
            origin,
            norm,
        })
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn vector(&self) -> &DenseVector {
        &self.vector
    }

    pub fn origin(&self) -> PrototypeOrigin {
        self.origin
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Cosine between `feature` (with precomputed norm) and this prototype.
    pub(crate) fn cosine_to(&self, feature: &[f64], feature_norm: f64) -> f64 {
        cosine_with_norms(feature, feature_norm, self.vector.as_slice(), self.norm)
    }
}

/// One prototype per class, plus the filtering scope of every expert.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePool {
    dim: usize,
    prototypes: BTreeMap<ClassId, Prototype>,
    scope_of: BTreeMap<TaskId, BTreeSet<ClassId>>,
}

impl PrototypePool {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            prototypes: BTreeMap::new(),
            scope_of: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, class: ClassId) -> Option<&Prototype> {
        self.prototypes.get(&class)
    }

    /// Prototypes in ascending class-id order.
    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.prototypes.values()
    }

    pub fn task_of(&self, class: ClassId) -> Option<TaskId> {
        self.prototypes.get(&class).map(|p| p.task_id)
    }

    pub fn scope_of(&self, expert: TaskId) -> Option<&BTreeSet<ClassId>> {
        self.scope_of.get(&expert)
    }

    pub fn expert_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.scope_of.keys().copied()
    }

    fn check_new(&self, protos: &[Prototype]) -> Result<()> {
        let mut batch = BTreeSet::new();
        for p in protos {
            if p.vector.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: p.vector.dim(),
                });
            }
            if self.prototypes.contains_key(&p.class_id) || !batch.insert(p.class_id) {
                return Err(Error::DuplicateClass(p.class_id));
            }
        }
        Ok(())
    }

    /// Add the prototypes an expert computed for its own task; they also
    /// form that expert's filtering scope.
    pub fn insert_expert(&mut self, expert: TaskId, protos: Vec<Prototype>) -> Result<()> {
        self.check_new(&protos)?;
        if let Some(p) = protos.iter().find(|p| p.origin != PrototypeOrigin::Expert(expert)) {
            return Err(Error::Invariant(format!(
                "prototype for class {} was not produced by expert {expert}",
                p.class_id
            )));
        }
        let scope = self.scope_of.entry(expert).or_default();
        for p in protos {
            scope.insert(p.class_id);
            self.prototypes.insert(p.class_id, p);
        }
        Ok(())
    }

    /// Add merged prototypes; their classes join every expert's scope.
    pub fn insert_merged(&mut self, protos: Vec<Prototype>) -> Result<()> {
        self.check_new(&protos)?;
        if self.scope_of.is_empty() {
            return Err(Error::NoExperts);
        }
        if let Some(p) = protos.iter().find(|p| p.origin != PrototypeOrigin::Merged) {
            return Err(Error::Invariant(format!(
                "class {} inserted as merged but has origin {:?}",
                p.class_id, p.origin
            )));
        }
        for p in protos {
            for scope in self.scope_of.values_mut() {
                scope.insert(p.class_id);
            }
            self.prototypes.insert(p.class_id, p);
        }
        Ok(())
    }

    /// The pool as it stood right after `through_task` finished.
    pub fn truncated(&self, through_task: TaskId) -> Self {
        let prototypes: BTreeMap<_, _> = self
            .prototypes
            .iter()
            .filter(|(_, p)| p.task_id <= through_task)
            .map(|(&c, p)| (c, p.clone()))
            .collect();
        let scope_of = self
            .scope_of
            .iter()
            .filter(|(&e, _)| e <= through_task)
            .map(|(&e, s)| {
                (
                    e,
                    s.iter().copied().filter(|c| prototypes.contains_key(c)).collect(),
                )
            })
            .collect();
        Self {
            dim: self.dim,
            prototypes,
            scope_of,
        }
    }
}

/// Per-class mean of the expert's adapted features over `data`.
pub fn compute_prototypes(expert: &AdapterExpert, data: &[TaskSample]) -> Result<Vec<Prototype>> {
    if !expert.is_trained() {
        return Err(Error::UntrainedExpert(expert.task_id()));
    }
    let means = class_means_under(expert, data)?;
    for c in expert.scope() {
        if !means.contains_key(c) {
            return Err(Error::EmptyClass(*c));
        }
    }
    means
        .into_iter()
        .map(|(class, mean)| {
            if !expert.scope().contains(&class) {
                return Err(Error::LabelOutsideScope(class));
            }
            Prototype::new(
                class,
                expert.task_id(),
                mean,
                PrototypeOrigin::Expert(expert.task_id()),
            )
        })
        .collect()
}

fn class_means_under(
    expert: &AdapterExpert,
    data: &[TaskSample],
) -> Result<BTreeMap<ClassId, DenseVector>> {
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for s in data {
        let f = expert.forward(&s.features, &s.msa_features)?;
        let (sum, count) = sums
            .entry(s.label)
            .or_insert_with(|| (vec![0.0; expert.dim()], 0));
        for (a, b) in sum.iter_mut().zip(f.as_slice()) {
            *a += b;
        }
        *count += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| {
            let inv = n as f64;
            (c, DenseVector::from_raw(sum.into_iter().map(|x| x / inv).collect()))
        })
        .collect())
}

/// How per-expert similarity scores become merge weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeWeighting {
    /// `max(s_k, 0) / Σ max(s_m, 0)`, uniform when every score is ≤ 0.
    #[default]
    ClampedNormalized,
    Softmax,
    /// Scores used as-is.
    Raw,
}

impl MergeWeighting {
    pub fn weights(self, scores: &[f64]) -> Vec<f64> {
        match self {
            MergeWeighting::ClampedNormalized => {
                let clamped: Vec<f64> = scores.iter().map(|s| s.max(0.0)).collect();
                let total: f64 = clamped.iter().sum();
                if total > 0.0 {
                    clamped.into_iter().map(|s| s / total).collect()
                } else {
                    vec![1.0 / scores.len() as f64; scores.len()]
                }
            }
            MergeWeighting::Softmax => softmax_slice(scores),
            MergeWeighting::Raw => scores.to_vec(),
        }
    }
}

/// Build merged prototypes for the classes of a task that arrives after the
/// adapter limit is exhausted. The caller inserts them with
/// [`PrototypePool::insert_merged`].
pub fn synthesize_overflow_prototypes(
    experts: &[AdapterExpert],
    pool: &PrototypePool,
    task_id: TaskId,
    data: &[TaskSample],
    weighting: MergeWeighting,
) -> Result<Vec<Prototype>> {
    if experts.is_empty() {
        return Err(Error::NoExperts);
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ordered: Vec<&AdapterExpert> = experts.iter().collect();
    ordered.sort_by_key(|e| e.task_id());
    if let Some(e) = ordered.iter().find(|e| !e.is_trained()) {
        return Err(Error::UntrainedExpert(e.task_id()));
    }

    let per_expert: Vec<BTreeMap<ClassId, DenseVector>> = ordered
        .iter()
        .map(|e| class_means_under(e, data))
        .collect::<Result<_>>()?;
    let classes: Vec<ClassId> = per_expert[0].keys().copied().collect();
    if let Some(&c) = classes.iter().find(|c| pool.get(**c).is_some()) {
        return Err(Error::DuplicateClass(c));
    }

    let mut out = Vec::with_capacity(classes.len());
    for class in classes {
        let mut scores = Vec::with_capacity(ordered.len());
        for (expert, means) in ordered.iter().zip(&per_expert) {
            let candidate = &means[&class];
            let cand_norm = norm(candidate.as_slice());
            if cand_norm <= NORM_EPS {
                return Err(Error::DegenerateVector(NORM_EPS));
            }
            let mut best = f64::NEG_INFINITY;
            for c in expert.scope() {
                let p = pool.get(*c).ok_or_else(|| {
                    Error::Invariant(format!(
                        "class {c} of expert {} missing from pool",
                        expert.task_id()
                    ))
                })?;
                best = best.max(p.cosine_to(candidate.as_slice(), cand_norm));
            }
            scores.push(best);
        }
        let weights = weighting.weights(&scores);
        let mut merged = vec![0.0; pool.dim()];
        for (w, means) in weights.iter().zip(&per_expert) {
            for (m, x) in merged.iter_mut().zip(means[&class].as_slice()) {
                *m += w * x;
            }
        }
        out.push(Prototype::new(
            class,
            task_id,
            DenseVector::new(merged)?,
            PrototypeOrigin::Merged,
        )?);
    }
    Ok(out)
}

pub fn encode_pool(pool: &PrototypePool) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&POOL_MAGIC);
    out.extend_from_slice(&POOL_VERSION.to_le_bytes());
    out.extend_from_slice(&(pool.dim as u32).to_le_bytes());
    out.extend_from_slice(&(pool.len() as u32).to_le_bytes());
    for p in pool.iter() {
        out.extend_from_slice(&p.class_id.to_le_bytes());
        out.extend_from_slice(&p.task_id.to_le_bytes());
        out.extend_from_slice(&p.origin.to_i32().to_le_bytes());
        for x in p.vector.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_pool`]. Scopes are rebuilt from origins: an expert
/// owns the classes it produced plus every merged class.
pub fn decode_pool(bytes: &[u8]) -> Result<PrototypePool> {
    let mut r = ByteReader::new(bytes);
    r.magic(POOL_MAGIC)?;
    r.version(POOL_VERSION)?;
    let dim = r.u32("dim")? as usize;
    let count = r.u32("count")? as usize;
    let mut own: BTreeMap<TaskId, Vec<Prototype>> = BTreeMap::new();
    let mut merged = Vec::new();
    for _ in 0..count {
        let class = r.u32("class_id")?;
        let task = r.u32("task_id")?;
        let origin = match r.i32("origin")? {
            -1 => PrototypeOrigin::Merged,
            k if k >= 0 => PrototypeOrigin::Expert(k as TaskId),
            k => return Err(Error::Invalid(format!("bad prototype origin {k}"))),
        };
        let p = Prototype::new(class, task, DenseVector::new(r.f64_vec(dim, "prototype")?)?, origin)?;
        match origin {
            PrototypeOrigin::Expert(k) => own.entry(k).or_default().push(p),
            PrototypeOrigin::Merged => merged.push(p),
        }
    }
    r.finish()?;
    let mut pool = PrototypePool::new(dim);
    for (k, protos) in own {
        pool.insert_expert(k, protos)?;
    }
    if !merged.is_empty() {
        pool.insert_merged(merged)?;
    }
    Ok(pool)
}

pub fn write_pool(pool: &PrototypePool, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_file(path.as_ref(), &encode_pool(pool))?;
    Ok(())
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<PrototypePool> {
    decode_pool(&crate::io::read_file(path.as_ref())?)
}
