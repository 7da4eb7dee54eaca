//! Multi-expert prediction.
//!
//! Every expert embeds the sample and is scored against the whole prototype
//! pool. An expert is reliable when its best-matching class belongs to its
//! own scope. The kept experts' features are blended with weights
//! `w = z1st + γ·s`, where `s = (z1st − z2nd) / z1st` is the top-2 margin,
//! and the blend is classified by nearest prototype.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, TaskId};
use crate::error::{Error, Result};
use crate::expert::AdapterExpert;
use crate::numerics::{norm, DenseVector, NORM_EPS};
use crate::prototypes::PrototypePool;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// γ equals the confidence base term (`z1st` when confidence
    /// re-weighting is on).
    Adaptive,
    Fixed(f64),
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(GammaMode::Adaptive);
        }
        match s.parse::<f64>() {
            Ok(g) if g.is_finite() && g >= 0.0 => Ok(GammaMode::Fixed(g)),
            _ => Err(Error::Invalid(format!(
                "gamma must be \"adaptive\" or a non-negative number, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for GammaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GammaMode::Adaptive => f.write_str("adaptive"),
            GammaMode::Fixed(g) => write!(f, "{g}"),
        }
    }
}

/// Base term used when confidence re-weighting is off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeutralBase {
    /// `w = 1 + γ·s`
    #[default]
    One,
    /// `w = γ·s`
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub filtering: bool,
    pub confidence_reweight: bool,
    pub scs_reweight: bool,
    pub gamma: GammaMode,
    #[serde(default)]
    pub neutral_base: NeutralBase,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::from_ablation(5).expect("valid tag")
    }
}

impl InferenceConfig {
    /// Ablation rows: 1 none, 2 filtering, 3 filtering + confidence,
    /// 4 filtering + margin, 5 everything with adaptive γ.
    pub fn from_ablation(tag: u8) -> Result<Self> {
        let (filtering, confidence_reweight, scs_reweight) = match tag {
            1 => (false, false, false),
            2 => (true, false, false),
            3 => (true, true, false),
            4 => (true, false, true),
            5 => (true, true, true),
            _ => return Err(Error::Invalid(format!("ablation tag must be 1..=5, got {tag}"))),
        };
        Ok(Self {
            filtering,
            confidence_reweight,
            scs_reweight,
            gamma: GammaMode::Adaptive,
            neutral_base: NeutralBase::One,
        })
    }

    /// The ablation row this config corresponds to, if any.
    pub fn tag(&self) -> Option<u8> {
        if self.gamma != GammaMode::Adaptive || self.neutral_base != NeutralBase::One {
            return None;
        }
        (1..=5).find(|&t| Self::from_ablation(t).ok() == Some(*self))
    }

    pub fn validate(&self) -> Result<()> {
        if let GammaMode::Fixed(g) = self.gamma {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Invalid(format!("gamma must be finite and >= 0, got {g}")));
            }
        }
        Ok(())
    }
}

/// One expert's view of a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertVerdict {
    pub expert_id: TaskId,
    #[serde(skip)]
    pub feature: DenseVector,
    /// Cosine to each pool prototype, in ascending class-id order.
    #[serde(skip)]
    pub sims: Vec<f64>,
    pub predicted_class: ClassId,
    pub z1st: f64,
    pub z2nd: f64,
    pub scs: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub predicted_class: ClassId,
    pub predicted_task: TaskId,
    pub reliable_experts: Vec<TaskId>,
    /// Experts whose features went into the blend, with their weights.
    pub used_experts: Vec<TaskId>,
    pub weights: Vec<f64>,
    pub fused: DenseVector,
    pub verdicts: Vec<ExpertVerdict>,
}

/// Cosine to every prototype, top class (ties to the lowest id) and the two
/// largest similarities. A zero feature scores 0 against everything.
fn score(feature: &[f64], pool: &PrototypePool) -> Result<(Vec<f64>, ClassId, f64, f64)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if feature.len() != pool.dim() {
        return Err(Error::DimensionMismatch {
            expected: pool.dim(),
            found: feature.len(),
        });
    }
    let fnorm = norm(feature);
    let mut sims = Vec::with_capacity(pool.len());
    let mut best: Option<(ClassId, f64)> = None;
    let mut second = f64::NEG_INFINITY;
    for p in pool.iter() {
        let z = if fnorm > NORM_EPS { p.cosine_to(feature, fnorm) } else { 0.0 };
        sims.push(z);
        match best {
            Some((_, b)) if z <= b => second = second.max(z),
            Some((_, b)) => {
                second = b;
                best = Some((p.class_id(), z));
            }
            None => best = Some((p.class_id(), z)),
        }
    }
    let (class, z1) = best.expect("pool is non-empty");
    let z2 = if pool.len() == 1 { 0.0 } else { second };
    Ok((sims, class, z1, z2))
}

/// Plain cosine nearest-prototype classification.
pub fn nearest_prototype(feature: &DenseVector, pool: &PrototypePool) -> Result<ClassId> {
    Ok(score(feature.as_slice(), pool)?.1)
}

pub fn evaluate_expert(
    expert: &AdapterExpert,
    pool: &PrototypePool,
    h_out: &DenseVector,
    h_msa: &DenseVector,
) -> Result<ExpertVerdict> {
    if !expert.is_trained() {
        return Err(Error::UntrainedExpert(expert.task_id()));
    }
    let scope = pool.scope_of(expert.task_id()).ok_or_else(|| {
        Error::Invariant(format!("expert {} has no scope in the pool", expert.task_id()))
    })?;
    let feature = expert.forward(h_out, h_msa)?;
    let (sims, predicted_class, z1st, z2nd) = score(feature.as_slice(), pool)?;
    Ok(ExpertVerdict {
        expert_id: expert.task_id(),
        reliable: scope.contains(&predicted_class),
        scs: scs(z1st, z2nd),
        feature,
        sims,
        predicted_class,
        z1st,
        z2nd,
    })
}

/// Normalized top-2 margin. Zero when `z1st ≤ 0`.
pub fn scs(z1st: f64, z2nd: f64) -> f64 {
    if z1st <= 0.0 {
        return 0.0;
    }
    (z1st - z2nd) / z1st.max(NORM_EPS)
}

/// Fusion weight of one expert, clamped at zero.
pub fn expert_weight(z1st: f64, s: f64, config: &InferenceConfig) -> f64 {
    let base = if config.confidence_reweight {
        z1st
    } else {
        match config.neutral_base {
            NeutralBase::One => 1.0,
            NeutralBase::Zero => 0.0,
        }
    };
    let s = if config.scs_reweight { s } else { 0.0 };
    let gamma = match config.gamma {
        GammaMode::Adaptive if config.confidence_reweight => z1st,
        GammaMode::Adaptive => 1.0,
        GammaMode::Fixed(g) => g,
    };
    (base + gamma * s).max(0.0)
}

/// `Σ w_i F_i` in the given order. All-zero weights fall back to a plain mean.
pub fn fuse(features: &[&DenseVector], weights: &[f64]) -> Result<DenseVector> {
    if features.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            found: weights.len(),
        });
    }
    let first = features.first().ok_or(Error::NoExperts)?;
    let uniform;
    let weights = if weights.iter().all(|&w| w == 0.0) {
        uniform = vec![1.0 / weights.len() as f64; weights.len()];
        &uniform
    } else {
        weights
    };
    let mut out = vec![0.0; first.dim()];
    for (f, &w) in features.iter().zip(weights) {
        if f.dim() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                found: f.dim(),
            });
        }
        for (o, x) in out.iter_mut().zip(f.as_slice()) {
            *o += w * x;
        }
    }
    DenseVector::new(out)
}

/// Full decision procedure for one sample. Experts are visited in ascending
/// task-id order.
pub fn predict(
    h_out: &DenseVector,
    h_msa: &DenseVector,
    experts: &[AdapterExpert],
    pool: &PrototypePool,
    config: &InferenceConfig,
) -> Result<PredictionResult> {
    if experts.is_empty() {
        return Err(Error::NoExperts);
    }
    let mut ordered: Vec<&AdapterExpert> = experts.iter().collect();
    ordered.sort_by_key(|e| e.task_id());
    let verdicts = ordered
        .iter()
        .map(|e| evaluate_expert(e, pool, h_out, h_msa))
        .collect::<Result<Vec<_>>>()?;

    let reliable: Vec<usize> = (0..verdicts.len()).filter(|&i| verdicts[i].reliable).collect();
    let kept: Vec<usize> = if config.filtering && !reliable.is_empty() {
        reliable.clone()
    } else {
        (0..verdicts.len()).collect()
    };

    let (fused, weights) = if let [only] = kept[..] {
        (verdicts[only].feature.clone(), vec![1.0])
    } else {
        let weights: Vec<f64> = kept
            .iter()
            .map(|&i| expert_weight(verdicts[i].z1st, verdicts[i].scs, config))
            .collect();
        let feats: Vec<&DenseVector> = kept.iter().map(|&i| &verdicts[i].feature).collect();
        (fuse(&feats, &weights)?, weights)
    };

    let predicted_class = nearest_prototype(&fused, pool)?;
    let predicted_task = pool
        .task_of(predicted_class)
        .ok_or_else(|| Error::Invariant(format!("class {predicted_class} has no task")))?;
    Ok(PredictionResult {
        predicted_class,
        predicted_task,
        reliable_experts: reliable.iter().map(|&i| verdicts[i].expert_id).collect(),
        used_experts: kept.iter().map(|&i| verdicts[i].expert_id).collect(),
        weights,
        fused,
        verdicts,
    })
}

/// One line of the diagnostics stream.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsRecord<'a> {
    pub stage: usize,
    pub sample_id: u64,
    pub label: ClassId,
    pub predicted_class: ClassId,
    pub predicted_task: TaskId,
    pub used_experts: &'a [TaskId],
    pub weights: &'a [f64],
    pub verdicts: &'a [ExpertVerdict],
    pub f_mix: &'a [f64],
}

impl<'a> DiagnosticsRecord<'a> {
    pub fn new(stage: usize, sample_id: u64, label: ClassId, result: &'a PredictionResult) -> Self {
        Self {
            stage,
            sample_id,
            label,
            predicted_class: result.predicted_class,
            predicted_task: result.predicted_task,
            used_experts: &result.used_experts,
            weights: &result.weights,
            verdicts: &result.verdicts,
            f_mix: result.fused.as_slice(),
        }
    }
}

/// Append-only JSON-lines writer for [`DiagnosticsRecord`]s.
pub struct DiagnosticsSink<W: Write> {
    out: W,
}

impl<W: Write> DiagnosticsSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, record: &DiagnosticsRecord<'_>) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
