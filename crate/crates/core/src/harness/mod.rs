//! End-to-end incremental runs and their metrics.

mod memory;
mod metrics;
mod timing;

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_splits, ClassId, EmbeddingDataset, Protocol, TaskId, TaskSample};
use crate::error::{Error, Result};
use crate::expert::{train_task, AdapterExpert, AdapterMode, TrainConfig, TrainReport};
use crate::inference::{predict, DiagnosticsRecord, DiagnosticsSink, InferenceConfig};
use crate::numerics::SeededRng;
use crate::prototypes::{compute_prototypes, synthesize_overflow_prototypes, MergeWeighting, PrototypePool};

pub use memory::{memory_report, MemoryReport, DEFAULT_BYTES_PER_WEIGHT};
pub use metrics::{avg_accuracy, avg_forgetting, task_identify_accuracy, AccuracyMatrix};
pub use timing::{timing_report, TimingReport, MIN_TIMED, WARMUP};

pub const SCHEMA_VERSION: u32 = 1;
const STREAM_EXPERT_INIT: u64 = 0xe1_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    /// Maximum number of trained experts; `None` trains one per task.
    pub adapter_limit: Option<usize>,
    pub bottleneck: usize,
    pub mode: AdapterMode,
    #[serde(default)]
    pub merge_weighting: MergeWeighting,
    pub bytes_per_weight: usize,
    /// Measure per-sample inference time after the last stage.
    #[serde(default)]
    pub timing: bool,
    /// Worker threads for test-set evaluation: `None` uses the global pool,
    /// `Some(0)` runs serially.
    #[serde(skip)]
    pub threads: Option<usize>,
    /// JSON-lines file receiving one record per evaluated test sample.
    #[serde(skip)]
    pub diagnostics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            adapter_limit: None,
            bottleneck: 16,
            mode: AdapterMode::Seq,
            merge_weighting: MergeWeighting::default(),
            bytes_per_weight: DEFAULT_BYTES_PER_WEIGHT,
            timing: false,
            threads: None,
            diagnostics: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.inference.validate()?;
        if self.adapter_limit == Some(0) {
            return Err(Error::Invalid("adapter limit must be >= 1".into()));
        }
        if self.bottleneck == 0 {
            return Err(Error::Invalid("bottleneck must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageOrigin {
    Trained,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub task_id: TaskId,
    pub classes: Vec<ClassId>,
    pub origin: StageOrigin,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSnapshot {
    pub base_classes: usize,
    pub increment: usize,
    pub num_tasks: usize,
    pub class_order: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub dataset: String,
    pub seed: u64,
    pub config: RunConfig,
    pub protocol: ProtocolSnapshot,
    pub matrix: AccuracyMatrix,
    /// Test-set size of each task.
    pub test_sizes: Vec<usize>,
    /// Task-averaged accuracy after each stage.
    pub avg_curve: Vec<f64>,
    /// Accuracy over the union of seen test sets after each stage.
    pub weighted_curve: Vec<f64>,
    /// Forgetting after each stage; `None` at the first.
    pub af_curve: Vec<Option<f64>>,
    pub tia_curve: Vec<f64>,
    pub final_avg: f64,
    pub last_union: f64,
    pub last_task: f64,
    pub af: Option<f64>,
    pub stages: Vec<StageRecord>,
    pub memory: MemoryReport,
    pub timing: Option<TimingReport>,
}

impl RunMetrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the timing block removed, stable across repeated runs.
    pub fn to_json_without_timing(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timing = None;
        copy.to_json()
    }

    /// `stage,avg,af,tia,last` with `last` the union accuracy at that stage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,avg,af,tia,last\n");
        for i in 0..self.avg_curve.len() {
            let af = self.af_curve[i].map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                self.avg_curve[i],
                af,
                self.tia_curve[i],
                self.weighted_curve[i]
            ));
        }
        out
    }
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub experts: Vec<AdapterExpert>,
    pub pool: PrototypePool,
    pub test_sets: Vec<Vec<TaskSample>>,
}

/// Per-sample outcome of evaluating one test set.
struct Outcome {
    correct: bool,
    task_correct: bool,
}

fn evaluate_set(
    experts: &[AdapterExpert],
    pool: &PrototypePool,
    test: &[TaskSample],
    task: TaskId,
    config: &InferenceConfig,
    threads: Option<&rayon::ThreadPool>,
    serial: bool,
    mut sink: Option<(&mut DiagnosticsSink<BufWriter<File>>, usize)>,
) -> Result<Vec<Outcome>> {
    let run = |s: &TaskSample| predict(&s.features, &s.msa_features, experts, pool, config);
    let results: Vec<_> = if serial || sink.is_some() {
        test.iter().map(run).collect::<Result<_>>()?
    } else if let Some(tp) = threads {
        tp.install(|| test.par_iter().map(run).collect::<Result<_>>())?
    } else {
        test.par_iter().map(run).collect::<Result<_>>()?
    };
    let mut out = Vec::with_capacity(results.len());
    for (s, r) in test.iter().zip(&results) {
        if let Some((sink, stage)) = sink.as_mut() {
            sink.record(&DiagnosticsRecord::new(*stage, s.id as u64, s.label, r))?;
        }
        out.push(Outcome {
            correct: r.predicted_class == s.label,
            task_correct: r.predicted_task == task,
        });
    }
    Ok(out)
}

/// Accuracy of the given experts and pool on one test set.
pub fn evaluate_task(
    experts: &[AdapterExpert],
    pool: &PrototypePool,
    test: &[TaskSample],
    config: &InferenceConfig,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for s in test {
        if predict(&s.features, &s.msa_features, experts, pool, config)?.predicted_class == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Run the whole protocol: train (or synthesize) stage by stage, evaluating
/// every seen task after each stage.
///
/// All randomness derives from `protocol.seed`; the seed inside
/// `config.train` is replaced by it. Each stage's training data is dropped
/// once the stage finishes.
pub fn run_protocol(
    dataset: &EmbeddingDataset,
    protocol: &Protocol,
    config: &RunConfig,
) -> Result<RunOutput> {
    config.validate()?;
    let mut config = config.clone();
    config.train.seed = protocol.seed;
    let seed = protocol.seed;

    let threads = match config.threads {
        Some(n) if n > 0 => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?,
        ),
        _ => None,
    };
    let serial = config.threads == Some(0);
    let mut sink = match &config.diagnostics {
        Some(path) => Some(DiagnosticsSink::new(BufWriter::new(crate::io::create_file(path)?))),
        None => None,
    };

    let splits = make_splits(dataset, protocol)?;
    let mut experts: Vec<AdapterExpert> = Vec::new();
    let mut pool = PrototypePool::new(dataset.dim());
    let mut test_sets: Vec<Vec<TaskSample>> = Vec::with_capacity(splits.len());
    let mut matrix = AccuracyMatrix::new();
    let (mut weighted_curve, mut tia_curve, mut avg_curve, mut af_curve) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut stages = Vec::new();

    for (stage, split) in splits.into_iter().enumerate() {
        let task = split.task_id;
        if split.test.is_empty() {
            return Err(Error::Invalid(format!("task {task} has no test samples")));
        }
        let train = split.train;
        let limited = config.adapter_limit.is_some_and(|m| stage >= m);
        let (origin, train_report) = if limited {
            let merged = synthesize_overflow_prototypes(
                &experts,
                &pool,
                task,
                &train,
                config.merge_weighting,
            )?;
            pool.insert_merged(merged)?;
            (StageOrigin::Synthesized, None)
        } else {
            let mut rng = SeededRng::with_stream(seed, STREAM_EXPERT_INIT + task as u64);
            let mut expert = AdapterExpert::new(
                task,
                split.classes.iter().copied().collect(),
                dataset.dim(),
                config.bottleneck,
                config.mode,
                &mut rng,
            )?;
            let report = train_task(&mut expert, &train, &config.train)?;
            pool.insert_expert(task, compute_prototypes(&expert, &train)?)?;
            experts.push(expert);
            (StageOrigin::Trained, Some(report))
        };
        let train_samples = train.len();
        drop(train);
        stages.push(StageRecord {
            stage: stage + 1,
            task_id: task,
            classes: split.classes,
            origin,
            train_samples,
            test_samples: split.test.len(),
            train_report,
        });
        test_sets.push(split.test);

        let mut row = Vec::with_capacity(stage + 1);
        let (mut correct, mut task_correct, mut total) = (0usize, 0usize, 0usize);
        for (j, test) in test_sets.iter().enumerate() {
            let outcomes = evaluate_set(
                &experts,
                &pool,
                test,
                stages[j].task_id,
                &config.inference,
                threads.as_ref(),
                serial,
                sink.as_mut().map(|s| (s, stage + 1)),
            )?;
            let c = outcomes.iter().filter(|o| o.correct).count();
            correct += c;
            task_correct += outcomes.iter().filter(|o| o.task_correct).count();
            total += outcomes.len();
            row.push(c as f64 / outcomes.len() as f64);
        }
        matrix.push_row(row)?;
        avg_curve.push(avg_accuracy(&matrix, stage + 1)?);
        af_curve.push(if stage > 0 { Some(avg_forgetting(&matrix, stage + 1)?) } else { None });
        weighted_curve.push(correct as f64 / total as f64);
        tia_curve.push(task_correct as f64 / total as f64);
    }
    if let Some(sink) = sink {
        use std::io::Write;
        sink.into_inner().flush()?;
    }

    let t = matrix.stages();
    if t == 0 {
        return Err(Error::Invalid("protocol has no tasks".into()));
    }
    let timing = if config.timing {
        let union: Vec<TaskSample> = test_sets.iter().flatten().cloned().collect();
        let timed = union.len().max(MIN_TIMED);
        Some(timing_report(&experts, &pool, &union, &config.inference, timed)?)
    } else {
        None
    };

    let metrics = RunMetrics {
        schema_version: SCHEMA_VERSION,
        dataset: dataset.name().to_string(),
        seed,
        protocol: ProtocolSnapshot {
            base_classes: protocol.base_classes,
            increment: protocol.increment,
            num_tasks: t,
            class_order: protocol.class_order.clone(),
        },
        test_sizes: test_sets.iter().map(Vec::len).collect(),
        final_avg: avg_curve[t - 1],
        last_union: weighted_curve[t - 1],
        last_task: matrix.get(t - 1, t - 1).expect("diagonal entry"),
        af: af_curve[t - 1],
        memory: memory_report(&experts, &pool, config.bytes_per_weight),
        config,
        matrix,
        avg_curve,
        weighted_curve,
        af_curve,
        tia_curve,
        stages,
        timing,
    };
    Ok(RunOutput {
        metrics,
        experts,
        pool,
        test_sets,
    })
}
