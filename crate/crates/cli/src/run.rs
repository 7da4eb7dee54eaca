//! `run` and `sweep`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use mote_core::dataset::{load_manifest, EmbeddingDataset, Protocol};
use mote_core::expert::AdapterMode;
use mote_core::harness::{run_protocol, RunConfig, RunMetrics, StageOrigin};
use mote_core::inference::{GammaMode, InferenceConfig, NeutralBase};
use mote_core::prototypes::{write_pool, MergeWeighting};
use mote_core::{Error, Result};

use crate::Limit;

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Protocol manifest (JSON).
    pub manifest: PathBuf,
    /// Comma-separated seeds. Defaults to the manifest seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Classes in the first task (overrides the manifest).
    #[arg(long)]
    pub base: Option<usize>,
    /// Classes per later task (overrides the manifest).
    #[arg(long)]
    pub increment: Option<usize>,
    /// Inference ablation row, 1 (plain average) to 5 (full method).
    #[arg(long, default_value_t = 5)]
    pub ablation: u8,
    /// Override expert filtering from the ablation row.
    #[arg(long)]
    pub filtering: Option<bool>,
    /// Override confidence re-weighting from the ablation row.
    #[arg(long)]
    pub confidence: Option<bool>,
    /// Override margin re-weighting from the ablation row.
    #[arg(long)]
    pub scs: Option<bool>,
    /// `adaptive` or a non-negative number.
    #[arg(long)]
    pub gamma: Option<GammaMode>,
    /// Base weight when confidence re-weighting is off: `one` or `zero`.
    #[arg(long)]
    pub neutral_base: Option<String>,
    /// Maximum trained experts, or `unlimited`.
    #[arg(long)]
    pub limit: Option<Limit>,
    /// How overflow tasks weight existing experts: `clamped`, `softmax` or `raw`.
    #[arg(long)]
    pub merge: Option<String>,
    #[arg(long)]
    pub mode: Option<AdapterMode>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Measure per-sample inference time after the last stage.
    #[arg(long)]
    pub timing: bool,
    /// Write per-sample diagnostics as JSON lines next to the metrics.
    #[arg(long)]
    pub diagnostics: bool,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Worker cap from `MOTE_THREADS`; 0 means serial.
fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("MOTE_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Invalid(format!("MOTE_THREADS must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl RunArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut inference = InferenceConfig::from_ablation(self.ablation)?;
        if let Some(v) = self.filtering {
            inference.filtering = v;
        }
        if let Some(v) = self.confidence {
            inference.confidence_reweight = v;
        }
        if let Some(v) = self.scs {
            inference.scs_reweight = v;
        }
        if let Some(g) = self.gamma {
            inference.gamma = g;
        }
        if let Some(b) = &self.neutral_base {
            inference.neutral_base = match b.to_ascii_lowercase().as_str() {
                "one" | "1" => NeutralBase::One,
                "zero" | "0" => NeutralBase::Zero,
                other => return Err(Error::Invalid(format!("neutral base must be one or zero, got {other:?}"))),
            };
        }
        cfg.inference = inference;
        if let Some(limit) = self.limit {
            cfg.adapter_limit = limit.as_option();
        }
        if let Some(m) = &self.merge {
            cfg.merge_weighting = match m.to_ascii_lowercase().as_str() {
                "clamped" | "clamped_normalized" => MergeWeighting::ClampedNormalized,
                "softmax" => MergeWeighting::Softmax,
                "raw" => MergeWeighting::Raw,
                other => return Err(Error::Invalid(format!("unknown merge weighting {other:?}"))),
            };
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(r) = self.bottleneck {
            cfg.bottleneck = r;
        }
        if let Some(v) = self.lr {
            cfg.train.lr0 = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.train.weight_decay = v;
        }
        if let Some(v) = self.momentum {
            cfg.train.momentum = v;
        }
        cfg.timing = self.timing;
        cfg.threads = threads_from_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Manifest data plus the seeds to run.
struct Plan {
    manifest: mote_core::dataset::ProtocolManifest,
    seeds: Vec<u64>,
}

impl Plan {
    fn load(args: &RunArgs) -> Result<Self> {
        let mut manifest = load_manifest(&args.manifest)?;
        if let Some(b) = args.base {
            manifest.base = b;
        }
        if let Some(i) = args.increment {
            manifest.increment = i;
        }
        let seeds = if args.seeds.is_empty() {
            vec![manifest.seed]
        } else {
            args.seeds.clone()
        };
        Ok(Self { manifest, seeds })
    }

    fn build(&self, seed: u64) -> Result<(EmbeddingDataset, Protocol)> {
        self.manifest.build(seed)
    }
}

fn log_stages(seed: u64, m: &RunMetrics) {
    let total = m.stages.len();
    for (i, s) in m.stages.iter().enumerate() {
        let origin = match s.origin {
            StageOrigin::Trained => "trained",
            StageOrigin::Synthesized => "synthesized",
        };
        eprintln!(
            "seed {seed} stage {}/{total} task {} ({} classes): {origin}, avg {:.4}, tia {:.4}",
            s.stage,
            s.task_id,
            s.classes.len(),
            m.avg_curve[i],
            m.tia_curve[i]
        );
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn stat(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, std }
}

#[derive(Serialize)]
struct Aggregate<'a> {
    schema_version: u32,
    dataset: &'a str,
    seeds: Vec<u64>,
    config: &'a RunConfig,
    final_avg: Stat,
    af: Option<Stat>,
    tia: Stat,
    last_union: Stat,
    last_task: Stat,
}

fn aggregate_json(runs: &[RunMetrics]) -> Result<String> {
    let pick = |f: fn(&RunMetrics) -> f64| stat(&runs.iter().map(f).collect::<Vec<_>>());
    let afs: Option<Vec<f64>> = runs.iter().map(|m| m.af).collect();
    let agg = Aggregate {
        schema_version: mote_core::harness::SCHEMA_VERSION,
        dataset: &runs[0].dataset,
        seeds: runs.iter().map(|m| m.seed).collect(),
        config: &runs[0].config,
        final_avg: pick(|m| m.final_avg),
        af: afs.map(|a| stat(&a)),
        tia: pick(|m| *m.tia_curve.last().unwrap_or(&0.0)),
        last_union: pick(|m| m.last_union),
        last_task: pick(|m| m.last_task),
    };
    Ok(serde_json::to_string_pretty(&agg)?)
}

fn run_seed(plan: &Plan, cfg: &RunConfig, seed: u64, out: &Path, diagnostics: bool) -> Result<mote_core::harness::RunOutput> {
    let (ds, protocol) = plan.build(seed)?;
    let mut cfg = cfg.clone();
    if diagnostics {
        cfg.diagnostics = Some(out.join(format!("diagnostics_{seed}.jsonl")));
    }
    let output = run_protocol(&ds, &protocol, &cfg)?;
    log_stages(seed, &output.metrics);
    Ok(output)
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.run_config()?;
    let plan = Plan::load(args)?;
    fs::create_dir_all(&args.out)?;
    let mut runs = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        let output = run_seed(&plan, &cfg, seed, &args.out, args.diagnostics)?;
        let m = output.metrics;
        fs::write(args.out.join(format!("metrics_{seed}.json")), m.to_json()?)?;
        fs::write(args.out.join(format!("stages_{seed}.csv")), m.to_csv())?;
        write_pool(&output.pool, args.out.join(format!("pool_{seed}.motp")))?;
        println!(
            "seed {seed}: avg {:.4}  af {}  last {:.4}",
            m.final_avg,
            m.af.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            m.last_union
        );
        runs.push(m);
    }
    fs::write(args.out.join("aggregate.json"), aggregate_json(&runs)?)?;
    let avg = stat(&runs.iter().map(|m| m.final_avg).collect::<Vec<_>>());
    println!(
        "{} seed(s): avg {:.2}±{:.2}",
        runs.len(),
        100.0 * avg.mean,
        100.0 * avg.std
    );
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum SweepValue {
    Ablation(u8),
    Gamma(GammaMode),
    Limit(Limit),
}

impl SweepValue {
    fn apply(self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepValue::Ablation(tag) => cfg.inference = InferenceConfig::from_ablation(tag)?,
            SweepValue::Gamma(g) => cfg.inference.gamma = g,
            SweepValue::Limit(l) => cfg.adapter_limit = l.as_option(),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn label(self) -> String {
        match self {
            SweepValue::Ablation(tag) => format!("#{tag}"),
            SweepValue::Gamma(g) => g.to_string(),
            SweepValue::Limit(l) => l.to_string(),
        }
    }

    fn dimension(self) -> &'static str {
        match self {
            SweepValue::Ablation(_) => "ablation",
            SweepValue::Gamma(_) => "gamma",
            SweepValue::Limit(_) => "limit",
        }
    }
}

/// One CSV row per value per seed; `mean_avg` repeats the value's mean
/// final accuracy over seeds.
pub fn cmd_sweep(args: &RunArgs, values: &[SweepValue]) -> Result<()> {
    let base = args.run_config()?;
    let plan = Plan::load(args)?;
    let configs: Vec<RunConfig> = values.iter().map(|v| v.apply(&base)).collect::<Result<_>>()?;
    fs::create_dir_all(&args.out)?;

    let mut csv = String::from("value,seed,avg,af,tia,last_union,last_task,mean_avg\n");
    for (value, cfg) in values.iter().zip(&configs) {
        let mut runs = Vec::new();
        for &seed in &plan.seeds {
            eprintln!("{} = {}, seed {seed}", value.dimension(), value.label());
            runs.push(run_seed(&plan, cfg, seed, &args.out, false)?.metrics);
        }
        let mean = stat(&runs.iter().map(|m| m.final_avg).collect::<Vec<_>>()).mean;
        for m in &runs {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                value.label(),
                m.seed,
                m.final_avg,
                m.af.map(|a| a.to_string()).unwrap_or_default(),
                m.tia_curve.last().copied().unwrap_or(0.0),
                m.last_union,
                m.last_task,
                mean
            );
        }
        println!("{:>10}  avg {:.2}", value.label(), 100.0 * mean);
    }
    let dimension = values[0].dimension();
    fs::write(args.out.join(format!("sweep_{dimension}.csv")), csv)?;
    Ok(())
}
