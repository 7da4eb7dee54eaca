//! `mote`: synthesize embedding datasets, run incremental protocols, sweep
//! inference settings and summarize results.

mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mote_core::dataset::{generate_synthetic, write_embeddings, SyntheticSpec};
use mote_core::inference::GammaMode;
use mote_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mote", version, about = "Class-incremental learning with adapter experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Gaussian-cluster embedding dataset.
    Synth(SynthArgs),
    /// Run a protocol for one or more seeds.
    Run(run::RunArgs),
    /// Repeat a run across values of one setting.
    Sweep(SweepArgs),
    /// Summarize a directory of metrics files.
    Report(report::ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON file holding a full synthetic spec; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Distance of class means from the origin.
    #[arg(long)]
    rho: Option<f64>,
    /// Per-coordinate noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Shared offset applied to every class mean.
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Dimension {
    Ablation,
    Gamma,
    Limit,
}

#[derive(Args, Debug)]
struct SweepArgs {
    dimension: Dimension,
    /// Comma-separated values. Limits accept ranges such as `1-5` and `unlimited`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    run: run::RunArgs,
}

/// `--limit` value: a positive expert count or no limit.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Limit {
    Unlimited,
    Max(usize),
}

impl std::str::FromStr for Limit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("unlimited") {
            return Ok(Limit::Unlimited);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Limit::Max(n)),
            _ => Err(Error::Invalid(format!(
                "limit must be a positive integer or \"unlimited\", got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Limit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Limit::Unlimited => f.write_str("unlimited"),
            Limit::Max(n) => write!(f, "{n}"),
        }
    }
}

impl Limit {
    pub fn as_option(self) -> Option<usize> {
        match self {
            Limit::Unlimited => None,
            Limit::Max(n) => Some(n),
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => serde_json::from_slice::<SyntheticSpec>(&std::fs::read(path)?)?,
        None => SyntheticSpec {
            n_classes: 0,
            dim: 0,
            samples_per_class: 0,
            cluster_radius: 10.0,
            noise_sigma: 1.0,
            task_drift: 0.0,
            seed: 1993,
        },
    };
    if let Some(v) = args.classes {
        spec.n_classes = v;
    }
    if let Some(v) = args.dim {
        spec.dim = v;
    }
    if let Some(v) = args.per_class {
        spec.samples_per_class = v;
    }
    if let Some(v) = args.rho {
        spec.cluster_radius = v;
    }
    if let Some(v) = args.sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.drift {
        spec.task_drift = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    write_embeddings(&ds, &args.out)?;
    eprintln!(
        "wrote {} samples, {} classes, dim {} to {}",
        ds.len(),
        ds.class_ids().len(),
        ds.dim(),
        args.out.display()
    );
    Ok(())
}

fn parse_sweep_values(dimension: Dimension, raw: &[String]) -> Result<Vec<run::SweepValue>> {
    let mut values = Vec::new();
    for item in raw.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        match dimension {
            Dimension::Ablation => {
                let tag: u8 = item
                    .parse()
                    .map_err(|_| Error::Invalid(format!("ablation tag must be 1..=5, got {item:?}")))?;
                mote_core::inference::InferenceConfig::from_ablation(tag)?;
                values.push(run::SweepValue::Ablation(tag));
            }
            Dimension::Gamma => values.push(run::SweepValue::Gamma(item.parse::<GammaMode>()?)),
            Dimension::Limit => match item.split_once('-') {
                Some((lo, hi)) => {
                    let (lo, hi) = (lo.parse::<Limit>()?, hi.parse::<Limit>()?);
                    match (lo, hi) {
                        (Limit::Max(a), Limit::Max(b)) if a <= b => {
                            values.extend((a..=b).map(|n| run::SweepValue::Limit(Limit::Max(n))))
                        }
                        _ => return Err(Error::Invalid(format!("bad limit range {item:?}"))),
                    }
                }
                None => values.push(run::SweepValue::Limit(item.parse()?)),
            },
        }
    }
    if values.is_empty() {
        return Err(Error::Invalid("sweep needs at least one value".into()));
    }
    Ok(values)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Run(args) => run::cmd_run(&args),
        Command::Sweep(args) => {
            let values = parse_sweep_values(args.dimension, &args.values)?;
            run::cmd_sweep(&args.run, &values)
        }
        Command::Report(args) => report::cmd_report(&args),
    }
}

fn print_error(code: &str, message: &str, exit: i32) {
    let body = serde_json::json!({ "error": { "code": code, "message": message, "exit_code": exit } });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            print_error("usage", message.trim(), 2);
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let exit = e.exit_code();
            print_error(e.code(), &e.to_string(), exit);
            ExitCode::from(exit as u8)
        }
    }
}

