//! `report`: table and stage curves from a directory of metrics files.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;

use mote_core::harness::RunMetrics;
use mote_core::{Error, Result};

use crate::run::{stat, Stat};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding `metrics_*.json` files.
    pub dir: PathBuf,
    /// Stage-curve CSV path. Defaults to `curves.csv` inside the directory.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn pct_stat(s: Stat) -> String {
    format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std)
}

fn load_runs(args: &ReportArgs) -> Result<Vec<(String, RunMetrics)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| p.file_name().is_some_and(|n| n != "aggregate.json"))
        .collect();
    paths.sort();
    let mut runs = Vec::new();
    for p in paths {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        match fs::read(&p).map_err(Error::from).and_then(|b| Ok(serde_json::from_slice::<RunMetrics>(&b)?)) {
            Ok(m) => runs.push((name, m)),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    if runs.is_empty() {
        return Err(Error::Invalid(format!(
            "no readable metrics files in {}",
            args.dir.display()
        )));
    }
    Ok(runs)
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let runs = load_runs(args)?;
    let tia = |m: &RunMetrics| m.tia_curve.last().copied().unwrap_or(0.0);

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<24} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "run", "Avg", "AF", "TIA", "Last", "Last(task)"
    );
    for (name, m) in &runs {
        let _ = writeln!(
            table,
            "{:<24} {:>12} {:>12} {:>12} {:>12} {:>12}",
            name,
            pct(m.final_avg),
            m.af.map(pct).unwrap_or_else(|| "-".into()),
            pct(tia(m)),
            pct(m.last_union),
            pct(m.last_task)
        );
    }
    if runs.len() > 1 {
        let col = |f: &dyn Fn(&RunMetrics) -> f64| stat(&runs.iter().map(|(_, m)| f(m)).collect::<Vec<_>>());
        let afs: Option<Vec<f64>> = runs.iter().map(|(_, m)| m.af).collect();
        let _ = writeln!(
            table,
            "{:<24} {:>12} {:>12} {:>12} {:>12} {:>12}",
            format!("mean±std ({})", runs.len()),
            pct_stat(col(&|m| m.final_avg)),
            afs.map(|a| pct_stat(stat(&a))).unwrap_or_else(|| "-".into()),
            pct_stat(col(&tia)),
            pct_stat(col(&|m| m.last_union)),
            pct_stat(col(&|m| m.last_task))
        );
    }
    print!("{table}");

    // stages shared by every run
    let stages = runs.iter().map(|(_, m)| m.avg_curve.len()).min().unwrap_or(0);
    let mut csv = String::from("stage,avg_mean,avg_std,af_mean,tia_mean,last_mean\n");
    for i in 0..stages {
        let col = |f: &dyn Fn(&RunMetrics) -> f64| stat(&runs.iter().map(|(_, m)| f(m)).collect::<Vec<_>>());
        let avg = col(&|m| m.avg_curve[i]);
        let af: Option<Vec<f64>> = runs.iter().map(|(_, m)| m.af_curve[i]).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            i + 1,
            avg.mean,
            avg.std,
            af.map(|a| stat(&a).mean.to_string()).unwrap_or_default(),
            col(&|m| m.tia_curve[i]).mean,
            col(&|m| m.weighted_curve[i]).mean
        );
    }
    let out = args.out.clone().unwrap_or_else(|| args.dir.join("curves.csv"));
    fs::write(&out, csv)?;
    eprintln!("stage curves written to {}", out.display());
    Ok(())
}
