//! Per-sample inference wall-clock.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::TaskSample;
use crate::error::{Error, Result};
use crate::expert::AdapterExpert;
use crate::inference::{predict, InferenceConfig};
use crate::prototypes::PrototypePool;

pub const WARMUP: usize = 10;
pub const MIN_TIMED: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup: usize,
    pub timed: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
}

/// Time `timed` single-sample predictions after [`WARMUP`] untimed ones,
/// cycling through `samples` as needed.
pub fn timing_report(
    experts: &[AdapterExpert],
    pool: &PrototypePool,
    samples: &[TaskSample],
    config: &InferenceConfig,
    timed: usize,
) -> Result<TimingReport> {
    if timed < MIN_TIMED {
        return Err(Error::Invalid(format!(
            "timing needs at least {MIN_TIMED} samples, got {timed}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cycle = samples.iter().cycle();
    for s in cycle.by_ref().take(WARMUP) {
        predict(&s.features, &s.msa_features, experts, pool, config)?;
    }
    let mut times = Vec::with_capacity(timed);
    for s in cycle.take(timed) {
        let start = Instant::now();
        let r = predict(&s.features, &s.msa_features, experts, pool, config)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(r);
    }
    let mean_s = times.iter().sum::<f64>() / timed as f64;
    times.sort_by(f64::total_cmp);
    let median_s = if timed.is_multiple_of(2) {
        (times[timed / 2 - 1] + times[timed / 2]) / 2.0
    } else {
        times[timed / 2]
    };
    let p95_s = times[((timed as f64 * 0.95).ceil() as usize).clamp(1, timed) - 1];
    Ok(TimingReport {
        warmup: WARMUP,
        timed,
        mean_s,
        median_s,
        p95_s,
    })
}
