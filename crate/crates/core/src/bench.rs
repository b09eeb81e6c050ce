//! Compute/communication timing and strong-scaling sweeps.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::distributed::{sample_pool, train_inproc, RunOptions};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::scalar::{Precision, Scalar};

pub const TIMING_HEADER: &str = "p,epoch,compute_sec,comm_sec,wall_sec,loss";
pub const TIMING_FORMAT: &str = "# format=1";

/// Per-epoch timers. Compute covers forward, backward and the optimizer;
/// communication is time blocked in collectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingBreakdown {
    pub p: usize,
    pub epoch: usize,
    pub resolution: usize,
    pub batch: usize,
    pub compute_sec: f64,
    pub comm_sec: f64,
    pub wall_sec: f64,
}

/// One row of the timing CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub p: usize,
    pub epoch: usize,
    pub compute_sec: f64,
    pub comm_sec: f64,
    pub wall_sec: f64,
    pub loss: f64,
}

impl TimingRow {
    pub fn new(t: &TimingBreakdown, loss: f64) -> Self {
        Self {
            p: t.p,
            epoch: t.epoch,
            compute_sec: t.compute_sec,
            comm_sec: t.comm_sec,
            wall_sec: t.wall_sec,
            loss,
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{}",
            self.p, self.epoch, self.compute_sec, self.comm_sec, self.wall_sec, self.loss
        )
    }
}

/// Appends rows, writing the header first when the file is empty.
pub fn append_timing_csv(path: &std::path::Path, rows: &[TimingRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{TIMING_FORMAT}")?;
        writeln!(f, "{TIMING_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    Ok(())
}

pub fn read_timing_csv<R: BufRead>(r: R) -> Result<Vec<TimingRow>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if t == TIMING_HEADER {
            saw_header = true;
            continue;
        }
        let bad = |what: &str| Error::Format(format!("timing CSV line {}: {what}", i + 1));
        let f: Vec<&str> = t.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("not a number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("not an integer"));
        out.push(TimingRow {
            p: int(f[0])?,
            epoch: int(f[1])?,
            compute_sec: num(f[2])?,
            comm_sec: num(f[3])?,
            wall_sec: num(f[4])?,
            loss: num(f[5])?,
        });
    }
    if !saw_header {
        return Err(Error::Format(format!("timing CSV lacks the `{TIMING_HEADER}` header")));
    }
    Ok(out)
}

/// Result of a sweep over worker counts.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<TimingRow>,
}

impl ScalingReport {
    /// Mean per-epoch `(compute, comm, wall)` for worker count `p`.
    pub fn mean(&self, p: usize) -> Option<(f64, f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.p == p).collect();
        if rows.is_empty() {
            return None;
        }
        let k = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.compute_sec).sum::<f64>() / k,
            rows.iter().map(|r| r.comm_sec).sum::<f64>() / k,
            rows.iter().map(|r| r.wall_sec).sum::<f64>() / k,
        ))
    }

    pub fn worker_counts(&self) -> Vec<usize> {
        let mut ps: Vec<usize> = self.rows.iter().map(|r| r.p).collect();
        ps.dedup();
        ps
    }

    /// Human-readable speedup table relative to the first worker count.
    pub fn summary(&self) -> String {
        let ps = self.worker_counts();
        let Some(base) = ps.first().and_then(|&p| self.mean(p)) else {
            return String::new();
        };
        let mut s = String::from("p  compute_sec  comm_sec  wall_sec  compute_speedup  wall_speedup\n");
        for p in ps {
            let (c, m, w) = self.mean(p).expect("rows for p");
            s.push_str(&format!(
                "{p:<3}{c:>11.4}{m:>10.4}{w:>10.4}{:>17.2}{:>14.2}\n",
                base.0 / c,
                base.2 / w
            ));
        }
        s
    }
}

fn sweep_typed<S: Scalar>(
    cfg: &RunConfig,
    p_list: &[usize],
    epochs: usize,
    instrument: bool,
) -> Result<ScalingReport> {
    let mut rows = Vec::new();
    for &p in p_list {
        let mut c = cfg.clone();
        c.train.workers = p;
        let plan = c.shard_plan()?;
        let samples = Arc::new(sample_pool(c.data.c_min, c.data.c_max, plan.samples, c.train.seed)?);
        let mut model = Generator::<S>::new(c.generator_config())?;
        model.set_bn_momentum(c.model.bn_momentum)?;
        let mut opts = RunOptions::new(p, epochs);
        opts.timeout = c.timeout();
        opts.instrument = instrument;
        let out = train_inproc(model, plan, samples, c.engine_config(), &opts, None)?;
        rows.extend(out.epochs.iter().map(|e| TimingRow::new(&e.timing, e.mean_loss)));
    }
    Ok(ScalingReport { rows })
}

/// Trains `epochs` epochs of `cfg` for every worker count in `p_list`
/// (in-process transport) and collects the per-epoch timers.
pub fn run_scaling_sweep(cfg: &RunConfig, p_list: &[usize], epochs: usize) -> Result<ScalingReport> {
    for &p in p_list {
        if cfg.data.batch < p || p == 0 {
            return Err(Error::Config(format!(
                "batch size {} cannot be split over {p} workers",
                cfg.data.batch
            )));
        }
    }
    match cfg.model.precision {
        Precision::F32 => sweep_typed::<f32>(cfg, p_list, epochs, true),
        Precision::F64 => sweep_typed::<f64>(cfg, p_list, epochs, true),
    }
}

/// Relative wall-time cost of the timers: `pairs` alternating runs with and
/// without instrumentation, comparing the fastest of each.
pub fn instrumentation_overhead(cfg: &RunConfig, epochs: usize, pairs: usize) -> Result<f64> {
    let p = cfg.train.workers;
    let mut best = [f64::INFINITY; 2];
    for _ in 0..pairs.max(1) {
        for (slot, instrument) in [(0, true), (1, false)] {
            let t = Instant::now();
            match cfg.model.precision {
                Precision::F32 => sweep_typed::<f32>(cfg, &[p], epochs, instrument)?,
                Precision::F64 => sweep_typed::<f64>(cfg, &[p], epochs, instrument)?,
            };
            best[slot] = best[slot].min(t.elapsed().as_secs_f64());
        }
    }
    Ok((best[0] - best[1]) / best[1])
}
