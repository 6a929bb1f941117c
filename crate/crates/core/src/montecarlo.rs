//! Seeded batches of simulation runs and the six-cell shield/certificate
//! matrix, with aggregate statistics and Wilson score intervals. Batches are
//! reproducible: the per-run seeds depend only on the base seed, and parallel
//! execution preserves run order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certcontrol::CertMode;
use crate::config::ScenarioConfig;
use crate::rng::Rng;
use crate::simengine::{self, RunResult};

/// Seed for run `i` is the `i+1`-th output of the generator seeded with the
/// base seed, so any prefix of a larger batch reuses the same seeds.
pub fn seeds_for(base_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = Rng::new(base_seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Wilson score interval for a binomial proportion. Degenerate tallies pin
/// the corresponding bound exactly to 0 or 1.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = p + z2 / (2.0 * nf);
    let margin = z * ((p * (1.0 - p) + z2 / (4.0 * nf)) / nf).sqrt();
    let lo = if successes == 0 {
        0.0
    } else {
        ((center - margin) / denom).max(0.0)
    };
    let hi = if successes == n {
        1.0
    } else {
        ((center + margin) / denom).min(1.0)
    };
    (lo, hi)
}

/// Aggregates over one batch. Aborted runs are excluded from the fractions
/// and the mean and reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub n: usize,
    pub base_seed: u64,
    pub aborted: usize,
    pub mean_distance: f64,
    pub safe_fraction: f64,
    pub reached_end_fraction: f64,
    pub safe_ci: (f64, f64),
    pub false_det_activated: u64,
    pub correct_det_activated: u64,
    pub rejected_true: u64,
    pub rejected_false: u64,
    pub shield_ignored: u64,
}

fn summarize(n: usize, base_seed: u64, results: &[RunResult]) -> BatchReport {
    let completed: Vec<&RunResult> = results.iter().filter(|r| !r.aborted()).collect();
    let c = completed.len();
    let safe = completed.iter().filter(|r| r.safe).count() as u64;
    let reached = completed.iter().filter(|r| r.reached_end).count();
    let mean_distance = if c == 0 {
        0.0
    } else {
        completed.iter().map(|r| r.distance as f64).sum::<f64>() / c as f64
    };
    let frac = |k: usize| if c == 0 { 0.0 } else { k as f64 / c as f64 };
    BatchReport {
        n,
        base_seed,
        aborted: results.len() - c,
        mean_distance,
        safe_fraction: frac(safe as usize),
        reached_end_fraction: frac(reached),
        safe_ci: wilson_interval(safe, c as u64, 1.96),
        false_det_activated: completed.iter().map(|r| r.false_det_activated).sum(),
        correct_det_activated: completed.iter().map(|r| r.correct_det_activated).sum(),
        rejected_true: completed.iter().map(|r| r.rejected_true).sum(),
        rejected_false: completed.iter().map(|r| r.rejected_false).sum(),
        shield_ignored: completed.iter().map(|r| r.shield_ignored).sum(),
    }
}

fn run_all(cfg: &ScenarioConfig, seeds: &[u64], jobs: usize) -> Vec<RunResult> {
    if jobs <= 1 {
        seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| simengine::run(cfg, s, i as u64, None))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("worker pool builds");
        pool.install(|| {
            seeds
                .par_iter()
                .enumerate()
                .map(|(i, &s)| simengine::run(cfg, s, i as u64, None))
                .collect()
        })
    }
}

pub fn run_batch(cfg: &ScenarioConfig, n: usize, base_seed: u64, jobs: usize) -> BatchReport {
    let seeds = seeds_for(base_seed, n);
    let results = run_all(cfg, &seeds, jobs);
    summarize(n, base_seed, &results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub shield: bool,
    pub cert: CertMode,
    #[serde(flatten)]
    pub stats: BatchReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<CellReport>,
}

/// All six shield/certificate cells over the same base seed, so every cell
/// sees the same per-run seed sequence.
pub fn run_matrix(cfg: &ScenarioConfig, n: usize, base_seed: u64, jobs: usize) -> MatrixReport {
    let mut cells = Vec::new();
    for shield in [false, true] {
        for cert in [CertMode::Off, CertMode::NoStop, CertMode::On] {
            let mut cell_cfg = cfg.clone();
            cell_cfg.shield = shield;
            cell_cfg.cert = cert;
            cells.push(CellReport {
                shield,
                cert,
                stats: run_batch(&cell_cfg, n, base_seed, jobs),
            });
        }
    }
    MatrixReport { cells }
}

fn cert_label(cert: CertMode) -> &'static str {
    match cert {
        CertMode::Off => "Off",
        CertMode::NoStop => "NoStop",
        CertMode::On => "On",
    }
}

/// Fixed-width text table, one column per cell.
pub fn render_table(report: &MatrixReport) -> String {
    const LABEL: usize = 16;
    const CELL: usize = 17;
    let mut out = String::new();
    let mut row = |label: &str, cells: Vec<String>| {
        out.push_str(&format!("{label:<LABEL$}"));
        for c in cells {
            out.push_str(&format!("{c:>CELL$}"));
        }
        out.push('\n');
    };
    row(
        "",
        report
            .cells
            .iter()
            .map(|c| {
                format!(
                    "shield {}/{}",
                    if c.shield { "on" } else { "off" },
                    cert_label(c.cert)
                )
            })
            .collect(),
    );
    let each = |f: &dyn Fn(&CellReport) -> String| report.cells.iter().map(f).collect::<Vec<_>>();
    row("Distance", each(&|c| format!("{:.1}", c.stats.mean_distance)));
    row("Safe", each(&|c| format!("{:.3}", c.stats.safe_fraction)));
    row(
        "Safe 95% CI",
        each(&|c| format!("[{:.3}, {:.3}]", c.stats.safe_ci.0, c.stats.safe_ci.1)),
    );
    row(
        "Reached end",
        each(&|c| format!("{:.3}", c.stats.reached_end_fraction)),
    );
    row(
        "False Det.",
        each(&|c| c.stats.false_det_activated.to_string()),
    );
    row(
        "Correct Det.",
        each(&|c| c.stats.correct_det_activated.to_string()),
    );
    row("Rejected true", each(&|c| c.stats.rejected_true.to_string()));
    row(
        "Rejected false",
        each(&|c| c.stats.rejected_false.to_string()),
    );
    row("Ignored", each(&|c| c.stats.shield_ignored.to_string()));
    row("Aborted", each(&|c| c.stats.aborted.to_string()));
    out
}
