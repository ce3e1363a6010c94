//! Convergence statistics, social cost and seed ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{SimConfig, SimState, Trajectory};
use crate::equilibrium::{solve_equilibrium_toll, EquilibriumParams, EquilibriumSolution};
use crate::error::{Error, Result};
use crate::network::ParallelNetwork;

/// Default fraction of the horizon averaged by [`tail_mse`].
pub const DEFAULT_TAIL_FRACTION: f64 = 0.25;
/// Environment variable capping ensemble parallelism.
pub const THREADS_ENV: &str = "TOLLFLOW_THREADS";

fn squared_distance(x: &[f64], p: &[f64], x_ref: &[f64], p_ref: &[f64]) -> f64 {
    let dx: f64 = x.iter().zip(x_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    let dp: f64 = p.iter().zip(p_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    dx + dp
}

/// `‖X − x_ref‖² + ‖P − p_ref‖²` at every recorded step.
pub fn squared_distance_series(traj: &Trajectory, x_ref: &[f64], p_ref: &[f64]) -> Result<Vec<f64>> {
    let r = traj.links();
    for v in [x_ref, p_ref] {
        if v.len() != r {
            return Err(Error::Shape { expected: r, actual: v.len() });
        }
    }
    Ok(traj
        .steps
        .iter()
        .map(|rec| squared_distance(&rec.load, &rec.toll, x_ref, p_ref))
        .collect())
}

/// Squared distance to `(x̄(p̄), p̄)` at every recorded step.
pub fn squared_error_series(traj: &Trajectory, reference: &EquilibriumSolution) -> Result<Vec<f64>> {
    squared_distance_series(traj, &reference.sue_load, &reference.toll)
}

fn tail_len(len: usize, tail_fraction: f64) -> Result<usize> {
    if len == 0 {
        return Err(Error::Empty("series"));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::Parameter(format!("tail fraction must lie in (0, 1], got {tail_fraction}")));
    }
    Ok(((len as f64 * tail_fraction).ceil() as usize).clamp(1, len))
}

/// Mean of the last `ceil(tail_fraction · len)` entries.
pub fn tail_mse(series: &[f64], tail_fraction: f64) -> Result<f64> {
    let k = tail_len(series.len(), tail_fraction)?;
    Ok(series[series.len() - k..].iter().sum::<f64>() / k as f64)
}

/// Fraction of (seed, tail step) pairs whose squared distance is at least `delta`.
pub fn neighborhood_probability(ensemble: &[Vec<f64>], delta: f64, tail_fraction: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Parameter(format!("delta must be > 0, got {delta}")));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for series in ensemble {
        let k = tail_len(series.len(), tail_fraction)?;
        hits += series[series.len() - k..].iter().filter(|&&v| v >= delta).count();
        total += k;
    }
    if total == 0 {
        return Err(Error::Empty("ensemble"));
    }
    Ok(hits as f64 / total as f64)
}

/// `Σ x_i ℓ_i(x_i)`.
pub fn total_latency(net: &ParallelNetwork, x: &[f64]) -> Result<f64> {
    net.check_len(x)?;
    let mut total = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        total += xi * net.latency(i, xi)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    pub tail_fraction: f64,
    /// Thresholds for [`neighborhood_probability`].
    pub deltas: Vec<f64>,
    /// Keep the per-step ensemble mean of load and toll.
    pub keep_mean_path: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            tail_fraction: DEFAULT_TAIL_FRACTION,
            deltas: vec![0.1, 0.25, 1.0],
            keep_mean_path: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub seed: u64,
    pub tail_mse: f64,
    /// Euclidean distance of the final load to `x̄(p̄)`.
    pub final_x_err: f64,
    /// Euclidean distance of the final toll to `p̄`.
    pub final_p_err: f64,
    /// Tail-averaged load and toll.
    pub tail_load: Vec<f64>,
    pub tail_toll: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStats {
    pub tail_fraction: f64,
    pub per_seed: Vec<SeedStats>,
    pub mean_tail_mse: f64,
    /// Sample standard deviation across seeds; zero for a single seed.
    pub std_tail_mse: f64,
    /// `(δ, probability)` pairs.
    pub neighborhood_prob: Vec<(f64, f64)>,
    pub reference_load: Vec<f64>,
    pub reference_toll: Vec<f64>,
    #[serde(skip)]
    pub mean_load: Vec<Vec<f64>>,
    #[serde(skip)]
    pub mean_toll: Vec<Vec<f64>>,
}

impl ConvergenceStats {
    /// `std / √seeds`.
    pub fn standard_error(&self) -> f64 {
        self.std_tail_mse / (self.per_seed.len() as f64).sqrt()
    }

    /// Ensemble mean of the per-seed tail-averaged loads.
    pub fn tail_load(&self) -> Vec<f64> {
        mean_of(self.per_seed.iter().map(|s| s.tail_load.as_slice()))
    }

    pub fn tail_toll(&self) -> Vec<f64> {
        mean_of(self.per_seed.iter().map(|s| s.tail_toll.as_slice()))
    }

    /// Summary CSV: `seed,tail_mse,final_x_err,final_p_err`.
    pub fn write_summary_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        use crate::series::fmt_float;
        writeln!(out, "seed,tail_mse,final_x_err,final_p_err")?;
        for s in &self.per_seed {
            writeln!(
                out,
                "{},{},{},{}",
                s.seed,
                fmt_float(s.tail_mse),
                fmt_float(s.final_x_err),
                fmt_float(s.final_p_err)
            )?;
        }
        Ok(())
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for row in rows {
        if acc.is_empty() {
            acc = vec![0.0; row.len()];
        }
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
    acc
}

/// Per-step loads and tolls of one run.
type MeanPath = (Vec<Vec<f64>>, Vec<Vec<f64>>);

struct SeedRun {
    stats: SeedStats,
    series: Vec<f64>,
    path: Option<MeanPath>,
}

fn run_seed(cfg: &SimConfig, seed: u64, x_ref: &[f64], p_ref: &[f64], opts: &EnsembleOptions) -> Result<SeedRun> {
    let cfg = SimConfig { seed, ..cfg.clone() };
    let mut state = SimState::initial(&cfg)?;
    let steps = cfg.horizon;
    let tail = tail_len(steps + 1, opts.tail_fraction)?;
    let r = cfg.network.len();
    let mut series = Vec::with_capacity(steps + 1);
    let mut tail_load = vec![0.0; r];
    let mut tail_toll = vec![0.0; r];
    let mut path = opts.keep_mean_path.then(|| (Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)));

    for n in 0..=steps {
        if n > 0 {
            state.step(&cfg);
        }
        series.push(squared_distance(&state.load, &state.toll, x_ref, p_ref));
        if n + tail > steps {
            tail_load.iter_mut().zip(&state.load).for_each(|(a, v)| *a += v);
            tail_toll.iter_mut().zip(&state.toll).for_each(|(a, v)| *a += v);
        }
        if let Some((l, t)) = path.as_mut() {
            l.push(state.load.clone());
            t.push(state.toll.clone());
        }
    }
    tail_load.iter_mut().for_each(|v| *v /= tail as f64);
    tail_toll.iter_mut().for_each(|v| *v /= tail as f64);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    Ok(SeedRun {
        stats: SeedStats {
            seed,
            tail_mse: tail_mse(&series, opts.tail_fraction)?,
            final_x_err: dist(&state.load, x_ref),
            final_p_err: dist(&state.toll, p_ref),
            tail_load,
            tail_toll,
        },
        series,
        path,
    })
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))
}

/// Runs `cfg` once per seed (in parallel) and aggregates in seed order.
///
/// Distances are measured against `(x̄(p̄), p̄)` for the configuration's
/// `β` and `λ/μ`, whatever the toll step.
pub fn ensemble_run(cfg: &SimConfig, seeds: &[u64], opts: &EnsembleOptions) -> Result<ConvergenceStats> {
    let params = EquilibriumParams::from_rates(cfg.beta, cfg.demand.lambda(), cfg.demand.mu())?;
    let reference = solve_equilibrium_toll(&cfg.network, &params)?;
    ensemble_run_against(cfg, seeds, &reference.sue_load, &reference.toll, opts)
}

/// [`ensemble_run`] measured against an explicit reference state.
pub fn ensemble_run_against(
    cfg: &SimConfig,
    seeds: &[u64],
    x_ref: &[f64],
    p_ref: &[f64],
    opts: &EnsembleOptions,
) -> Result<ConvergenceStats> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    cfg.validate()?;
    cfg.network.check_len(x_ref)?;
    cfg.network.check_len(p_ref)?;

    let work = || -> Result<Vec<SeedRun>> {
        seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, seed, x_ref, p_ref, opts))
            .collect()
    };
    let runs = match thread_pool()? {
        Some(pool) => pool.install(work)?,
        None => work()?,
    };

    let values: Vec<f64> = runs.iter().map(|r| r.stats.tail_mse).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let all_series: Vec<Vec<f64>> = runs.iter().map(|r| r.series.clone()).collect();
    let neighborhood_prob = opts
        .deltas
        .iter()
        .map(|&d| neighborhood_probability(&all_series, d, opts.tail_fraction).map(|p| (d, p)))
        .collect::<Result<Vec<_>>>()?;

    let (mean_load, mean_toll) = if opts.keep_mean_path {
        let len = cfg.horizon + 1;
        let per_step = |pick: fn(&MeanPath) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..len)
                .map(|n| mean_of(runs.iter().filter_map(|r| r.path.as_ref()).map(|p| pick(p)[n].as_slice())))
                .collect()
        };
        (per_step(|p| &p.0), per_step(|p| &p.1))
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(ConvergenceStats {
        tail_fraction: opts.tail_fraction,
        per_seed: runs.into_iter().map(|r| r.stats).collect(),
        mean_tail_mse: mean,
        std_tail_mse: std,
        neighborhood_prob,
        reference_load: x_ref.to_vec(),
        reference_toll: p_ref.to_vec(),
        mean_load,
        mean_toll,
    })
}
