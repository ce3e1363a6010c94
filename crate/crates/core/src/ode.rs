//! Continuous-time limit of the load/toll process.
//!
//! With `ε = a/μ` and slow time `t = a n`, the coupled system is
//!
//! ```text
//! ẋ = (h(x, p) − x) / ε
//! ṗ = −p + x ⊙ ℓ'(x)
//! ```
//!
//! Its fast subsystem at frozen `p` is `ẋ = h(x, p) − x` and its slow
//! subsystem, with the load slaved to `x̄(p)`, is `ṗ = −p + x̄(p) ⊙ ℓ'(x̄(p))`.
//! All three are integrated with classical fixed-step RK4.
//!
//! Step sizes follow one rule. Let `ρ` be the largest Gershgorin row sum of
//! `∇ₓh − I` over a few reference states: the initial state, the SUE at the
//! initial toll and the equilibrium. The step is then `min(base, ε/ρ)`, with
//! `base = ε/20` for the coupled system and `1e-2` for the fast flow. At the
//! six-link operating points with β = 100 `ρ` reaches several hundred, and `ε/20` alone
//! would leave RK4 outside its stability region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    h_jacobian_x, logit_load, logit_load_into, solve_equilibrium_toll, solve_sue_with, sue_price_sensitivity,
    EquilibriumParams, SolverOptions,
};
use crate::error::{Error, Result};
use crate::network::ParallelNetwork;
use crate::series::{write_trajectory_csv, TrajectoryRow};

/// Default slow-time horizon for convergence runs.
pub const DEFAULT_HORIZON: f64 = 30.0;
/// Default step for the fast and slow subsystems.
pub const DEFAULT_SUBSYSTEM_DT: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    /// Timescale ratio `ε = a/μ`.
    pub epsilon: f64,
    pub dt: f64,
    /// Final slow time `T`.
    pub horizon: f64,
    pub initial_load: Vec<f64>,
    pub initial_toll: Vec<f64>,
    pub record_every: usize,
}

impl OdeConfig {
    /// Zero initial state with the step chosen by [`stable_coupled_dt`].
    pub fn new(net: &ParallelNetwork, params: &EquilibriumParams, epsilon: f64, horizon: f64) -> Result<Self> {
        let r = net.len();
        let initial_load = vec![0.0; r];
        let initial_toll = vec![0.0; r];
        let dt = stable_coupled_dt(net, params, epsilon, &initial_load, &initial_toll)?;
        Ok(Self {
            epsilon,
            dt,
            horizon,
            initial_load,
            initial_toll,
            record_every: 1,
        })
    }

    pub fn validate(&self, net: &ParallelNetwork) -> Result<()> {
        net.check_len(&self.initial_load)?;
        net.check_len(&self.initial_toll)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.dt > 0.0 && self.dt <= self.epsilon / 10.0) {
            return Err(Error::Parameter(format!(
                "dt = {} must lie in (0, epsilon/10 = {}]",
                self.dt,
                self.epsilon / 10.0
            )));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Parameter(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        if self.record_every == 0 {
            return Err(Error::Parameter("record_every must be positive".into()));
        }
        if self.initial_load.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter("initial load must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Largest Gershgorin row sum of `∇ₓh(x, p) − I`.
pub fn stiffness(net: &ParallelNetwork, x: &[f64], p: &[f64], params: &EquilibriumParams) -> Result<f64> {
    let jac = h_jacobian_x(net, x, p, params)?;
    Ok(jac
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, v)| if i == j { (v - 1.0).abs() } else { v.abs() })
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}

fn reference_stiffness(
    net: &ParallelNetwork,
    params: &EquilibriumParams,
    x0: &[f64],
    p0: &[f64],
) -> Result<f64> {
    let sue0 = solve_sue_with(net, p0, params, &SolverOptions::default(), None)?.load;
    let eq = solve_equilibrium_toll(net, params)?;
    Ok(stiffness(net, x0, p0, params)?
        .max(stiffness(net, &sue0, p0, params)?)
        .max(stiffness(net, &eq.sue_load, &eq.toll, params)?))
}

/// `min(ε/20, ε/ρ)` for the coupled system.
pub fn stable_coupled_dt(
    net: &ParallelNetwork,
    params: &EquilibriumParams,
    epsilon: f64,
    x0: &[f64],
    p0: &[f64],
) -> Result<f64> {
    let rho = reference_stiffness(net, params, x0, p0)?;
    Ok((epsilon / 20.0).min(epsilon / rho))
}

/// `min(1e-2, 1/ρ)` for the fast flow at frozen toll `p`.
pub fn stable_fast_dt(net: &ParallelNetwork, params: &EquilibriumParams, x0: &[f64], p: &[f64]) -> Result<f64> {
    let sue = solve_sue_with(net, p, params, &SolverOptions::default(), None)?.load;
    let rho = stiffness(net, x0, p, params)?.max(stiffness(net, &sue, p, params)?);
    Ok(DEFAULT_SUBSYSTEM_DT.min(1.0 / rho))
}

/// Load/toll path sampled at slow times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTrajectory {
    pub times: Vec<f64>,
    pub load: Vec<Vec<f64>>,
    pub toll: Vec<Vec<f64>>,
}

impl ContinuousTrajectory {
    pub fn final_load(&self) -> &[f64] {
        self.load.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_toll(&self) -> &[f64] {
        self.toll.last().map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Same layout as the discrete trajectory CSV, with `t` as first column.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let links = self.load.first().map_or(0, Vec::len);
        let rows = (0..self.times.len()).map(|k| TrajectoryRow {
            index: crate::series::fmt_float(self.times[k]),
            load: &self.load[k],
            toll: &self.toll[k],
            sample: None,
        });
        write_trajectory_csv(out, "t", links, false, rows)
    }
}

/// Fixed-step classical RK4 for `ẏ = f(y)`, recording every `record_every` steps
/// and always the final state.
fn rk4<F>(y0: Vec<f64>, dt: f64, horizon: f64, record_every: usize, mut f: F) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let steps = (horizon / dt).ceil() as usize;
    let h = if steps == 0 { 0.0 } else { horizon / steps as f64 };
    let dim = y0.len();
    let mut y = y0;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut tmp = vec![0.0; dim];
    let mut times = vec![0.0];
    let mut states = vec![y.clone()];

    for step in 1..=steps {
        f(&y, &mut k1)?;
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(&tmp, &mut k2)?;
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(&tmp, &mut k3)?;
        for i in 0..dim {
            tmp[i] = y[i] + h * k3[i];
        }
        f(&tmp, &mut k4)?;
        for i in 0..dim {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t = step as f64 * h;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step, t });
        }
        if step % record_every == 0 || step == steps {
            times.push(t);
            states.push(y.clone());
        }
    }
    Ok((times, states))
}

/// `(ẋ, ṗ)` of the coupled system.
pub fn coupled_vector_field(
    net: &ParallelNetwork,
    params: &EquilibriumParams,
    epsilon: f64,
    x: &[f64],
    p: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = logit_load(net, x, p, params)?;
    let dx = h.iter().zip(x).map(|(hi, xi)| (hi - xi) / epsilon).collect();
    let dp = net
        .links()
        .iter()
        .zip(x.iter().zip(p))
        .map(|(l, (&xi, &pi))| -pi + xi * l.derivative(xi))
        .collect();
    Ok((dx, dp))
}

/// RK4 on the coupled system from `cfg`'s initial state to `cfg.horizon`.
pub fn integrate_coupled(
    cfg: &OdeConfig,
    net: &ParallelNetwork,
    params: &EquilibriumParams,
) -> Result<ContinuousTrajectory> {
    cfg.validate(net)?;
    let r = net.len();
    let eps = cfg.epsilon;
    let mut h = Vec::with_capacity(r);
    let y0: Vec<f64> = cfg.initial_load.iter().chain(&cfg.initial_toll).copied().collect();
    let (times, states) = rk4(y0, cfg.dt, cfg.horizon, cfg.record_every, |y, dy| {
        let (x, p) = y.split_at(r);
        // RK4 stages may dip a hair below zero near an empty link; latency is
        // only defined on [0, ∞).
        let xc: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        logit_load_into(net, &xc, p, params, &mut h);
        for i in 0..r {
            dy[i] = (h[i] - x[i]) / eps;
            dy[r + i] = -p[i] + xc[i] * net.links()[i].derivative(xc[i]);
        }
        Ok(())
    })?;
    let (load, toll) = states
        .into_iter()
        .map(|s| {
            let (x, p) = s.split_at(r);
            (x.to_vec(), p.to_vec())
        })
        .unzip();
    Ok(ContinuousTrajectory { times, load, toll })
}

/// RK4 on `ẋ = h(x, p) − x` at frozen `p`.
pub fn integrate_fast(
    x0: &[f64],
    p: &[f64],
    net: &ParallelNetwork,
    params: &EquilibriumParams,
    dt: f64,
    horizon: f64,
) -> Result<ContinuousTrajectory> {
    net.check_len(x0)?;
    net.check_len(p)?;
    check_step(dt, horizon)?;
    let r = net.len();
    let mut h = Vec::with_capacity(r);
    let (times, load) = rk4(x0.to_vec(), dt, horizon, 1, |x, dx| {
        let xc: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        logit_load_into(net, &xc, p, params, &mut h);
        for i in 0..r {
            dx[i] = h[i] - x[i];
        }
        Ok(())
    })?;
    let toll = vec![p.to_vec(); times.len()];
    Ok(ContinuousTrajectory { times, load, toll })
}

/// RK4 on `ṗ = −p + x̄(p) ⊙ ℓ'(x̄(p))`, re-solving `x̄` at every stage from
/// the previous solution.
pub fn integrate_slow(
    p0: &[f64],
    net: &ParallelNetwork,
    params: &EquilibriumParams,
    dt: f64,
    horizon: f64,
) -> Result<ContinuousTrajectory> {
    net.check_len(p0)?;
    check_step(dt, horizon)?;
    let r = net.len();
    let opts = SolverOptions {
        sue_tol: 1e-13,
        ..SolverOptions::default()
    };
    let mut warm: Option<Vec<f64>> = None;
    let (times, toll) = rk4(p0.to_vec(), dt, horizon, 1, |p, dp| {
        let sol = solve_sue_with(net, p, params, &opts, warm.as_deref())?;
        for i in 0..r {
            let x = sol.load[i];
            dp[i] = -p[i] + x * net.links()[i].derivative(x);
        }
        warm = Some(sol.load);
        Ok(())
    })?;
    let load = toll
        .iter()
        .map(|p| solve_sue_with(net, p, params, &opts, None).map(|s| s.load))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContinuousTrajectory { times, load, toll })
}

fn check_step(dt: f64, horizon: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parameter(format!("dt must be > 0, got {dt}")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Parameter(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    Ok(())
}

/// Which subsystem to check for cooperativity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Field {
    /// `f(x) = h(x, p) − x` at the given toll.
    Fast { toll: Vec<f64> },
    /// `f(p) = −p + x̄(p) ⊙ ℓ'(x̄(p))`.
    Slow,
}

/// Axis-aligned box inside the open positive orthant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub seed: u64,
}

impl SampleDomain {
    /// `[lo, hi]^dim`.
    pub fn cube(lo: f64, hi: f64, dim: usize, seed: u64) -> Self {
        Self { lo: vec![lo; dim], hi: vec![hi; dim], seed }
    }

    /// `[c (1 − rel) + floor, c (1 + rel) + 2 floor]` per coordinate.
    pub fn around(center: &[f64], rel: f64, floor: f64, seed: u64) -> Self {
        Self {
            lo: center.iter().map(|c| c * (1.0 - rel) + floor).collect(),
            hi: center.iter().map(|c| c * (1.0 + rel) + 2.0 * floor).collect(),
            seed,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.lo.len() != dim || self.hi.len() != dim {
            return Err(Error::Shape { expected: dim, actual: self.lo.len().min(self.hi.len()) });
        }
        for (lo, hi) in self.lo.iter().zip(&self.hi) {
            if !(*lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(Error::Parameter(format!(
                    "sample box [{lo}, {hi}] must lie inside the open positive orthant"
                )));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(&lo, &hi)| rng.random_range(lo..hi)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooperativityReport {
    /// Smallest off-diagonal Jacobian entry over all samples (P-i).
    pub offdiag_min: f64,
    /// Off-diagonal sign pattern gives a strongly connected graph at every sample (P-ii).
    pub irreducible: bool,
    /// `min_i f_i(0)` (P-iii).
    pub f_at_zero_min: f64,
    /// A point `y` with `f(y) < 0` componentwise (P-iv).
    pub dominating_point: Option<Vec<f64>>,
    /// Slow field only: largest diagonal of `∂x̄/∂p` over the samples.
    pub sensitivity_diag_max: Option<f64>,
    pub samples: usize,
}

impl CooperativityReport {
    pub fn passed(&self) -> bool {
        self.offdiag_min >= -1e-9
            && self.irreducible
            && self.f_at_zero_min >= 0.0
            && self.dominating_point.is_some()
            && self.sensitivity_diag_max.is_none_or(|v| v < 0.0)
    }
}

/// Strong connectivity of the graph with an edge `i → j` wherever `m[i][j] ≠ 0`.
pub fn is_irreducible(m: &[Vec<f64>]) -> bool {
    let n = m.len();
    if n <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { m[i][j] } else { m[j][i] };
                if i != j && w != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

fn fast_field(net: &ParallelNetwork, params: &EquilibriumParams, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let h = logit_load(net, x, p, params)?;
    Ok(h.iter().zip(x).map(|(a, b)| a - b).collect())
}

fn slow_field(net: &ParallelNetwork, params: &EquilibriumParams, p: &[f64]) -> Result<Vec<f64>> {
    let x = solve_sue_with(net, p, params, &SolverOptions::default(), None)?.load;
    Ok(net
        .links()
        .iter()
        .zip(x.iter().zip(p))
        .map(|(l, (&xi, &pi))| -pi + xi * l.derivative(xi))
        .collect())
}

/// Samples the domain and checks the four cooperative-system conditions.
///
/// Fast-field Jacobians are the closed form `∇ₓh − I`. Slow-field Jacobians are `diag(ℓ' + x̄ ℓ'') · ∂x̄/∂p` with `∂x̄/∂p` from
/// [`sue_price_sensitivity`].
pub fn check_cooperativity(
    field: &Field,
    net: &ParallelNetwork,
    params: &EquilibriumParams,
    domain: &SampleDomain,
    n_samples: usize,
) -> Result<CooperativityReport> {
    let r = net.len();
    domain.validate(r)?;
    if n_samples == 0 {
        return Err(Error::Empty("cooperativity samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(domain.seed);
    let mut offdiag_min = f64::INFINITY;
    let mut irreducible = true;
    let mut diag_max = f64::NEG_INFINITY;

    for _ in 0..n_samples {
        let point = domain.sample(&mut rng);
        let jac = match field {
            Field::Fast { toll } => {
                net.check_len(toll)?;
                let mut jac = h_jacobian_x(net, &point, toll, params)?;
                jac.iter_mut().enumerate().for_each(|(i, row)| row[i] -= 1.0);
                jac
            }
            Field::Slow => {
                let sens = sue_price_sensitivity(net, &point, params)?;
                let x = solve_sue_with(net, &point, params, &SolverOptions::default(), None)?.load;
                for (i, row) in sens.iter().enumerate() {
                    diag_max = diag_max.max(row[i]);
                }
                sens.iter()
                    .enumerate()
                    .map(|(i, row)| {
                        let l = &net.links()[i];
                        let gain = l.derivative(x[i]) + x[i] * l.second_derivative(x[i]);
                        row.iter().map(|v| gain * v).collect()
                    })
                    .collect()
            }
        };
        for (i, row) in jac.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    offdiag_min = offdiag_min.min(*v);
                }
            }
        }
        irreducible &= is_irreducible(&jac);
    }

    let zero = vec![0.0; r];
    let d = params.demand();
    let (f_zero, candidate) = match field {
        Field::Fast { toll } => (fast_field(net, params, &zero, toll)?, vec![d + 1.0; r]),
        Field::Slow => {
            let top = net.links().iter().map(|l| l.derivative(d)).fold(0.0, f64::max);
            (slow_field(net, params, &zero)?, vec![d * top + 1.0; r])
        }
    };
    let f_candidate = match field {
        Field::Fast { toll } => fast_field(net, params, &candidate, toll)?,
        Field::Slow => slow_field(net, params, &candidate)?,
    };
    Ok(CooperativityReport {
        offdiag_min,
        irreducible,
        f_at_zero_min: f_zero.into_iter().fold(f64::INFINITY, f64::min),
        dominating_point: f_candidate.iter().all(|v| *v < 0.0).then_some(candidate),
        sensitivity_diag_max: matches!(field, Field::Slow).then_some(diag_max),
        samples: n_samples,
    })
}
