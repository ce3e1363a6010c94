//! Logit equilibria of the parallel-link network.
//!
//! * [`solve_sue`]: stochastic user equilibrium `x̄(p)`, the fixed point of
//!   `x = h(x, p)`, by a damped Newton-preconditioned fixed-point iteration.
//! * [`solve_sue_dual`]: the same point from the KKT conditions of the
//!   entropy-regularised potential, by nested bisection on the multiplier.
//! * [`socially_optimal_load`]: minimiser of total latency plus `(1/β)`-weighted
//!   entropy over the demand simplex, same nested bisection.
//! * [`solve_equilibrium_toll`]: the toll `p̄ = x̄(p̄) ⊙ ℓ'(x̄(p̄))`.
//!
//! The primal and dual SUE solvers share no code beyond latency evaluation so
//! each can serve as the other's oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LatencySpec, ParallelNetwork};

pub type Matrix = Vec<Vec<f64>>;

/// Dispersion `β` and steady-state demand `d = λ/μ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumParams {
    beta: f64,
    demand: f64,
}

impl EquilibriumParams {
    pub fn new(beta: f64, demand: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Parameter(format!(
                "dispersion beta must be finite and > 0 for equilibrium computations, got {beta}"
            )));
        }
        if !(demand.is_finite() && demand > 0.0) {
            return Err(Error::Parameter(format!(
                "demand must be finite and > 0, got {demand}"
            )));
        }
        Ok(Self { beta, demand })
    }

    /// Demand from mean inflow `λ` and mean discharge fraction `μ`.
    pub fn from_rates(beta: f64, lambda: f64, mu: f64) -> Result<Self> {
        check_rates(lambda, mu)?;
        Self::new(beta, lambda / mu)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn demand(&self) -> f64 {
        self.demand
    }
}

/// Tolerances and damping for the iterative solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// `‖x − h(x, p)‖∞` target for [`solve_sue`].
    pub sue_tol: f64,
    /// Largest step along the Newton-preconditioned fixed-point direction.
    pub sue_damping: f64,
    pub sue_max_iter: usize,
    /// `‖p − x̄(p) ⊙ ℓ'(x̄(p))‖∞` target for [`solve_equilibrium_toll`].
    pub toll_tol: f64,
    /// Initial `η` in `p ← (1 − η) p + η z(p)`; halved whenever the residual fails to drop.
    pub toll_damping: f64,
    pub toll_max_iter: usize,
    /// `|Σ y − d|` acceptance for the dual bisection, relative to `max(1, d)`.
    pub dual_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            sue_tol: 1e-10,
            sue_damping: 1.0,
            sue_max_iter: 500,
            toll_tol: 1e-9,
            toll_damping: 0.5,
            toll_max_iter: 10_000,
            dual_tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `‖x̄ − h(x̄, p̄)‖∞`
    pub sue: f64,
    /// `‖p̄ − x̄ ⊙ ℓ'(x̄)‖∞`
    pub toll: f64,
    /// Spread of the social KKT stationarity value across links.
    pub social_kkt: f64,
    /// `‖x̄(p̄) − ȳ‖∞`, zero when the toll fixed point is the social optimum.
    pub consistency: f64,
    /// Toll residual after each accepted outer iteration.
    pub toll_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub toll: usize,
    pub sue_total: usize,
}

/// `(x̄(p̄), p̄, ȳ^(β))` and how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub sue_load: Vec<f64>,
    pub toll: Vec<f64>,
    pub social_load: Vec<f64>,
    pub residuals: Residuals,
    pub iterations: IterationCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub jac_x: Matrix,
    pub jac_p: Matrix,
    /// `∂x̄_i/∂p_j` by central differences.
    pub sue_price_jacobian: Matrix,
}

/// Outcome of one primal SUE solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SueSolve {
    pub load: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

pub(crate) fn check_rates(lambda: f64, mu: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Parameter(format!("mean inflow lambda must be > 0, got {lambda}")));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Parameter(format!("mean outflow fraction mu must lie in (0, 1), got {mu}")));
    }
    Ok(())
}

fn check_state(net: &ParallelNetwork, x: &[f64], p: &[f64]) -> Result<()> {
    net.check_len(x)?;
    net.check_len(p)?;
    if let Some(&bad) = x.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::Domain { what: "link load", value: bad });
    }
    Ok(())
}

/// Logit shares from a cost vector, max-shifted so large `β c` cannot overflow.
pub(crate) fn logit_shares(costs: impl Iterator<Item = f64>, beta: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(costs.map(|c| -beta * c));
    let top = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - top).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// Perturbed best response: softmax of `−β (ℓ_i(x_i) + p_i)`.
///
/// `β = 0` is allowed here and gives the uniform split.
pub fn best_response_fractions(
    net: &ParallelNetwork,
    x: &[f64],
    p: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    check_state(net, x, p)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("dispersion beta must be finite and >= 0, got {beta}")));
    }
    let mut out = Vec::with_capacity(net.len());
    logit_shares(link_costs(net, x, p), beta, &mut out);
    Ok(out)
}

fn link_costs<'a>(
    net: &'a ParallelNetwork,
    x: &'a [f64],
    p: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    net.links()
        .iter()
        .zip(x.iter().zip(p))
        .map(|(l, (&xi, &pi))| l.eval(xi) + pi)
}

/// Mean-field load map `h(x, p) = (λ/μ) · softmax(−β c(x, p))`.
pub fn h_field(
    net: &ParallelNetwork,
    x: &[f64],
    p: &[f64],
    lambda: f64,
    mu: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_rates(lambda, mu)?;
    let mut shares = best_response_fractions(net, x, p, beta)?;
    let demand = lambda / mu;
    shares.iter_mut().for_each(|s| *s *= demand);
    Ok(shares)
}

/// `h` with the demand given directly.
pub fn logit_load(
    net: &ParallelNetwork,
    x: &[f64],
    p: &[f64],
    params: &EquilibriumParams,
) -> Result<Vec<f64>> {
    check_state(net, x, p)?;
    let mut out = Vec::with_capacity(net.len());
    logit_load_into(net, x, p, params, &mut out);
    Ok(out)
}

pub(crate) fn logit_load_into(
    net: &ParallelNetwork,
    x: &[f64],
    p: &[f64],
    params: &EquilibriumParams,
    out: &mut Vec<f64>,
) {
    logit_shares(link_costs(net, x, p), params.beta, out);
    out.iter_mut().for_each(|s| *s *= params.demand);
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Nonnegative toll whose SUE is `x`, the inverse of `p ↦ x̄(p)` up to a
/// uniform shift: `p_i = K − ℓ_i(x_i) − ln(x_i)/β` with the smallest `p_i`
/// equal to zero. Requires `x > 0` and `Σ x = d`.
pub fn inducing_toll(net: &ParallelNetwork, x: &[f64], params: &EquilibriumParams) -> Result<Vec<f64>> {
    net.check_len(x)?;
    if let Some(&bad) = x.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Parameter(format!("target load must be positive, got {bad}")));
    }
    let total: f64 = x.iter().sum();
    if (total - params.demand).abs() > 1e-9 * params.demand.max(1.0) {
        return Err(Error::Parameter(format!(
            "target load sums to {total}, demand is {}",
            params.demand
        )));
    }
    let potential: Vec<f64> = net
        .links()
        .iter()
        .zip(x)
        .map(|(l, &xi)| l.eval(xi) + xi.ln() / params.beta)
        .collect();
    let top = potential.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(potential.iter().map(|v| top - v).collect())
}

/// Stochastic user equilibrium `x̄(p)` with default options.
pub fn solve_sue(net: &ParallelNetwork, p: &[f64], params: &EquilibriumParams) -> Result<Vec<f64>> {
    solve_sue_with(net, p, params, &SolverOptions::default(), None).map(|s| s.load)
}

/// Primal SUE solve.
///
/// Iterates `x ← x + γ P(x) (h(x, p) − x)` where `P` is the inverse Jacobian of
/// the residual `x − h(x, p)`. That Jacobian is `diag(1 + β h ⊙ ℓ') − (β/d) h (h ⊙ ℓ')ᵀ`,
/// a diagonal minus a rank-one term, so `P` is applied in `O(R)` by
/// Sherman–Morrison. Its denominator `1 − (β/d) Σ h_i² ℓ'_i / (1 + β h_i ℓ'_i)` is
/// strictly positive because `Σ h_i = d`. `γ ≤ sue_damping` is backtracked
/// until the residual norm drops and the load stays nonnegative. Starts from
/// the uniform split unless a warm start is given. A solve whose line search
/// stalls at the rounding floor is returned as converged.
///
/// The positivity cap lets a vanishing link shrink only geometrically, so on
/// exit every component below `sue_tol` is reset to its share `h_i(x, p)`.
/// Those links barely move `h`, and the reset makes them accurate in relative
/// terms rather than just below the tolerance.
pub fn solve_sue_with(
    net: &ParallelNetwork,
    p: &[f64],
    params: &EquilibriumParams,
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> Result<SueSolve> {
    net.check_len(p)?;
    if let Some(&bad) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!("tolls must be finite, got {bad}")));
    }
    let r = net.len();
    let d = params.demand;
    let beta = params.beta;
    let mut x = match warm_start {
        Some(w) => {
            net.check_len(w)?;
            w.iter().map(|&v| v.max(0.0)).collect()
        }
        None => vec![d / r as f64; r],
    };

    let mut h = Vec::with_capacity(r);
    let mut trial = vec![0.0; r];
    let mut h_trial = Vec::with_capacity(r);
    let mut step = vec![0.0; r];
    let mut diag = vec![0.0; r];
    let mut slope = vec![0.0; r];

    logit_load_into(net, &x, p, params, &mut h);
    let mut residual = inf_norm_diff(&x, &h);
    let mut merit = sq_norm_diff(&x, &h);

    for iter in 0..opts.sue_max_iter {
        if residual < opts.sue_tol {
            return Ok(polish(net, p, params, opts, x, iter));
        }

        // P (h − x) via Sherman–Morrison on D − u vᵀ, u = h, v = (β/d) h ⊙ ℓ'.
        let mut v_dinv_f = 0.0;
        let mut v_dinv_u = 0.0;
        for i in 0..r {
            let lp = net.links()[i].derivative(x[i]);
            diag[i] = 1.0 + beta * h[i] * lp;
            slope[i] = beta / d * h[i] * lp;
            step[i] = (h[i] - x[i]) / diag[i];
            v_dinv_f += slope[i] * step[i];
            v_dinv_u += slope[i] * h[i] / diag[i];
        }
        let scale = v_dinv_f / (1.0 - v_dinv_u);
        for i in 0..r {
            step[i] += h[i] / diag[i] * scale;
        }

        let mut gamma = opts.sue_damping;
        for i in 0..r {
            if step[i] < 0.0 && x[i] > 0.0 {
                gamma = gamma.min(0.99 * x[i] / -step[i]);
            } else if step[i] < 0.0 {
                step[i] = 0.0;
            }
        }

        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..r {
                trial[i] = (x[i] + gamma * step[i]).max(0.0);
            }
            logit_load_into(net, &trial, p, params, &mut h_trial);
            let trial_merit = sq_norm_diff(&trial, &h_trial);
            if trial_merit < (1.0 - 1e-4 * gamma) * merit || trial_merit == 0.0 {
                accepted = true;
                merit = trial_merit;
                break;
            }
            gamma *= 0.5;
        }
        if !accepted {
            // The merit can stall just above a very tight tolerance: shares
            // carry relative error of order ε β max c.
            let cmax = link_costs(net, &x, p).fold(0.0, f64::max);
            if residual <= 16.0 * f64::EPSILON * d.max(1.0) * (1.0 + beta * cmax) {
                return Ok(polish(net, p, params, opts, x, iter));
            }
            return Err(Error::NoConvergence {
                solver: "solve_sue",
                iterations: iter,
                residual,
                history: Vec::new(),
            });
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut h, &mut h_trial);
        residual = inf_norm_diff(&x, &h);
    }
    if residual < opts.sue_tol {
        return Ok(polish(net, p, params, opts, x, opts.sue_max_iter));
    }
    Err(Error::NoConvergence {
        solver: "solve_sue",
        iterations: opts.sue_max_iter,
        residual,
        history: Vec::new(),
    })
}

fn polish(
    net: &ParallelNetwork,
    p: &[f64],
    params: &EquilibriumParams,
    opts: &SolverOptions,
    mut x: Vec<f64>,
    iterations: usize,
) -> SueSolve {
    let mut h = Vec::with_capacity(x.len());
    for _ in 0..2 {
        if !x.iter().any(|&v| v < opts.sue_tol) {
            break;
        }
        logit_load_into(net, &x, p, params, &mut h);
        for (xi, &hi) in x.iter_mut().zip(&h) {
            if *xi < opts.sue_tol {
                *xi = hi;
            }
        }
    }
    logit_load_into(net, &x, p, params, &mut h);
    let residual = inf_norm_diff(&x, &h);
    SueSolve { load: x, residual, iterations }
}

fn sq_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// SUE from the KKT system of its convex potential:
/// `ln y_i + β (ℓ_i(y_i) + p_i) = c` for a common `c = −βδ − 1`, `Σ y = d`.
pub fn solve_sue_dual(
    net: &ParallelNetwork,
    p: &[f64],
    params: &EquilibriumParams,
) -> Result<Vec<f64>> {
    net.check_len(p)?;
    if let Some(&bad) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!("tolls must be finite, got {bad}")));
    }
    dual_bisection(
        net,
        p,
        params,
        SolverOptions::default().dual_tol,
        "solve_sue_dual",
        LatencySpec::eval,
    )
}

/// Perturbed social optimum `ȳ^(β)`:
/// minimises `Σ y_i ℓ_i(y_i) + (1/β) Σ y_i ln y_i` subject to `Σ y_i = d`.
pub fn socially_optimal_load(net: &ParallelNetwork, params: &EquilibriumParams) -> Result<Vec<f64>> {
    let zeros = vec![0.0; net.len()];
    dual_bisection(
        net,
        &zeros,
        params,
        SolverOptions::default().dual_tol,
        "socially_optimal_load",
        LatencySpec::marginal_social_cost,
    )
}

/// Spread `max_i − min_i` of `m_i(y_i) + (1/β)(1 + ln y_i)`, with `m` the
/// marginal social cost. Zero at the perturbed social optimum.
pub fn social_kkt_residual(net: &ParallelNetwork, y: &[f64], beta: f64) -> f64 {
    let values: Vec<f64> = net
        .links()
        .iter()
        .zip(y)
        .map(|(l, &yi)| l.marginal_social_cost(yi) + (1.0 + yi.ln()) / beta)
        .collect();
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Solves `s + β (m_i(e^s) + offset_i) = c` per link for the level `c` at which
/// `Σ e^{s_i} = d`. `m_i` must be increasing on `[0, ∞)`.
fn dual_bisection(
    net: &ParallelNetwork,
    offsets: &[f64],
    params: &EquilibriumParams,
    tol: f64,
    solver: &'static str,
    m: fn(&LatencySpec, f64) -> f64,
) -> Result<Vec<f64>> {
    let beta = params.beta;
    let d = params.demand;
    let links = net.links();
    let r = links.len();
    let ln_d = d.ln();

    // At c_lo every y_i <= d/R; at c_hi the cheapest link alone carries d.
    let c_lo = (d / r as f64).ln()
        + beta
            * links
                .iter()
                .zip(offsets)
                .map(|(l, o)| m(l, 0.0) + o)
                .fold(f64::INFINITY, f64::min);
    let c_hi = ln_d
        + beta
            * links
                .iter()
                .zip(offsets)
                .map(|(l, o)| m(l, d) + o)
                .fold(f64::INFINITY, f64::min);
    if !(c_lo.is_finite() && c_hi.is_finite() && c_lo <= c_hi) {
        return Err(Error::Bracket {
            solver,
            detail: format!("multiplier bracket [{c_lo}, {c_hi}] is invalid"),
        });
    }

    // Within [c_lo, c_hi] every root satisfies y_i <= d.
    let solve_link = |i: usize, c: f64| -> f64 {
        let l = &links[i];
        let off = offsets[i];
        let phi = |s: f64| s + beta * (m(l, s.exp()) + off);
        let mut lo = c - beta * (m(l, d) + off);
        let mut hi = ln_d.min(c - beta * (m(l, 0.0) + off));
        if hi < lo {
            // only possible through rounding at the bracket edge
            hi = lo;
        }
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if phi(mid) < c {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let total = |c: f64| -> f64 { (0..r).map(|i| solve_link(i, c).exp()).sum() };

    let (mut lo, mut hi) = (c_lo, c_hi);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) < d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (t_lo, t_hi) = (total(lo), total(hi));
    let c = if (t_lo - d).abs() <= (t_hi - d).abs() { lo } else { hi };
    let y: Vec<f64> = (0..r).map(|i| solve_link(i, c).exp()).collect();
    let mismatch = (y.iter().sum::<f64>() - d).abs();
    if mismatch > tol * d.max(1.0) {
        return Err(Error::Bracket {
            solver,
            detail: format!("demand mismatch {mismatch:e} after bisection"),
        });
    }
    Ok(y)
}

/// Equilibrium toll `p̄` by damped iteration on `p ↦ x̄(p) ⊙ ℓ'(x̄(p))` from `p = 0`,
/// plus the social optimum for the consistency residual.
pub fn solve_equilibrium_toll(
    net: &ParallelNetwork,
    params: &EquilibriumParams,
) -> Result<EquilibriumSolution> {
    solve_equilibrium_toll_with(net, params, &SolverOptions::default())
}

pub fn solve_equilibrium_toll_with(
    net: &ParallelNetwork,
    params: &EquilibriumParams,
    opts: &SolverOptions,
) -> Result<EquilibriumSolution> {
    let r = net.len();
    let mut sue_total = 0;

    let mut eval = |p: &[f64], warm: Option<&[f64]>| -> Result<(SueSolve, Vec<f64>, f64)> {
        let sol = solve_sue_with(net, p, params, opts, warm)?;
        sue_total += sol.iterations;
        let z = net.marginal_costs(&sol.load);
        let res = inf_norm_diff(&z, p);
        Ok((sol, z, res))
    };

    let mut p = vec![0.0; r];
    let (mut sue, mut z, mut residual) = eval(&p, None)?;
    let mut history = vec![residual];
    let mut eta = opts.toll_damping;
    let mut iterations = 0;

    while residual >= opts.toll_tol {
        if iterations >= opts.toll_max_iter || eta < 1e-10 {
            return Err(Error::NoConvergence {
                solver: "solve_equilibrium_toll",
                iterations,
                residual,
                history,
            });
        }
        iterations += 1;
        let candidate: Vec<f64> = p
            .iter()
            .zip(&z)
            .map(|(pi, zi)| (1.0 - eta) * pi + eta * zi)
            .collect();
        let (c_sue, c_z, c_res) = eval(&candidate, Some(&sue.load))?;
        if c_res < residual {
            p = candidate;
            sue = c_sue;
            z = c_z;
            residual = c_res;
            history.push(residual);
        } else {
            eta *= 0.5;
        }
    }

    let social = socially_optimal_load(net, params)?;
    let social_kkt = social_kkt_residual(net, &social, params.beta);
    let consistency = inf_norm_diff(&sue.load, &social);
    Ok(EquilibriumSolution {
        residuals: Residuals {
            sue: sue.residual,
            toll: residual,
            social_kkt,
            consistency,
            toll_history: history,
        },
        iterations: IterationCounts {
            toll: iterations,
            sue_total,
        },
        sue_load: sue.load,
        toll: p,
        social_load: social,
    })
}

/// Analytic `∂h_i/∂x_j = β ℓ'_j(x_j) h_j (h_i/d − δ_ij)`.
///
/// At `x = x̄(p)` this reduces entrywise to `(1/d) β ℓ'_j x̄_i x̄_j` off the
/// diagonal and `β ℓ'_i (x̄_i²/d − x̄_i)` on it.
pub fn h_jacobian_x(
    net: &ParallelNetwork,
    x: &[f64],
    p: &[f64],
    params: &EquilibriumParams,
) -> Result<Matrix> {
    let h = logit_load(net, x, p, params)?;
    let d = params.demand;
    let beta = params.beta;
    let slopes: Vec<f64> = net.links().iter().zip(x).map(|(l, &xi)| l.derivative(xi)).collect();
    Ok(softmax_jacobian(&h, d, beta, |j| slopes[j]))
}

/// Analytic `∂h_i/∂p_j = β h_j (h_i/d − δ_ij)`.
pub fn h_jacobian_p(
    net: &ParallelNetwork,
    x: &[f64],
    p: &[f64],
    params: &EquilibriumParams,
) -> Result<Matrix> {
    let h = logit_load(net, x, p, params)?;
    Ok(softmax_jacobian(&h, params.demand, params.beta, |_| 1.0))
}

fn softmax_jacobian(h: &[f64], d: f64, beta: f64, dc: impl Fn(usize) -> f64) -> Matrix {
    let r = h.len();
    (0..r)
        .map(|i| {
            (0..r)
                .map(|j| {
                    let kron = if i == j { 1.0 } else { 0.0 };
                    beta * dc(j) * h[j] * (h[i] / d - kron)
                })
                .collect()
        })
        .collect()
}

/// `⟨x̄(p) − x̄(p'), p − p'⟩`; strictly negative unless `p − p'` is a multiple of `1`.
///
/// Both loads sum to `d`, so `p − p'` may be shifted by any constant. It is
/// centred at its load-weighted mean: a dominant link absorbs rounding in
/// `x̄`, and centring gives that link almost no weight, which keeps the sign
/// right even when the other links carry loads far below `ε d`.
pub fn monotonicity_witness(
    net: &ParallelNetwork,
    p: &[f64],
    p_other: &[f64],
    params: &EquilibriumParams,
) -> Result<f64> {
    let x = solve_sue(net, p, params)?;
    let x_other = solve_sue(net, p_other, params)?;
    let dp: Vec<f64> = p.iter().zip(p_other).map(|(a, b)| a - b).collect();
    let weight: f64 = x.iter().zip(&x_other).map(|(a, b)| a + b).sum();
    let centre = x.iter().zip(&x_other).zip(&dp).map(|((a, b), d)| (a + b) * d).sum::<f64>() / weight;
    Ok(x.iter()
        .zip(&x_other)
        .zip(&dp)
        .map(|((a, b), d)| (a - b) * (d - centre))
        .sum())
}

/// Step used by [`sue_price_sensitivity`].
pub const SENSITIVITY_STEP: f64 = 1e-5;

/// Central-difference Jacobian `J[i][j] = ∂x̄_i/∂p_j`.
///
/// Inner solves run to `1e-14` so the difference quotient is not polluted by
/// solver tolerance.
pub fn sue_price_sensitivity(
    net: &ParallelNetwork,
    p: &[f64],
    params: &EquilibriumParams,
) -> Result<Matrix> {
    net.check_len(p)?;
    let opts = SolverOptions {
        sue_tol: 1e-13,
        ..SolverOptions::default()
    };
    let r = net.len();
    let base = solve_sue_with(net, p, params, &opts, None)?.load;
    let mut jac = vec![vec![0.0; r]; r];
    let mut shifted = p.to_vec();
    for j in 0..r {
        shifted[j] = p[j] + SENSITIVITY_STEP;
        let up = solve_sue_with(net, &shifted, params, &opts, Some(&base))?.load;
        shifted[j] = p[j] - SENSITIVITY_STEP;
        let down = solve_sue_with(net, &shifted, params, &opts, Some(&base))?.load;
        shifted[j] = p[j];
        for i in 0..r {
            jac[i][j] = (up[i] - down[i]) / (2.0 * SENSITIVITY_STEP);
        }
    }
    Ok(jac)
}

/// All three Jacobians at one point.
pub fn sensitivity_report(
    net: &ParallelNetwork,
    x: &[f64],
    p: &[f64],
    params: &EquilibriumParams,
) -> Result<SensitivityReport> {
    Ok(SensitivityReport {
        jac_x: h_jacobian_x(net, x, p, params)?,
        jac_p: h_jacobian_p(net, x, p, params)?,
        sue_price_jacobian: sue_price_sensitivity(net, p, params)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_link() -> ParallelNetwork {
        ParallelNetwork::new(vec![
            LatencySpec::new([(1, 1.0)]).unwrap(),
            LatencySpec::new([(1, 2.0)]).unwrap(),
        ])
        .unwrap()
    }

    fn sym(r: usize) -> ParallelNetwork {
        ParallelNetwork::uniform("0:1, 2:1".parse().unwrap(), r).unwrap()
    }

    #[test]
    fn fractions_zero_beta_is_uniform() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let f = best_response_fractions(&net, &[0.3, 0.1, 2.0, 0.0, 1.0, 5.0], &[0.0; 6], 0.0).unwrap();
        for v in f {
            assert_relative_eq!(v, 1.0 / 6.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn fractions_two_link_hand_value() {
        // e^-1 / (e^-1 + e^-2)
        let f = best_response_fractions(&two_link(), &[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap();
        let expected = (-1f64).exp() / ((-1f64).exp() + (-2f64).exp());
        assert_relative_eq!(f[0], expected, max_relative = 1e-14);
        assert_relative_eq!(f[0], 0.731_058_578_6, epsilon = 1e-9);
        assert_relative_eq!(f.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fractions_survive_huge_costs() {
        let f = best_response_fractions(&two_link(), &[1e3, 1e3], &[0.0, 0.0], 1e4).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(f[0], 1.0);
    }

    #[test]
    fn fractions_errors() {
        let net = two_link();
        assert!(matches!(
            best_response_fractions(&net, &[1.0], &[0.0, 0.0], 1.0),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            best_response_fractions(&net, &[1.0, 1.0], &[0.0, 0.0], -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn h_field_sums_to_demand() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let h = h_field(&net, &[1.0; 6], &[0.0; 6], 0.1, 0.05, 0.0).unwrap();
        for v in &h {
            assert_relative_eq!(*v, 1.0 / 3.0, max_relative = 1e-14);
        }
        let h = h_field(&net, &[0.5, 0.4, 0.3, 0.3, 0.2, 0.2], &[0.0; 6], 0.1, 0.05, 1.0).unwrap();
        assert_relative_eq!(h.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
        assert!(h.iter().all(|&v| v > 0.0 && v < 2.0));
        assert!(h_field(&net, &[1.0; 6], &[0.0; 6], 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn inducing_toll_inverts_sue() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let params = EquilibriumParams::new(100.0, 2.0).unwrap();
        let target = [0.5, 0.4, 0.3, 0.3, 0.3, 0.2];
        let p = inducing_toll(&net, &target, &params).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0) && p.contains(&0.0));
        let x = solve_sue(&net, &p, &params).unwrap();
        for (a, b) in x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(inducing_toll(&net, &[1.0; 6], &params).is_err());
    }

    #[test]
    fn params_guard() {
        assert!(EquilibriumParams::new(0.0, 1.0).is_err());
        assert!(EquilibriumParams::new(1.0, 0.0).is_err());
        assert!(EquilibriumParams::new(f64::INFINITY, 1.0).is_err());
        let p = EquilibriumParams::from_rates(100.0, 0.1, 0.05).unwrap();
        assert_relative_eq!(p.demand(), 2.0);
    }

    #[test]
    fn symmetric_sue_splits_evenly() {
        let params = EquilibriumParams::new(37.0, 3.0).unwrap();
        for solver in [solve_sue, solve_sue_dual] {
            let x = solver(&sym(5), &[0.7; 5], &params).unwrap();
            for v in x {
                assert_relative_eq!(v, 0.6, max_relative = 1e-12);
            }
        }
    }

    /// Independent 1-D oracle for two links: bisection on x₁.
    fn two_link_oracle(net: &ParallelNetwork, p: [f64; 2], beta: f64, d: f64) -> f64 {
        let resid = |x1: f64| {
            let c1 = net.links()[0].eval(x1) + p[0];
            let c2 = net.links()[1].eval(d - x1) + p[1];
            x1 - d / (1.0 + (beta * (c1 - c2)).exp())
        };
        let (mut lo, mut hi) = (0.0, d);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if resid(mid) < 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn two_link_sue_matches_scalar_oracle() {
        let net = two_link();
        let params = EquilibriumParams::new(100.0, 1.0).unwrap();
        let oracle = two_link_oracle(&net, [0.0, 0.0], 100.0, 1.0);
        // close to the Wardrop split 2/3 at this dispersion
        assert!((oracle - 2.0 / 3.0).abs() < 1e-2);
        let primal = solve_sue(&net, &[0.0, 0.0], &params).unwrap();
        let dual = solve_sue_dual(&net, &[0.0, 0.0], &params).unwrap();
        assert_relative_eq!(primal[0], oracle, epsilon = 1e-10);
        assert_relative_eq!(dual[0], oracle, epsilon = 1e-10);
        assert_relative_eq!(primal[1], 1.0 - oracle, epsilon = 1e-10);
    }

    #[test]
    fn sue_is_shift_invariant() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let params = EquilibriumParams::new(100.0, 2.0).unwrap();
        let p = [0.1, 0.5, 0.2, 0.0, 0.3, 0.4];
        let base = solve_sue(&net, &p, &params).unwrap();
        let shifted: Vec<f64> = p.iter().map(|v| v + 3.25).collect();
        let moved = solve_sue(&net, &shifted, &params).unwrap();
        assert!(inf_norm_diff(&base, &moved) < 1e-10);
    }

    #[test]
    fn sue_rejects_bad_tolls() {
        let params = EquilibriumParams::new(1.0, 1.0).unwrap();
        assert!(solve_sue(&two_link(), &[f64::NAN, 0.0], &params).is_err());
        assert!(solve_sue_dual(&two_link(), &[0.0], &params).is_err());
    }

    #[test]
    fn sue_reports_non_convergence() {
        let params = EquilibriumParams::new(100.0, 2.0).unwrap();
        let opts = SolverOptions { sue_max_iter: 1, ..SolverOptions::default() };
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        match solve_sue_with(&net, &[0.0; 6], &params, &opts, None) {
            Err(Error::NoConvergence { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn social_optimum_two_link_large_beta() {
        // min x² + 2(1 − x)² at x = 2/3
        let params = EquilibriumParams::new(1e6, 1.0).unwrap();
        let y = socially_optimal_load(&two_link(), &params).unwrap();
        assert_relative_eq!(y[0], 2.0 / 3.0, epsilon = 1e-5);
        assert_relative_eq!(y.iter().sum::<f64>(), 1.0, epsilon = 1e-11);
    }

    #[test]
    fn social_optimum_kkt() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let params = EquilibriumParams::new(100.0, 2.0).unwrap();
        let y = socially_optimal_load(&net, &params).unwrap();
        assert!(social_kkt_residual(&net, &y, 100.0) < 1e-8);
        assert!((y.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        let ys = socially_optimal_load(&sym(4), &params).unwrap();
        for v in ys {
            assert_relative_eq!(v, 0.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn symmetric_toll_closed_form() {
        for r in [2usize, 3, 6] {
            for beta in [1.0, 50.0] {
                let params = EquilibriumParams::new(beta, 2.0).unwrap();
                let sol = solve_equilibrium_toll(&sym(r), &params).unwrap();
                let rf = r as f64;
                for i in 0..r {
                    assert_relative_eq!(sol.sue_load[i], 2.0 / rf, max_relative = 1e-10);
                    assert_relative_eq!(sol.toll[i], 8.0 / (rf * rf), max_relative = 1e-8);
                }
            }
        }
    }

    #[test]
    fn toll_ignores_latency_constants() {
        let net = ParallelNetwork::quadratic_family(4).unwrap();
        let params = EquilibriumParams::new(20.0, 2.0).unwrap();
        let a = solve_equilibrium_toll(&net, &params).unwrap();
        let b = solve_equilibrium_toll(&net.shifted(1.5).unwrap(), &params).unwrap();
        assert!(inf_norm_diff(&a.toll, &b.toll) < 1e-8);
    }

    #[test]
    fn six_link_toll_fixed_point() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let params = EquilibriumParams::new(100.0, 2.0).unwrap();
        let sol = solve_equilibrium_toll(&net, &params).unwrap();
        assert!(sol.residuals.toll < 1e-9);
        assert!(sol.residuals.consistency < 1e-6, "{:?}", sol.residuals);
        assert!(sol.toll.iter().all(|&p| p >= 0.0));
        assert!((sol.sue_load.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        assert!(sol.sue_load.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn jacobians_vanish_as_beta_shrinks() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let params = EquilibriumParams::new(1e-12, 2.0).unwrap();
        let x = [0.3, 0.2, 0.5, 0.1, 0.4, 0.5];
        for jac in [
            h_jacobian_x(&net, &x, &[0.0; 6], &params).unwrap(),
            h_jacobian_p(&net, &x, &[0.0; 6], &params).unwrap(),
        ] {
            assert!(jac.iter().flatten().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn fixed_point_jacobian_entrywise_form() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let params = EquilibriumParams::new(100.0, 2.0).unwrap();
        let p = [0.0; 6];
        let x = solve_sue(&net, &p, &params).unwrap();
        let jac = h_jacobian_x(&net, &x, &p, &params).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let lp = net.links()[j].derivative(x[j]);
                let expected = if i == j {
                    100.0 * lp * (-x[i] + x[i] * x[i] / 2.0)
                } else {
                    100.0 * lp * x[i] * x[j] / 2.0
                };
                assert_relative_eq!(jac[i][j], expected, max_relative = 1e-8, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_two_link_sensitivity() {
        let params = EquilibriumParams::new(5.0, 2.0).unwrap();
        let jac = sue_price_sensitivity(&sym(2), &[0.2, 0.2], &params).unwrap();
        let s = jac[0][1];
        assert!(s > 0.0);
        assert_relative_eq!(jac[0][0], -s, max_relative = 1e-6);
        assert_relative_eq!(jac[1][1], -s, max_relative = 1e-6);
        assert_relative_eq!(jac[1][0], s, max_relative = 1e-6);
    }

    #[test]
    fn uniform_shift_witness_is_zero() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let params = EquilibriumParams::new(100.0, 2.0).unwrap();
        let p = [0.3, 0.1, 0.0, 0.9, 0.2, 0.5];
        let q: Vec<f64> = p.iter().map(|v| v + 0.75).collect();
        assert!(monotonicity_witness(&net, &p, &q, &params).unwrap().abs() < 1e-10);
    }

    #[test]
    fn witness_sign_survives_a_saturated_link() {
        // link 1 holds all of d to the last bit; link 2 carries ~1e-218
        let spec = LatencySpec::new([(2, 0.1)]).unwrap();
        let net = ParallelNetwork::uniform(spec, 2).unwrap();
        let params = EquilibriumParams::new(167.77134527106332, 0.7473569662624578).unwrap();
        let p = [2.8473352815064055, 5.824132314375568];
        let q = [p[0] - 1.707450677083578, p[1] - 1.5911374776322995];
        let (x, y) = (solve_sue(&net, &p, &params).unwrap(), solve_sue(&net, &q, &params).unwrap());
        assert_eq!(x[0], y[0]);
        assert!(x[1] > y[1]);
        assert!(monotonicity_witness(&net, &p, &q, &params).unwrap() < 0.0);
    }
}
