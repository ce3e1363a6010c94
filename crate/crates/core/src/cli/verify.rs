//! Property suite run by the `verify` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::diagnostics::{ensemble_run, total_latency, EnsembleOptions};
use crate::dynamics::{load_bound, martingale_term, second_moment_constant, SimConfig, SimState};
use crate::equilibrium::{
    h_field, h_jacobian_p, h_jacobian_x, inducing_toll, logit_load, monotonicity_witness, solve_equilibrium_toll_with, solve_sue,
    solve_sue_dual, EquilibriumParams, EquilibriumSolution,
};
use crate::error::Result;
use crate::network::{LatencySpec, ParallelNetwork};
use crate::ode::{check_cooperativity, coupled_vector_field, integrate_fast, Field, SampleDomain};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(8);
        let mut out = format!("{:<width$}  result  detail\n", "property");
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{:<width$}  {verdict:<6}  {}\n", c.name, c.detail));
        }
        out
    }
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    net: &'a ParallelNetwork,
    params: EquilibriumParams,
    eq: EquilibriumSolution,
}

type Property = (&'static str, fn(&Ctx, &mut ChaCha8Rng) -> Result<(bool, String)>);

const PROPERTIES: &[Property] = &[
    ("latency monotone and convex", latency_shape),
    ("latency derivative vs finite difference", latency_derivative),
    ("cost minus latency equals toll", cost_offset),
    ("primal and dual SUE agree", sue_cross_check),
    ("SUE shift invariance", shift_invariance),
    ("tolled SUE equals social optimum", consistency),
    ("toll fixed point residual and sign", toll_fixed_point),
    ("monotonicity witness negative", monotonicity),
    ("analytic Jacobians vs finite difference", jacobians),
    ("load bound, toll sign, conservation", sim_bounds),
    ("martingale decomposition and moments", martingale),
    ("coupled field vanishes at equilibrium", field_residual),
    ("fast flow total relaxes to demand", fast_total),
    ("cooperativity of fast and slow fields", cooperativity),
    ("tolling lowers total latency", efficiency),
    ("neighborhood probability Markov bound", markov),
];

/// Runs every property against the configured network, `β` and demand.
pub fn verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let params = cfg.params()?;
    let net = &cfg.sim.network;
    let eq = solve_equilibrium_toll_with(net, &params, &cfg.solver)?;
    let ctx = Ctx { cfg, net, params, eq };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
    let checks = PROPERTIES
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = f(&ctx, &mut rng).unwrap_or_else(|e| (false, format!("error: {e}")));
            Check { name, passed, detail }
        })
        .collect();
    Ok(VerifyReport { checks })
}

fn latency_shape(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst_convexity = f64::INFINITY;
    let mut monotone = true;
    for i in 0..ctx.net.len() {
        for _ in 0..200 {
            let x: f64 = rng.random_range(0.01..10.0);
            let h = rng.random_range(1e-3..x.min(1.0));
            let (lo, mid, hi) = (ctx.net.latency(i, x - h)?, ctx.net.latency(i, x)?, ctx.net.latency(i, x + h)?);
            monotone &= lo < mid && mid < hi;
            worst_convexity = worst_convexity.min(hi - 2.0 * mid + lo);
        }
    }
    let ok = monotone && worst_convexity >= -1e-9;
    Ok((ok, format!("min second difference {worst_convexity:.3e}")))
}

fn latency_derivative(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..ctx.net.len() {
        for _ in 0..100 {
            let x = rng.random_range(1e-3..10.0);
            let h = 1e-6;
            let fd = (ctx.net.latency(i, x + h)? - ctx.net.latency(i, x - h)?) / (2.0 * h);
            let exact = ctx.net.latency_derivative(i, x)?;
            worst = worst.max((fd - exact).abs() / exact.abs().max(1.0));
        }
    }
    Ok((worst < 1e-6, format!("max relative error {worst:.3e}")))
}

fn cost_offset(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut ok = true;
    for i in 0..ctx.net.len() {
        for _ in 0..100 {
            let x = f64::from(rng.random_range(0u32..256)) / 64.0;
            let p = f64::from(rng.random_range(0u32..1024)) / 64.0;
            ok &= ctx.net.cost(i, x, p)? - ctx.net.latency(i, x)? == p;
        }
    }
    Ok((ok, "dyadic tolls".into()))
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<(ParallelNetwork, EquilibriumParams, Vec<f64>)> {
    let r = rng.random_range(2..=8);
    let specs = (0..r)
        .map(|_| {
            LatencySpec::new([
                (0, rng.random_range(0.0..3.0)),
                (1, rng.random_range(0.0..2.0)),
                (2, rng.random_range(0.1..3.0)),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let params = EquilibriumParams::new(rng.random_range(1.0..200.0), rng.random_range(0.5..5.0))?;
    let p = (0..r).map(|_| rng.random_range(0.0..10.0)).collect();
    Ok((ParallelNetwork::new(specs)?, params, p))
}

fn sue_cross_check(_: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (net, params, p) = random_instance(rng)?;
        worst = worst.max(inf_dist(&solve_sue(&net, &p, &params)?, &solve_sue_dual(&net, &p, &params)?));
    }
    Ok((worst < 1e-8, format!("max gap {worst:.3e} over 30 instances")))
}

fn shift_invariance(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let p: Vec<f64> = (0..ctx.net.len()).map(|_| rng.random_range(0.0..5.0)).collect();
        let c = rng.random_range(0.0..5.0);
        let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
        worst = worst.max(inf_dist(
            &solve_sue(ctx.net, &p, &ctx.params)?,
            &solve_sue(ctx.net, &shifted, &ctx.params)?,
        ));
    }
    Ok((worst < 1e-10, format!("max change {worst:.3e}")))
}

fn consistency(ctx: &Ctx, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let gap = inf_dist(&ctx.eq.sue_load, &ctx.eq.social_load);
    Ok((gap < 1e-6, format!("gap {gap:.3e}")))
}

fn toll_fixed_point(ctx: &Ctx, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let res = ctx.eq.residuals.toll;
    let nonneg = ctx.eq.toll.iter().all(|&p| p >= 0.0);
    Ok((res < 1e-9 && nonneg, format!("residual {res:.3e}")))
}

fn monotonicity(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let r = ctx.net.len();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..40 {
        let p: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..5.0)).collect();
        let q: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..5.0)).collect();
        worst = worst.max(monotonicity_witness(ctx.net, &p, &q, &ctx.params)?);
    }
    let uniform: Vec<f64> = ctx.eq.toll.iter().map(|v| v + 1.5).collect();
    let flat = monotonicity_witness(ctx.net, &ctx.eq.toll, &uniform, &ctx.params)?;
    Ok((
        worst < 0.0 && flat.abs() < 1e-10,
        format!("max witness {worst:.3e}, uniform shift {flat:.1e}"),
    ))
}

fn jacobians(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let r = ctx.net.len();
    let d = ctx.params.demand();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = interior_load(rng, r, d);
        let p = inducing_toll(ctx.net, &x, &ctx.params)?;
        let jx = h_jacobian_x(ctx.net, &x, &p, &ctx.params)?;
        let jp = h_jacobian_p(ctx.net, &x, &p, &ctx.params)?;
        for j in 0..r {
            for (jac, on_x) in [(&jx, true), (&jp, false)] {
                let fd = fd_column(|t| {
                    let (mut xs, mut ps) = (x.clone(), p.clone());
                    if on_x {
                        xs[j] += t;
                    } else {
                        ps[j] += t;
                    }
                    logit_load(ctx.net, &xs, &ps, &ctx.params)
                })?;
                let scale = jac.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                for i in 0..r {
                    worst = worst.max((fd[i] - jac[i][j]).abs() / jac[i][j].abs().max(1e-3 * scale));
                }
            }
        }
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.3e}")))
}

/// Random load with every link carrying at least a twentieth of its even share.
fn interior_load(rng: &mut ChaCha8Rng, links: usize, demand: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..links).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| demand * w / total).collect()
}

/// Fourth-order central difference of a vector function at `t = 0`.
fn fd_column<F: Fn(f64) -> Result<Vec<f64>>>(f: F) -> Result<Vec<f64>> {
    let h = 1e-5;
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok((0..p1.len())
        .map(|i| (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h))
        .collect())
}

fn short_sim(cfg: &ExperimentConfig) -> SimConfig {
    SimConfig {
        horizon: cfg.sim.horizon.min(5000),
        record_every: 1,
        ..cfg.sim.clone()
    }
}

fn sim_bounds(ctx: &Ctx, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let sim = short_sim(ctx.cfg);
    let (xi_lo, _) = sim.demand.outflow_bounds();
    let (_, zeta_hi) = sim.demand.inflow_bounds();
    let mut state = SimState::initial(&sim)?;
    let mut ok = true;
    let mut slack = f64::INFINITY;
    for n in 1..=sim.horizon {
        let before = state.load.clone();
        let draw = state.step(&sim);
        for i in 0..before.len() {
            let bound = load_bound(sim.initial_load[i], n, xi_lo, zeta_hi);
            slack = slack.min(bound - state.load[i]);
            ok &= state.load[i] <= bound && state.load[i] > 0.0 && state.toll[i] >= 0.0;
            ok &= state.load[i] == before[i] + draw.inflow[i] - draw.outflow[i];
        }
    }
    Ok((ok, format!("{} steps, min bound slack {slack:.3e}", sim.horizon)))
}

fn martingale(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let sim = short_sim(ctx.cfg);
    let (lambda, mu, beta) = (sim.demand.lambda(), sim.demand.mu(), sim.beta);
    let k = second_moment_constant(&sim.demand);
    let mut state = SimState::initial(&SimConfig { seed: rng.random(), ..sim.clone() })?;
    let mut identity: f64 = 0.0;
    let mut moment_ok = true;
    for _ in 0..sim.horizon {
        let (x, p) = (state.load.clone(), state.toll.clone());
        let draw = state.step(&sim);
        let h = h_field(&sim.network, &x, &p, lambda, mu, beta)?;
        let m = martingale_term(&sim.network, &x, &p, draw.zeta, &draw.xi, lambda, mu, beta)?;
        for i in 0..x.len() {
            let predicted = (1.0 - mu) * x[i] + mu * h[i] + m[i];
            identity = identity.max((predicted - state.load[i]).abs());
            moment_ok &= m[i] * m[i] <= k * (1.0 + x[i] * x[i]);
        }
    }
    Ok((
        identity < 1e-12 && moment_ok,
        format!("identity error {identity:.1e}, |M|² within K(1 + X²) with K = {k:.3e}"),
    ))
}

fn field_residual(ctx: &Ctx, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let a = ctx.cfg.sim.toll_step;
    let eps = if a > 0.0 { a / ctx.cfg.sim.demand.mu() } else { 1.0 };
    let (dx, dp) = coupled_vector_field(ctx.net, &ctx.params, eps, &ctx.eq.sue_load, &ctx.eq.toll)?;
    let res = dx.iter().chain(&dp).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((res < 1e-8, format!("residual {res:.3e}")))
}

fn fast_total(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let r = ctx.net.len();
    let d = ctx.params.demand();
    let x0: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..d)).collect();
    let p: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..3.0)).collect();
    let dt = crate::ode::stable_fast_dt(ctx.net, &ctx.params, &x0, &p)?;
    let traj = integrate_fast(&x0, &p, ctx.net, &ctx.params, dt, 20.0)?;
    let gap = (traj.final_load().iter().sum::<f64>() - d).abs();
    let to_sue = inf_dist(traj.final_load(), &solve_sue(ctx.net, &p, &ctx.params)?);
    Ok((gap < 1e-6 && to_sue < 1e-8, format!("total gap {gap:.1e}, distance to SUE {to_sue:.1e}")))
}

fn cooperativity(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    // Boxes around the operating point: far from it β-scaled cost gaps push
    // shares below the smallest double and the coupling rounds to zero.
    let fast_domain = SampleDomain::around(&ctx.eq.sue_load, 0.5, 0.01, rng.random());
    let fast = check_cooperativity(&Field::Fast { toll: ctx.eq.toll.clone() }, ctx.net, &ctx.params, &fast_domain, 10)?;
    // Near the equilibrium some links are all but empty and the coupling
    // between two of them is below the double range, so the slow field is
    // sampled just above tolls that spread the demand evenly. Tolls move by
    // at most 2/β there, so every share stays within e² of the even split.
    let spread = vec![ctx.params.demand() / ctx.net.len() as f64; ctx.net.len()];
    let centre = inducing_toll(ctx.net, &spread, &ctx.params)?;
    let slow_domain = SampleDomain::around(&centre, 0.0, 2.0 / ctx.params.beta(), rng.random());
    let slow = check_cooperativity(&Field::Slow, ctx.net, &ctx.params, &slow_domain, 5)?;
    Ok((
        fast.passed() && slow.passed(),
        format!("offdiag min fast {:.2e}, slow {:.2e}", fast.offdiag_min, slow.offdiag_min),
    ))
}

fn efficiency(ctx: &Ctx, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let untolled = solve_sue(ctx.net, &vec![0.0; ctx.net.len()], &ctx.params)?;
    let free = total_latency(ctx.net, &untolled)?;
    let social = total_latency(ctx.net, &ctx.eq.social_load)?;
    Ok((social <= free, format!("social {social:.6} vs untolled {free:.6}")))
}

fn markov(ctx: &Ctx, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let sim = short_sim(ctx.cfg);
    let seeds: Vec<u64> = ctx.cfg.seeds.iter().copied().take(8).collect();
    let opts = EnsembleOptions {
        tail_fraction: ctx.cfg.tail_fraction,
        deltas: ctx.cfg.deltas.clone(),
        keep_mean_path: false,
    };
    let stats = ensemble_run(&sim, &seeds, &opts)?;
    let slack = 2.0 * 3.0 * stats.standard_error();
    let ok = stats
        .neighborhood_prob
        .iter()
        .all(|&(delta, prob)| (0.0..=1.0).contains(&prob) && prob <= stats.mean_tail_mse / delta + slack);
    Ok((ok, format!("tail mse {:.3e} over {} seeds", stats.mean_tail_mse, seeds.len())))
}
