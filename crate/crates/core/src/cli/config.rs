//! Experiment configuration in a line-oriented `key = value` format.
//!
//! ```text
//! # comment
//! preset = s1
//! a = 0.003
//! seeds = 0, 1, 2
//! ```
//!
//! Several assignments may share a line when separated by `;`. Preset values
//! are applied first and explicit keys override them. Unknown and repeated
//! keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dynamics::{DemandModel, Distribution, SimConfig};
use crate::equilibrium::{EquilibriumParams, SolverOptions};
use crate::error::{Error, Result};
use crate::network::{LatencySpec, ParallelNetwork};

pub const PRESET_LINKS: usize = 6;
pub const PRESET_BETA: f64 = 100.0;
pub const PRESET_HORIZON: usize = 2000;
pub const PRESET_MU: f64 = 0.05;

/// `(preset, λ, a)` for the four reproduction settings.
pub const PRESET_TABLE: [(Preset, f64, f64); 4] = [
    (Preset::S1, 0.1, 0.0015),
    (Preset::S2, 0.2, 0.0015),
    (Preset::S3, 0.1, 0.0),
    (Preset::S4, 0.2, 0.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    S1,
    S2,
    S3,
    S4,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::S1 => "s1",
            Preset::S2 => "s2",
            Preset::S3 => "s3",
            Preset::S4 => "s4",
            Preset::Custom => "custom",
        }
    }

    /// `(λ, a)`; `None` for custom.
    pub fn rates(self) -> Option<(f64, f64)> {
        PRESET_TABLE.iter().find(|(p, _, _)| *p == self).map(|&(_, l, a)| (l, a))
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s1" => Ok(Preset::S1),
            "s2" => Ok(Preset::S2),
            "s3" => Ok(Preset::S3),
            "s4" => Ok(Preset::S4),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::ConfigInvalid(format!(
                "unknown preset `{other}` (expected s1, s2, s3, s4 or custom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Artifact {
    Trajectory,
    Ode,
    Equilibrium,
    Stats,
}

impl Artifact {
    pub fn name(self) -> &'static str {
        match self {
            Artifact::Trajectory => "trajectory",
            Artifact::Ode => "ode",
            Artifact::Equilibrium => "equilibrium",
            Artifact::Stats => "stats",
        }
    }
}

impl FromStr for Artifact {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "trajectory" => Ok(Artifact::Trajectory),
            "ode" => Ok(Artifact::Ode),
            "equilibrium" => Ok(Artifact::Equilibrium),
            "stats" => Ok(Artifact::Stats),
            other => Err(Error::ConfigInvalid(format!(
                "unknown artifact `{other}` (expected trajectory, ode, equilibrium or stats)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Model, horizon and initial state; `sim.seed` is the first seed.
    pub sim: SimConfig,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Extra artifacts written by `simulate` next to the trajectories.
    pub artifacts: Vec<Artifact>,
    pub tail_fraction: f64,
    pub deltas: Vec<f64>,
    pub ode_horizon: f64,
    /// `None` selects the stiffness-based step.
    pub ode_dt: Option<f64>,
    pub solver: SolverOptions,
}

const KEYS: &[&str] = &[
    "preset",
    "network",
    "latency.<i>",
    "beta",
    "lambda",
    "mu",
    "inflow",
    "outflow",
    "a",
    "horizon",
    "initial_load",
    "initial_toll",
    "record_every",
    "record_samples",
    "seeds",
    "output",
    "artifacts",
    "tail_fraction",
    "deltas",
    "ode_horizon",
    "ode_dt",
    "sue_tol",
    "sue_damping",
    "sue_max_iter",
    "toll_tol",
    "toll_damping",
    "toll_max_iter",
];

const REQUIRED_CUSTOM: &str = "network (or latency.1 .. latency.R), beta, lambda and mu (or inflow and outflow), a, horizon";

pub fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}

/// Network given as `quadratic(R)`: link `i` has latency `i x² + i`.
fn parse_network(value: &str) -> Result<ParallelNetwork> {
    let inner = value
        .trim()
        .strip_prefix("quadratic(")
        .and_then(|v| v.strip_suffix(')'))
        .ok_or_else(|| Error::ConfigInvalid(format!("network must be quadratic(R), got `{value}`")))?;
    let links: usize = inner
        .trim()
        .parse()
        .map_err(|_| Error::ConfigInvalid(format!("bad link count `{inner}`")))?;
    ParallelNetwork::quadratic_family(links)
}

/// Comma-separated list; also accepts `a..b` (half-open) for integer lists.
fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let value = value.trim();
    if let Some((lo, hi)) = value.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| Error::ConfigInvalid(format!("bad seed range `{value}`")))?;
        let hi: u64 = hi.trim().parse().map_err(|_| Error::ConfigInvalid(format!("bad seed range `{value}`")))?;
        return Ok((lo..hi).collect());
    }
    parse_list(value).map_err(|e| Error::ConfigInvalid(format!("bad seed list: {e}")))
}

struct Entry {
    line: usize,
    value: String,
}

fn tokenize(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut entries = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        for part in content.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, value) = part.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                message: format!("expected `key = value`, got `{part}`"),
            })?;
            let key = key.trim().to_owned();
            let known = KEYS.contains(&key.as_str())
                || key.strip_prefix("latency.").is_some_and(|i| i.parse::<usize>().is_ok_and(|i| i >= 1));
            if !known {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("unknown key `{key}`"),
                });
            }
            if entries.contains_key(&key) {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            entries.insert(
                key,
                Entry {
                    line,
                    value: value.trim().to_owned(),
                },
            );
        }
    }
    Ok(entries)
}

struct Reader {
    entries: BTreeMap<String, Entry>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)
            .map(|e| {
                e.value.parse::<T>().map_err(|err| Error::ConfigParse {
                    line: e.line,
                    message: format!("{key}: cannot parse `{}`: {err}", e.value),
                })
            })
            .transpose()
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)
            .map(|e| {
                parse_list(&e.value).map_err(|message| Error::ConfigParse {
                    line: e.line,
                    message: format!("{key}: {message}"),
                })
            })
            .transpose()
    }
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(format!("{name} = {v} violates {name} ∈ [0, 1]")))
    }
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut r = Reader { entries: tokenize(text)? };
    let preset: Preset = r.parsed("preset")?.unwrap_or(Preset::Custom);
    let rates = preset.rates();

    // Network.
    let mut latencies: Vec<(usize, Entry)> = Vec::new();
    let keys: Vec<String> = r.entries.keys().filter(|k| k.starts_with("latency.")).cloned().collect();
    for key in keys {
        let idx: usize = key["latency.".len()..].parse().expect("checked by tokenize");
        latencies.push((idx, r.take(&key).expect("key present")));
    }
    latencies.sort_by_key(|(i, _)| *i);
    let network_entry = r.take("network");
    let network = match (network_entry, latencies.is_empty()) {
        (Some(e), true) => Some(parse_network(&e.value).map_err(|err| Error::ConfigParse {
            line: e.line,
            message: err.to_string(),
        })?),
        (Some(e), false) => {
            return Err(Error::ConfigParse {
                line: e.line,
                message: "give either `network` or `latency.<i>` keys, not both".into(),
            })
        }
        (None, false) => {
            let mut specs = Vec::with_capacity(latencies.len());
            for (k, (idx, e)) in latencies.iter().enumerate() {
                if *idx != k + 1 {
                    return Err(Error::ConfigInvalid(format!(
                        "latency keys must be numbered 1..R without gaps, missing latency.{}",
                        k + 1
                    )));
                }
                specs.push(e.value.parse::<LatencySpec>().map_err(|err| Error::ConfigParse {
                    line: e.line,
                    message: err.to_string(),
                })?);
            }
            Some(ParallelNetwork::new(specs)?)
        }
        (None, true) => rates.map(|_| ParallelNetwork::quadratic_family(PRESET_LINKS)).transpose()?,
    };

    let beta = r.parsed::<f64>("beta")?.or(rates.map(|_| PRESET_BETA));
    let lambda = r.parsed::<f64>("lambda")?;
    let mu = r.parsed::<f64>("mu")?;
    let inflow = r.parsed::<Distribution>("inflow")?;
    let outflow = r.parsed::<Distribution>("outflow")?;
    let a = r.parsed::<f64>("a")?.or(rates.map(|(_, a)| a));
    let horizon = r.parsed::<usize>("horizon")?.or(rates.map(|_| PRESET_HORIZON));

    let lambda_eff = lambda.or(inflow.map(|d| d.mean())).or(rates.map(|(l, _)| l));
    let mu_eff = mu.or(outflow.map(|d| d.mean())).or(rates.map(|_| PRESET_MU));

    let (Some(network), Some(beta), Some(lambda_eff), Some(mu_eff), Some(a), Some(horizon)) =
        (network, beta, lambda_eff, mu_eff, a, horizon)
    else {
        return Err(Error::ConfigInvalid(format!(
            "custom config is missing required keys: {REQUIRED_CUSTOM}"
        )));
    };

    in_unit("a", a)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::ConfigInvalid(format!("beta = {beta} violates beta > 0")));
    }
    let default_demand = DemandModel::default_for(lambda_eff, mu_eff)?;
    let inflow = inflow.unwrap_or(*default_demand.inflow());
    let outflow = outflow.unwrap_or(*default_demand.outflow());
    let demand = match (lambda, mu) {
        (None, None) => DemandModel::new(inflow, outflow)?,
        _ => DemandModel::with_means(lambda_eff, mu_eff, inflow, outflow)?,
    };

    let seeds = match r.take("seeds") {
        Some(e) => parse_seeds(&e.value).map_err(|err| Error::ConfigParse {
            line: e.line,
            message: err.to_string(),
        })?,
        None => default_seeds(),
    };
    if seeds.is_empty() {
        return Err(Error::ConfigInvalid("seed list is empty".into()));
    }

    let links = network.len();
    let mut sim = SimConfig::new(network, demand, beta, a, horizon, seeds[0]);
    if let Some(v) = r.list::<f64>("initial_load")? {
        sim.initial_load = v;
    }
    if let Some(v) = r.list::<f64>("initial_toll")? {
        sim.initial_toll = v;
    }
    for (name, v) in [("initial_load", &sim.initial_load), ("initial_toll", &sim.initial_toll)] {
        if v.len() != links {
            return Err(Error::ConfigInvalid(format!("{name} has {} entries, network has {links} links", v.len())));
        }
    }
    if let Some(v) = r.parsed("record_every")? {
        sim.record_every = v;
    }
    if let Some(v) = r.parsed("record_samples")? {
        sim.record_samples = v;
    }
    sim.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;

    let defaults = SolverOptions::default();
    let solver = SolverOptions {
        sue_tol: r.parsed("sue_tol")?.unwrap_or(defaults.sue_tol),
        sue_damping: r.parsed("sue_damping")?.unwrap_or(defaults.sue_damping),
        sue_max_iter: r.parsed("sue_max_iter")?.unwrap_or(defaults.sue_max_iter),
        toll_tol: r.parsed("toll_tol")?.unwrap_or(defaults.toll_tol),
        toll_damping: r.parsed("toll_damping")?.unwrap_or(defaults.toll_damping),
        toll_max_iter: r.parsed("toll_max_iter")?.unwrap_or(defaults.toll_max_iter),
        dual_tol: defaults.dual_tol,
    };
    for (name, v) in [("sue_damping", solver.sue_damping), ("toll_damping", solver.toll_damping)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::ConfigInvalid(format!("{name} = {v} violates {name} ∈ (0, 1]")));
        }
    }
    for (name, v) in [("sue_tol", solver.sue_tol), ("toll_tol", solver.toll_tol)] {
        if !(v > 0.0) {
            return Err(Error::ConfigInvalid(format!("{name} = {v} violates {name} > 0")));
        }
    }

    let output = r.take("output").map_or_else(|| PathBuf::from("out"), |e| PathBuf::from(e.value));
    let mut artifacts = r.list::<Artifact>("artifacts")?.unwrap_or_else(|| vec![Artifact::Trajectory]);
    artifacts.sort();
    artifacts.dedup();
    let tail_fraction = r.parsed("tail_fraction")?.unwrap_or(crate::diagnostics::DEFAULT_TAIL_FRACTION);
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::ConfigInvalid(format!(
            "tail_fraction = {tail_fraction} violates tail_fraction ∈ (0, 1]"
        )));
    }
    let deltas = r.list::<f64>("deltas")?.unwrap_or_else(|| vec![0.1, 0.25, 1.0]);
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::ConfigInvalid(format!("delta = {d} violates delta > 0")));
    }
    let ode_horizon = r.parsed("ode_horizon")?.unwrap_or(crate::ode::DEFAULT_HORIZON);
    if !(ode_horizon >= 0.0 && f64::is_finite(ode_horizon)) {
        return Err(Error::ConfigInvalid(format!("ode_horizon = {ode_horizon} must be finite and >= 0")));
    }
    let ode_dt = match r.take("ode_dt") {
        None => None,
        Some(e) if e.value == "auto" => None,
        Some(e) => Some(e.value.parse::<f64>().map_err(|err| Error::ConfigParse {
            line: e.line,
            message: format!("ode_dt: {err}"),
        })?),
    };

    debug_assert!(r.entries.is_empty(), "unconsumed keys: {:?}", r.entries.keys());
    Ok(ExperimentConfig {
        preset,
        sim,
        seeds,
        output,
        artifacts,
        tail_fraction,
        deltas,
        ode_horizon,
        ode_dt,
        solver,
    })
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Result<Self> {
        parse_config(&format!("preset = {}", preset.name()))
    }

    pub fn params(&self) -> Result<EquilibriumParams> {
        EquilibriumParams::from_rates(self.sim.beta, self.sim.demand.lambda(), self.sim.demand.mu())
    }

    /// Fully explicit text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sim = &self.sim;
        let _ = writeln!(s, "preset = {}", self.preset.name());
        for (i, l) in sim.network.links().iter().enumerate() {
            let _ = writeln!(s, "latency.{} = {l}", i + 1);
        }
        let _ = writeln!(s, "beta = {}", sim.beta);
        let _ = writeln!(s, "inflow = {}", sim.demand.inflow());
        let _ = writeln!(s, "outflow = {}", sim.demand.outflow());
        let _ = writeln!(s, "a = {}", sim.toll_step);
        let _ = writeln!(s, "horizon = {}", sim.horizon);
        let _ = writeln!(s, "initial_load = {}", join(&sim.initial_load));
        let _ = writeln!(s, "initial_toll = {}", join(&sim.initial_toll));
        let _ = writeln!(s, "record_every = {}", sim.record_every);
        let _ = writeln!(s, "record_samples = {}", sim.record_samples);
        let _ = writeln!(s, "seeds = {}", join(&self.seeds));
        let _ = writeln!(s, "output = {}", self.output.display());
        let names: Vec<&str> = self.artifacts.iter().map(|a| a.name()).collect();
        let _ = writeln!(s, "artifacts = {}", names.join(", "));
        let _ = writeln!(s, "tail_fraction = {}", self.tail_fraction);
        let _ = writeln!(s, "deltas = {}", join(&self.deltas));
        let _ = writeln!(s, "ode_horizon = {}", self.ode_horizon);
        match self.ode_dt {
            Some(dt) => writeln!(s, "ode_dt = {dt}"),
            None => writeln!(s, "ode_dt = auto"),
        }
        .ok();
        let o = &self.solver;
        let _ = writeln!(s, "sue_tol = {}", o.sue_tol);
        let _ = writeln!(s, "sue_damping = {}", o.sue_damping);
        let _ = writeln!(s, "sue_max_iter = {}", o.sue_max_iter);
        let _ = writeln!(s, "toll_tol = {}", o.toll_tol);
        let _ = writeln!(s, "toll_damping = {}", o.toll_damping);
        let _ = writeln!(s, "toll_max_iter = {}", o.toll_max_iter);
        s
    }
}
