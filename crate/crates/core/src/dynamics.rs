//! Discrete-time stochastic load and toll process.
//!
//! Each step draws an arrival volume `ζ(n+1)` and per-link discharge fractions
//! `ξ_i(n+1)`, then updates both state vectors from the same pre-step state:
//!
//! ```text
//! X_i(n+1) = X_i(n) + softmax_i(−β c(X(n), P(n))) ζ(n+1) − X_i(n) ξ_i(n+1)
//! P_i(n+1) = (1 − a) P_i(n) + a X_i(n) ℓ_i'(X_i(n))
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution as _};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equilibrium::{check_rates, logit_shares};
use crate::error::{Error, Result};
use crate::network::ParallelNetwork;
use crate::series::TrajectoryRow;

/// Identifies the random stream layout. Bump when the draw order changes.
pub const RNG_SCHEME: &str = "chacha8/stream-per-source/v1";

/// Bounded distribution with an analytic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    /// `lo + (hi − lo) B` with `B ~ Beta(a, b)`.
    ScaledBeta { a: f64, b: f64, lo: f64, hi: f64 },
    Degenerate { point: f64 },
}

impl Distribution {
    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            Distribution::ScaledBeta { a, b, lo, hi } => lo + (hi - lo) * a / (a + b),
            Distribution::Degenerate { point } => point,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            Distribution::Uniform { lo, hi } | Distribution::ScaledBeta { lo, hi, .. } => (lo, hi),
            Distribution::Degenerate { point } => (point, point),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.support();
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Parameter(format!("bad support [{lo}, {hi}]")));
        }
        if let Distribution::ScaledBeta { a, b, .. } = *self {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Parameter(format!("beta shape ({a}, {b}) must be positive")));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Distribution::ScaledBeta { a, b, lo, hi } => {
                // shape validated at construction
                let beta = Beta::new(a, b).expect("validated beta shape");
                lo + (hi - lo) * beta.sample(rng)
            }
            Distribution::Degenerate { point } => point,
        }
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Distribution::Uniform { lo, hi } => write!(f, "uniform({lo}, {hi})"),
            Distribution::ScaledBeta { a, b, lo, hi } => write!(f, "beta({a}, {b}, {lo}, {hi})"),
            Distribution::Degenerate { point } => write!(f, "degenerate({point})"),
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parameter(format!("cannot parse distribution `{s}`"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        let dist = match (name.trim(), nums.as_slice()) {
            ("uniform", &[lo, hi]) => Distribution::Uniform { lo, hi },
            ("beta", &[a, b, lo, hi]) => Distribution::ScaledBeta { a, b, lo, hi },
            ("degenerate", &[point]) => Distribution::Degenerate { point },
            _ => return Err(bad()),
        };
        dist.validate()?;
        Ok(dist)
    }
}

/// Arrival volume and discharge-fraction laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    inflow: Distribution,
    outflow: Distribution,
}

impl DemandModel {
    /// Requires inflow support in `(0, ∞)` and outflow support in `(0, 1)`.
    pub fn new(inflow: Distribution, outflow: Distribution) -> Result<Self> {
        inflow.validate()?;
        outflow.validate()?;
        let (zl, _) = inflow.support();
        if zl <= 0.0 {
            return Err(Error::Parameter(format!("inflow support must lie in (0, inf), lower bound is {zl}")));
        }
        let (xl, xu) = outflow.support();
        if xl <= 0.0 || xu >= 1.0 {
            return Err(Error::Parameter(format!("outflow support [{xl}, {xu}] must lie in (0, 1)")));
        }
        Ok(Self { inflow, outflow })
    }

    /// Like [`DemandModel::new`] but also checks the laws against declared means.
    pub fn with_means(lambda: f64, mu: f64, inflow: Distribution, outflow: Distribution) -> Result<Self> {
        let model = Self::new(inflow, outflow)?;
        for (name, declared, actual) in [("inflow", lambda, model.lambda()), ("outflow", mu, model.mu())] {
            if (declared - actual).abs() > 1e-12 * declared.abs().max(1.0) {
                return Err(Error::Parameter(format!(
                    "{name} distribution has mean {actual}, declared {declared}"
                )));
            }
        }
        Ok(model)
    }

    /// Uniform on `[λ/2, 3λ/2]` and on `μ ± min(μ/2, (1 − μ)/2)`.
    pub fn default_for(lambda: f64, mu: f64) -> Result<Self> {
        check_rates(lambda, mu)?;
        let w = (0.5 * mu).min(0.5 * (1.0 - mu));
        Self::new(
            Distribution::Uniform { lo: 0.5 * lambda, hi: 1.5 * lambda },
            Distribution::Uniform { lo: mu - w, hi: mu + w },
        )
    }

    pub fn degenerate(lambda: f64, mu: f64) -> Result<Self> {
        Self::new(
            Distribution::Degenerate { point: lambda },
            Distribution::Degenerate { point: mu },
        )
    }

    pub fn inflow(&self) -> &Distribution {
        &self.inflow
    }

    pub fn outflow(&self) -> &Distribution {
        &self.outflow
    }

    pub fn lambda(&self) -> f64 {
        self.inflow.mean()
    }

    pub fn mu(&self) -> f64 {
        self.outflow.mean()
    }

    /// `λ/μ`
    pub fn demand(&self) -> f64 {
        self.lambda() / self.mu()
    }

    /// `(ζ_l, ζ_u)`
    pub fn inflow_bounds(&self) -> (f64, f64) {
        self.inflow.support()
    }

    /// `(ξ_l, ξ_u)`
    pub fn outflow_bounds(&self) -> (f64, f64) {
        self.outflow.support()
    }
}

/// Independent generator streams: one for arrivals, one per link for discharges.
///
/// All streams share the seed and differ in the ChaCha stream id, so adding
/// a link never changes the draws of existing sources.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandStreams {
    inflow: ChaCha8Rng,
    outflow: Vec<ChaCha8Rng>,
}

impl DemandStreams {
    pub fn new(seed: u64, links: usize) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            inflow: stream(0),
            outflow: (1..=links as u64).map(stream).collect(),
        }
    }

    pub fn links(&self) -> usize {
        self.outflow.len()
    }
}

/// `ζ(n+1)` from the arrival stream.
pub fn sample_inflow(model: &DemandModel, streams: &mut DemandStreams) -> f64 {
    model.inflow.sample(&mut streams.inflow)
}

/// `ξ_i(n+1)`, one draw from each link's stream.
pub fn sample_outflows(model: &DemandModel, streams: &mut DemandStreams) -> Vec<f64> {
    streams
        .outflow
        .iter_mut()
        .map(|rng| model.outflow.sample(rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub network: ParallelNetwork,
    pub demand: DemandModel,
    pub beta: f64,
    /// Toll step size `a`.
    pub toll_step: f64,
    /// Number of steps `N`.
    pub horizon: usize,
    pub initial_load: Vec<f64>,
    pub initial_toll: Vec<f64>,
    pub seed: u64,
    pub record_every: usize,
    /// Keep `(ζ, ξ)` alongside the recorded states.
    pub record_samples: bool,
}

impl SimConfig {
    /// Zero initial state, every step recorded.
    pub fn new(network: ParallelNetwork, demand: DemandModel, beta: f64, toll_step: f64, horizon: usize, seed: u64) -> Self {
        let r = network.len();
        Self {
            network,
            demand,
            beta,
            toll_step,
            horizon,
            initial_load: vec![0.0; r],
            initial_toll: vec![0.0; r],
            seed,
            record_every: 1,
            record_samples: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.check_len(&self.initial_load)?;
        self.network.check_len(&self.initial_toll)?;
        if !(0.0..=1.0).contains(&self.toll_step) {
            return Err(Error::Parameter(format!("toll step a must lie in [0, 1], got {}", self.toll_step)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.horizon == 0 {
            return Err(Error::Parameter("horizon must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Parameter("record_every must be positive".into()));
        }
        if let Some(&v) = self.initial_load.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Parameter(format!("initial load must be finite and >= 0, got {v}")));
        }
        if let Some(&v) = self.initial_toll.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Parameter(format!("initial toll must be finite and >= 0, got {v}")));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, tagged with the RNG scheme.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let mut hasher = Sha256::new();
        hasher.update(RNG_SCHEME.as_bytes());
        hasher.update(json.as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `(X(n), P(n))` plus the generator state that produces the next draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub n: usize,
    pub load: Vec<f64>,
    pub toll: Vec<f64>,
    streams: DemandStreams,
    shares: Vec<f64>,
}

/// Everything drawn and computed during one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub zeta: f64,
    pub xi: Vec<f64>,
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
}

impl SimState {
    pub fn initial(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            n: 0,
            load: cfg.initial_load.clone(),
            toll: cfg.initial_toll.clone(),
            streams: DemandStreams::new(cfg.seed, cfg.network.len()),
            shares: Vec::with_capacity(cfg.network.len()),
        })
    }

    /// Advance by one step. Load and toll both read the pre-step state.
    pub fn step(&mut self, cfg: &SimConfig) -> StepDraw {
        let net = &cfg.network;
        let zeta = sample_inflow(&cfg.demand, &mut self.streams);
        let xi = sample_outflows(&cfg.demand, &mut self.streams);

        let (load, toll) = (&self.load, &self.toll);
        logit_shares(
            net.links().iter().zip(load.iter().zip(toll)).map(|(l, (&x, &p))| l.eval(x) + p),
            cfg.beta,
            &mut self.shares,
        );
        let inflow: Vec<f64> = self.shares.iter().map(|s| s * zeta).collect();
        let outflow: Vec<f64> = load.iter().zip(&xi).map(|(x, f)| x * f).collect();

        let a = cfg.toll_step;
        let new_toll: Vec<f64> = net
            .links()
            .iter()
            .zip(load.iter().zip(toll))
            .map(|(l, (&x, &p))| (1.0 - a) * p + a * x * l.derivative(x))
            .collect();
        for i in 0..load.len() {
            self.load[i] = self.load[i] + inflow[i] - outflow[i];
        }
        self.toll = new_toll;
        self.n += 1;
        StepDraw { zeta, xi, inflow, outflow }
    }
}

/// Noise term `M_i = (μ/λ) h_i(X, P)(ζ − λ) − X_i(ξ_i − μ)`.
///
/// With it the load update splits exactly as
/// `X(n+1) = (1 − μ) X(n) + μ h(X(n), P(n)) + M(n+1)`, and `M` has zero
/// conditional mean.
#[allow(clippy::too_many_arguments)]
pub fn martingale_term(
    net: &ParallelNetwork,
    load: &[f64],
    toll: &[f64],
    zeta: f64,
    xi: &[f64],
    lambda: f64,
    mu: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    net.check_len(xi)?;
    let h = crate::equilibrium::h_field(net, load, toll, lambda, mu, beta)?;
    Ok(h.iter()
        .zip(load.iter().zip(xi))
        .map(|(hi, (x, f))| mu / lambda * hi * (zeta - lambda) - x * (f - mu))
        .collect())
}

/// `K` with `E[M_i² | X] ≤ K (1 + X_i²)` for the noise term of [`martingale_term`].
pub fn second_moment_constant(model: &DemandModel) -> f64 {
    let (zl, zu) = model.inflow_bounds();
    let (xl, xu) = model.outflow_bounds();
    2.0 * (zu - zl).powi(2).max((xu - xl).powi(2))
}

/// Upper bound on `X_i(n)` implied by bounded arrivals and discharges.
pub fn load_bound(initial: f64, n: usize, xi_lo: f64, zeta_hi: f64) -> f64 {
    initial * (1.0 - xi_lo).powi(n.min(i32::MAX as usize) as i32) + zeta_hi / xi_lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub n: usize,
    pub load: Vec<f64>,
    pub toll: Vec<f64>,
}

/// The draws that produced the state at a recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub zeta: f64,
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Record>,
    /// Parallel to `steps` when samples are recorded; `None` at `n = 0`.
    pub samples: Option<Vec<Option<Sample>>>,
    pub fingerprint: String,
    pub seed: u64,
}

impl Trajectory {
    pub fn links(&self) -> usize {
        self.steps.first().map_or(0, |r| r.load.len())
    }

    /// CSV with columns `step, x_1..x_R, p_1..p_R[, zeta, xi_1..xi_R]`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let rows = self.steps.iter().enumerate().map(|(k, rec)| TrajectoryRow {
            index: rec.n.to_string(),
            load: &rec.load,
            toll: &rec.toll,
            sample: self.samples.as_ref().map(|s| {
                s[k].as_ref().map_or_else(
                    || (f64::NAN, vec![f64::NAN; rec.load.len()]),
                    |smp| (smp.zeta, smp.xi.clone()),
                )
            }),
        });
        crate::series::write_trajectory_csv(out, "step", self.links(), self.samples.is_some(), rows)
    }
}

/// Runs `cfg.horizon` steps from the initial state.
pub fn run(cfg: &SimConfig) -> Result<Trajectory> {
    let mut state = SimState::initial(cfg)?;
    let capacity = cfg.horizon / cfg.record_every + 1;
    let mut steps = Vec::with_capacity(capacity);
    let mut samples = cfg.record_samples.then(|| Vec::with_capacity(capacity));
    steps.push(Record { n: 0, load: state.load.clone(), toll: state.toll.clone() });
    if let Some(s) = samples.as_mut() {
        s.push(None);
    }
    while state.n < cfg.horizon {
        let draw = state.step(cfg);
        if state.n % cfg.record_every == 0 {
            steps.push(Record { n: state.n, load: state.load.clone(), toll: state.toll.clone() });
            if let Some(s) = samples.as_mut() {
                s.push(Some(Sample { zeta: draw.zeta, xi: draw.xi }));
            }
        }
    }
    Ok(Trajectory {
        steps,
        samples,
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::h_field;
    use crate::network::LatencySpec;
    use approx::assert_relative_eq;

    fn two_link() -> ParallelNetwork {
        ParallelNetwork::new(vec![
            LatencySpec::new([(1, 1.0)]).unwrap(),
            LatencySpec::new([(1, 2.0)]).unwrap(),
        ])
        .unwrap()
    }

    fn s1(seed: u64) -> SimConfig {
        SimConfig::new(
            ParallelNetwork::quadratic_family(6).unwrap(),
            DemandModel::default_for(0.1, 0.05).unwrap(),
            100.0,
            0.0015,
            2000,
            seed,
        )
    }

    #[test]
    fn degenerate_inflow_is_constant() {
        let model = DemandModel::degenerate(0.1, 0.05).unwrap();
        let mut streams = DemandStreams::new(3, 4);
        for _ in 0..100 {
            assert_eq!(sample_inflow(&model, &mut streams), 0.1);
            assert_eq!(sample_outflows(&model, &mut streams), vec![0.05; 4]);
        }
    }

    #[test]
    fn model_validation() {
        assert!(DemandModel::default_for(0.1, 0.05).is_ok());
        let (lo, hi) = DemandModel::default_for(0.1, 0.05).unwrap().outflow_bounds();
        assert_relative_eq!(lo, 0.025, epsilon = 1e-15);
        assert_relative_eq!(hi, 0.075, epsilon = 1e-15);
        // wide support near one gets clamped symmetrically
        let m = DemandModel::default_for(0.1, 0.9).unwrap();
        assert!(m.outflow_bounds().1 < 1.0);
        assert_relative_eq!(m.mu(), 0.9, epsilon = 1e-15);
        assert!(DemandModel::new(
            Distribution::Uniform { lo: 0.0, hi: 1.0 },
            Distribution::Degenerate { point: 0.5 }
        )
        .is_err());
        assert!(DemandModel::new(
            Distribution::Degenerate { point: 1.0 },
            Distribution::Uniform { lo: 0.5, hi: 1.0 }
        )
        .is_err());
        assert!(DemandModel::with_means(
            0.2,
            0.05,
            Distribution::Uniform { lo: 0.05, hi: 0.15 },
            Distribution::Degenerate { point: 0.05 }
        )
        .is_err());
        let beta = Distribution::ScaledBeta { a: 2.0, b: 6.0, lo: 0.0, hi: 0.4 };
        assert_relative_eq!(beta.mean(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn distribution_text_round_trip() {
        for d in [
            Distribution::Uniform { lo: 0.05, hi: 0.15 },
            Distribution::ScaledBeta { a: 2.0, b: 3.0, lo: 0.01, hi: 0.5 },
            Distribution::Degenerate { point: 0.1 },
        ] {
            assert_eq!(d.to_string().parse::<Distribution>().unwrap(), d);
        }
        assert!("normal(0, 1)".parse::<Distribution>().is_err());
        assert!("uniform(2, 1)".parse::<Distribution>().is_err());
    }

    #[test]
    fn samples_stay_in_support() {
        let model = DemandModel::new(
            Distribution::ScaledBeta { a: 0.5, b: 0.5, lo: 0.05, hi: 0.15 },
            Distribution::Uniform { lo: 0.02, hi: 0.08 },
        )
        .unwrap();
        let mut streams = DemandStreams::new(11, 3);
        for _ in 0..10_000 {
            let z = sample_inflow(&model, &mut streams);
            assert!((0.05..=0.15).contains(&z));
            for f in sample_outflows(&model, &mut streams) {
                assert!((0.02..=0.08).contains(&f));
            }
        }
    }

    #[test]
    fn adding_links_keeps_existing_streams() {
        let model = DemandModel::default_for(0.1, 0.05).unwrap();
        let mut small = DemandStreams::new(5, 2);
        let mut large = DemandStreams::new(5, 4);
        for _ in 0..50 {
            assert_eq!(sample_inflow(&model, &mut small), sample_inflow(&model, &mut large));
            let a = sample_outflows(&model, &mut small);
            let b = sample_outflows(&model, &mut large);
            assert_eq!(a[..], b[..2]);
        }
    }

    #[test]
    fn frozen_tolls_when_step_is_zero() {
        let mut cfg = s1(1);
        cfg.toll_step = 0.0;
        cfg.initial_toll = vec![0.3; 6];
        let mut state = SimState::initial(&cfg).unwrap();
        for _ in 0..100 {
            state.step(&cfg);
            assert_eq!(state.toll, vec![0.3; 6]);
        }
    }

    #[test]
    fn noise_free_step_is_mean_recursion() {
        let net = ParallelNetwork::quadratic_family(6).unwrap();
        let mut cfg = SimConfig::new(net.clone(), DemandModel::degenerate(0.1, 0.05).unwrap(), 100.0, 0.01, 10, 0);
        cfg.initial_load = vec![0.5, 0.4, 0.3, 0.3, 0.2, 0.1];
        let mut state = SimState::initial(&cfg).unwrap();
        for _ in 0..10 {
            let x = state.load.clone();
            let h = h_field(&net, &x, &state.toll, 0.1, 0.05, 100.0).unwrap();
            state.step(&cfg);
            for i in 0..6 {
                assert_relative_eq!(state.load[i], 0.95 * x[i] + 0.05 * h[i], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn one_step_hand_example() {
        let cfg = SimConfig {
            initial_load: vec![1.0, 1.0],
            ..SimConfig::new(two_link(), DemandModel::degenerate(0.1, 0.05).unwrap(), 1.0, 0.0, 1, 0)
        };
        let mut state = SimState::initial(&cfg).unwrap();
        let draw = state.step(&cfg);
        assert_relative_eq!(draw.inflow[0], 0.073_105_857_863, epsilon = 1e-12);
        assert_relative_eq!(draw.inflow[1], 0.026_894_142_137, epsilon = 1e-12);
        assert_relative_eq!(state.load[0], 1.023_105_857_863, epsilon = 1e-12);
        assert_relative_eq!(state.load[1], 0.976_894_142_137, epsilon = 1e-12);
    }

    #[test]
    fn toll_update_uses_pre_step_load() {
        let cfg = SimConfig {
            initial_load: vec![1.0, 1.0],
            initial_toll: vec![0.2, 0.0],
            ..SimConfig::new(ParallelNetwork::quadratic_family(2).unwrap(), DemandModel::degenerate(0.1, 0.05).unwrap(), 1.0, 0.5, 1, 0)
        };
        let mut state = SimState::initial(&cfg).unwrap();
        state.step(&cfg);
        // marginal costs at X(0) = 1 are 2 and 4
        assert_eq!(state.toll, vec![0.5 * 0.2 + 0.5 * 2.0, 0.5 * 4.0]);
    }

    #[test]
    fn conservation_and_positivity() {
        let cfg = s1(9);
        let mut state = SimState::initial(&cfg).unwrap();
        for _ in 0..2000 {
            let before = state.load.clone();
            let draw = state.step(&cfg);
            for i in 0..6 {
                let delta = state.load[i] - before[i];
                let expected = draw.inflow[i] - draw.outflow[i];
                assert!((delta - expected).abs() <= 4.0 * f64::EPSILON * state.load[i].max(before[i]));
                assert!(state.load[i] > 0.0);
                assert!(state.toll[i] >= 0.0);
            }
        }
    }

    #[test]
    fn decomposition_matches_step() {
        let cfg = s1(0);
        let mut state = SimState::initial(&cfg).unwrap();
        for _ in 0..300 {
            let (x, p) = (state.load.clone(), state.toll.clone());
            let draw = state.step(&cfg);
            let h = crate::equilibrium::h_field(&cfg.network, &x, &p, 0.1, 0.05, 100.0).unwrap();
            let m = martingale_term(&cfg.network, &x, &p, draw.zeta, &draw.xi, 0.1, 0.05, 100.0).unwrap();
            for i in 0..6 {
                let predicted = (1.0 - 0.05) * x[i] + 0.05 * h[i] + m[i];
                assert!((predicted - state.load[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn martingale_vanishes_at_means() {
        let net = ParallelNetwork::quadratic_family(3).unwrap();
        let m = martingale_term(&net, &[0.4, 0.2, 0.9], &[0.1, 0.0, 0.3], 0.1, &[0.05; 3], 0.1, 0.05, 100.0).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn run_is_deterministic_and_spaced() {
        let mut cfg = s1(42);
        cfg.record_every = 7;
        cfg.record_samples = true;
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.steps.windows(2).all(|w| w[1].n - w[0].n == 7));
        assert_eq!(a.steps.len(), 2000 / 7 + 1);
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(run(&other).unwrap().steps, a.steps);
        assert_ne!(other.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn config_validation() {
        let mut cfg = s1(0);
        cfg.toll_step = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = s1(0);
        cfg.initial_toll[2] = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = s1(0);
        cfg.initial_load.pop();
        assert!(matches!(cfg.validate(), Err(Error::Shape { .. })));
    }

    #[test]
    fn csv_layout() {
        let mut cfg = SimConfig::new(two_link(), DemandModel::default_for(0.1, 0.05).unwrap(), 1.0, 0.01, 3, 0);
        cfg.record_samples = true;
        let traj = run(&cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,x_1,x_2,p_1,p_2,zeta,xi_1,xi_2");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[1], "0.0000000000000000e0");
        assert_eq!(first[5], "NaN");
        assert_eq!(text.lines().count(), 5);
    }
}
