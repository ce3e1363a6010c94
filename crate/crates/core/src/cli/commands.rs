//! File-producing commands. Each returns the paths it wrote.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use super::config::{Artifact, ExperimentConfig};
use crate::diagnostics::{ensemble_run, total_latency, EnsembleOptions};
use crate::dynamics::{run, SimConfig};
use crate::equilibrium::{solve_equilibrium_toll_with, solve_sue_with};
use crate::error::{Error, Result};
use crate::ode::{integrate_coupled, stable_coupled_dt, OdeConfig};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with<F>(path: PathBuf, f: F) -> Result<PathBuf>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut out = create(&path)?;
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn trajectory_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("trajectory_seed{seed}.csv"))
}

/// One trajectory CSV per seed, plus any extra artifacts listed in the config.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let traj = run(&SimConfig { seed, ..cfg.sim.clone() })?;
        written.push(write_with(trajectory_path(&cfg.output, seed), |out| traj.write_csv(out))?);
    }
    for artifact in &cfg.artifacts {
        match artifact {
            Artifact::Trajectory => {}
            Artifact::Ode => written.extend(ode(cfg)?),
            Artifact::Equilibrium => written.extend(equilibrium(cfg)?),
            Artifact::Stats => written.extend(stats(cfg)?),
        }
    }
    Ok(written)
}

/// Integration settings for the coupled system; records land on the discrete
/// step grid `t = a n` unless an explicit `ode_dt` breaks the alignment.
pub fn ode_config(cfg: &ExperimentConfig) -> Result<OdeConfig> {
    let a = cfg.sim.toll_step;
    if a <= 0.0 {
        return Err(Error::ConfigInvalid(
            "the coupled ODE needs a toll step a > 0 (with a = 0 the toll never moves)".into(),
        ));
    }
    let params = cfg.params()?;
    let epsilon = a / cfg.sim.demand.mu();
    let (dt, record_every) = match cfg.ode_dt {
        Some(dt) => (dt, ((a / dt).round() as usize).max(1)),
        None => {
            let stable = stable_coupled_dt(&cfg.sim.network, &params, epsilon, &cfg.sim.initial_load, &cfg.sim.initial_toll)?;
            let per_step = (a / stable).ceil() as usize;
            (a / per_step as f64, per_step)
        }
    };
    let ode_cfg = OdeConfig {
        epsilon,
        dt,
        horizon: cfg.ode_horizon,
        initial_load: cfg.sim.initial_load.clone(),
        initial_toll: cfg.sim.initial_toll.clone(),
        record_every,
    };
    ode_cfg.validate(&cfg.sim.network)?;
    Ok(ode_cfg)
}

pub fn ode(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let ode_cfg = ode_config(cfg)?;
    let traj = integrate_coupled(&ode_cfg, &cfg.sim.network, &cfg.params()?)?;
    Ok(vec![write_with(cfg.output.join("ode.csv"), |out| traj.write_csv(out))?])
}

/// Flat JSON record of `(x̄(p̄), p̄, ȳ^(β))`, residuals and social costs.
pub fn equilibrium_record(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let net = &cfg.sim.network;
    let params = cfg.params()?;
    let sol = solve_equilibrium_toll_with(net, &params, &cfg.solver)?;
    let zeros = vec![0.0; net.len()];
    let untolled = solve_sue_with(net, &zeros, &params, &cfg.solver, None)?.load;
    Ok(json!({
        "preset": cfg.preset.name(),
        "links": net.len(),
        "beta": params.beta(),
        "demand": params.demand(),
        "sue_load": sol.sue_load,
        "toll": sol.toll,
        "social_load": sol.social_load,
        "untolled_load": untolled,
        "total_latency_tolled": total_latency(net, &sol.sue_load)?,
        "total_latency_social": total_latency(net, &sol.social_load)?,
        "total_latency_untolled": total_latency(net, &untolled)?,
        "residual_sue": sol.residuals.sue,
        "residual_toll": sol.residuals.toll,
        "residual_social_kkt": sol.residuals.social_kkt,
        "residual_consistency": sol.residuals.consistency,
        "iterations_toll": sol.iterations.toll,
        "iterations_sue_total": sol.iterations.sue_total,
    }))
}

pub fn equilibrium(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let record = equilibrium_record(cfg)?;
    let text = serde_json::to_string_pretty(&record)?;
    Ok(vec![write_with(cfg.output.join("equilibrium.json"), |out| writeln!(out, "{text}"))?])
}

/// Ensemble over the seed list: `stats.csv` per seed and `stats.json` aggregate.
pub fn stats(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let opts = EnsembleOptions {
        tail_fraction: cfg.tail_fraction,
        deltas: cfg.deltas.clone(),
        keep_mean_path: false,
    };
    let stats = ensemble_run(&cfg.sim, &cfg.seeds, &opts)?;
    let csv = write_with(cfg.output.join("stats.csv"), |out| stats.write_summary_csv(out))?;
    let record = json!({
        "preset": cfg.preset.name(),
        "seeds": cfg.seeds,
        "tail_fraction": stats.tail_fraction,
        "mean_tail_mse": stats.mean_tail_mse,
        "std_tail_mse": stats.std_tail_mse,
        "standard_error": stats.standard_error(),
        "neighborhood_prob": stats.neighborhood_prob.iter().map(|(d, p)| json!({"delta": d, "prob": p})).collect::<Vec<_>>(),
        "tail_load": stats.tail_load(),
        "tail_toll": stats.tail_toll(),
        "reference_load": stats.reference_load,
        "reference_toll": stats.reference_toll,
    });
    let text = serde_json::to_string_pretty(&record)?;
    let json_path = write_with(cfg.output.join("stats.json"), |out| writeln!(out, "{text}"))?;
    Ok(vec![csv, json_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::parse_config;

    fn small(dir: &Path, extra: &str) -> ExperimentConfig {
        parse_config(&format!(
            "preset = s1\nhorizon = 40\nseeds = 0, 1\node_horizon = 0.5\noutput = {}\n{extra}",
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn simulate_writes_one_csv_per_seed_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), "");
        let first = simulate(&cfg).unwrap();
        assert_eq!(first.len(), 2);
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();
        simulate(&cfg).unwrap();
        for (p, b) in first.iter().zip(&bytes) {
            assert_eq!(&fs::read(p).unwrap(), b);
        }
        assert_ne!(bytes[0], bytes[1]);
    }

    #[test]
    fn equilibrium_json_fields() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), "");
        let path = &equilibrium(&cfg).unwrap()[0];
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert!(v["residual_toll"].as_f64().unwrap() < 1e-9);
        assert!(v["residual_consistency"].as_f64().unwrap() < 1e-6);
        assert_eq!(v["toll"].as_array().unwrap().len(), 6);
    }

    #[test]
    fn ode_rows_on_step_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), "");
        let path = &ode(&cfg).unwrap()[0];
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("t,x_1,"));
        let times: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(times.len(), (0.5f64 / 0.0015).ceil() as usize + 1);
        assert!((times[1] - 0.0015).abs() < 1e-12);
    }

    #[test]
    fn ode_rejects_zero_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&format!("preset = s3\noutput = {}", dir.path().display())).unwrap();
        assert!(ode(&cfg).is_err());
    }

    #[test]
    fn stats_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), "");
        let paths = stats(&cfg).unwrap();
        let csv = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&paths[1]).unwrap()).unwrap();
        assert_eq!(v["neighborhood_prob"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn simulate_with_extra_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), "artifacts = trajectory, equilibrium, stats");
        let paths = simulate(&cfg).unwrap();
        let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(
            names,
            ["trajectory_seed0.csv", "trajectory_seed1.csv", "equilibrium.json", "stats.csv", "stats.json"]
        );
    }
}
