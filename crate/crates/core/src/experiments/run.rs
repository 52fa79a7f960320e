//! Execution of resolved experiments and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::csv::{num, overlap_cells, overlap_header, overlap_values, Table};
use super::{validate_integrals, ExperimentConfig, InitList, InitSpec, Kind, RunSpec};
use crate::dynamics::eps_threshold_config;
use crate::error::{LabError, Result};
use crate::ode::{integrate, trajectory_crossing};
use crate::order_params::{cosine_similarity, StopReason, Trajectory};
use crate::sim::{run_ensemble, RunningStats, SimTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    NumericFailure,
    ValidationFailure,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::NumericFailure => 3,
            Status::ValidationFailure => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    pub artifacts: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub warnings: Vec<String>,
}

/// One sweep cell. `alpha_tilde` is `None` when the threshold was never
/// reached, the run diverged, or the cell failed (`error` set).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub coords: Vec<(String, f64)>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "eta_J")]
    pub eta_j: f64,
    pub eta_w: f64,
    pub alpha_tilde: Option<f64>,
    pub eps_final: f64,
    pub stop: Option<StopReason>,
    pub error: Option<String>,
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<(String, String)>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        let hash = hex::encode(Sha256::digest(contents.as_bytes()));
        self.artifacts.push((name.to_string(), hash));
        Ok(())
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| LabError::config("jobs", e.to_string()))
}

fn file_name(prefix: &str, run: &RunSpec, single: bool, suffix: &str) -> String {
    if single {
        format!("{prefix}{suffix}.csv")
    } else {
        format!("{prefix}_{:03}{suffix}.csv", run.index)
    }
}

fn stop_warning(label: &str, stop: &StopReason) -> Option<String> {
    match stop {
        StopReason::Completed => None,
        StopReason::NonFinite { alpha } => Some(format!("{label}: non-finite state at alpha = {alpha}; trajectory is partial")),
        StopReason::NumericError { alpha, message } => {
            Some(format!("{label}: numeric error at alpha = {alpha} ({message}); trajectory is partial"))
        }
    }
}

fn theory_csv(traj: &Trajectory, k: usize, m: usize) -> String {
    let mut header = vec!["alpha".to_string(), "eps_meta".to_string()];
    header.extend(overlap_header(k, m));
    let mut t = Table::new(&header);
    for i in 0..traj.len() {
        let mut cells = vec![num(traj.schedule[i]), num(traj.eps_meta[i])];
        cells.extend(overlap_cells(&traj.states[i], &traj.rho[i]));
        t.row(&cells);
    }
    t.finish()
}

fn sim_csv(traj: &SimTrajectory, k: usize, m: usize) -> Result<String> {
    let mut header: Vec<String> = ["alpha", "eps_meta", "eps_meta_empirical", "eps_meta_ma"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(overlap_header(k, m));
    let mut t = Table::new(&header);
    for i in 0..traj.len() {
        let rho = cosine_similarity(&traj.states[i])?;
        let mut cells = vec![
            num(traj.schedule[i]),
            num(traj.eps_analytic[i]),
            num(traj.eps_empirical[i]),
            num(traj.eps_ma[i]),
        ];
        cells.extend(overlap_cells(&traj.states[i], &rho));
        t.row(&cells);
    }
    Ok(t.finish())
}

/// Per-record quantities of a simulated trajectory: analytic ε, empirical ε,
/// then Q upper triangle and R.
fn sim_values(traj: &SimTrajectory, i: usize) -> Vec<f64> {
    let mut v = vec![traj.eps_analytic[i], traj.eps_empirical[i]];
    v.extend(overlap_values(&traj.states[i]));
    v
}

fn value_names(k: usize, m: usize) -> Vec<String> {
    let mut names = vec!["eps_meta".to_string(), "eps_meta_empirical".to_string()];
    names.extend(overlap_header(k, m).into_iter().filter(|h| !h.starts_with("rho")));
    names
}

struct EnsembleStats {
    schedule: Vec<f64>,
    stats: Vec<Vec<RunningStats>>,
}

fn ensemble_stats(trajs: &[SimTrajectory]) -> EnsembleStats {
    let len = trajs.iter().map(|t| t.len()).min().unwrap_or(0);
    let schedule = trajs.first().map(|t| t.schedule[..len].to_vec()).unwrap_or_default();
    let stats = (0..len)
        .map(|i| {
            let width = sim_values(&trajs[0], i).len();
            let mut row = vec![RunningStats::default(); width];
            for t in trajs {
                for (s, x) in row.iter_mut().zip(sim_values(t, i)) {
                    s.push(x);
                }
            }
            row
        })
        .collect();
    EnsembleStats { schedule, stats }
}

fn ensemble_csv(e: &EnsembleStats, k: usize, m: usize) -> String {
    let mut header = vec!["alpha".to_string()];
    for name in value_names(k, m) {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    let mut t = Table::new(&header);
    for (a, row) in e.schedule.iter().zip(&e.stats) {
        let mut cells = vec![num(*a)];
        for s in row {
            cells.push(num(s.mean()));
            cells.push(num(s.std_dev()));
        }
        t.row(&cells);
    }
    t.finish()
}

fn interp(schedule: &[f64], values: &[f64], a: f64) -> f64 {
    if schedule.is_empty() || a > *schedule.last().unwrap() + 1e-9 {
        return f64::NAN;
    }
    let j = schedule.partition_point(|&s| s < a);
    if j == 0 {
        return values[0];
    }
    if j >= schedule.len() {
        return values[schedule.len() - 1];
    }
    let (a0, a1) = (schedule[j - 1], schedule[j]);
    if (a1 - a).abs() < 1e-12 {
        return values[j];
    }
    values[j - 1] + (values[j] - values[j - 1]) * (a - a0) / (a1 - a0)
}

fn compare_csv(theory: &Trajectory, e: &EnsembleStats, k: usize, m: usize) -> String {
    let names: Vec<String> = value_names(k, m).into_iter().filter(|n| n != "eps_meta_empirical").collect();
    let mut header = vec!["alpha".to_string()];
    for n in &names {
        for suffix in ["theory", "sim_mean", "sim_se", "delta"] {
            header.push(format!("{n}_{suffix}"));
        }
    }
    // theory columns in the same order: eps, Q upper, R
    let columns: Vec<Vec<f64>> = {
        let mut cols = vec![theory.eps_meta.clone()];
        let per_state: Vec<Vec<f64>> = theory.states.iter().map(overlap_values).collect();
        let width = per_state.first().map(|v| v.len()).unwrap_or(0);
        for c in 0..width {
            cols.push(per_state.iter().map(|v| v[c]).collect());
        }
        cols
    };
    let mut t = Table::new(&header);
    for (a, row) in e.schedule.iter().zip(&e.stats) {
        let mut cells = vec![num(*a)];
        // skip the empirical column of the ensemble row
        let sim: Vec<&RunningStats> = row.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, s)| s).collect();
        for (col, s) in columns.iter().zip(sim) {
            let th = interp(&theory.schedule, col, *a);
            cells.push(num(th));
            cells.push(num(s.mean()));
            cells.push(num(s.std_err()));
            cells.push(num(s.mean() - th));
        }
        t.row(&cells);
    }
    t.finish()
}

fn coords_json(coords: &[(String, f64)]) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = coords.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    serde_json::Value::Object(map)
}

fn numeric(e: &LabError) -> bool {
    e.exit_code() == 3
}

/// Integrates every cell of the grid to the plan horizon and records the
/// first threshold crossing. Cell failures become sentinel rows.
pub fn sweep(config: &ExperimentConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    let runs = config.resolve()?;
    let plan = config.effective_plan();
    let event = eps_threshold_config(config.effective_threshold())?;
    let rows = pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|run| {
                let mut row = SweepRow {
                    index: run.index,
                    coords: run.coords.clone(),
                    k: run.model.k,
                    eta_j: run.model.eta_j,
                    eta_w: run.model.eta_w,
                    alpha_tilde: None,
                    eps_final: f64::NAN,
                    stop: None,
                    error: None,
                };
                let result = run
                    .init
                    .overlaps(&run.model, &run.variant)
                    .and_then(|init| integrate(&run.model, &run.variant, &init, &plan));
                match result {
                    Ok(traj) => {
                        if traj.stop.is_complete() {
                            row.alpha_tilde = trajectory_crossing(&traj, &event).alpha_tilde;
                            row.eps_final = traj.last_eps().unwrap_or(f64::NAN);
                        }
                        row.stop = Some(traj.stop);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row
            })
            .collect::<Vec<_>>()
    });
    Ok(rows)
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut t = Table::new(&["K", "eta_J", "eta_w", "alpha_tilde", "eps_final"]);
    for r in rows {
        t.row(&[
            r.k.to_string(),
            num(r.eta_j),
            num(r.eta_w),
            r.alpha_tilde.map(num).unwrap_or_default(),
            num(r.eps_final),
        ]);
    }
    t.finish()
}

/// Runs a configuration and writes its artifacts plus `manifest.json` into
/// `out_dir`. `jobs` caps the worker count (0 = all cores). Identical
/// inputs give byte-identical CSV files for any `jobs`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<Outcome> {
    let runs = config.resolve()?;
    let mut w = Writer::new(out_dir)?;
    let mut warnings = Vec::new();
    let mut status = Status::Ok;
    let mut run_info = Vec::new();
    let plan = config.effective_plan();
    let single = runs.len() == 1;
    let workers = pool(jobs)?;

    match config.kind {
        Kind::ValidateIntegrals => {
            let v = config.validate.unwrap_or_default();
            let report = validate_integrals(v.seed, v.count, v.tolerance)?;
            if !report.pass {
                status = Status::ValidationFailure;
            }
            w.write("validate_integrals.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
            run_info.push(serde_json::to_value(&report)?);
        }
        Kind::Theory => {
            let event = eps_threshold_config(config.effective_threshold())?;
            let results: Vec<Result<Trajectory>> = workers.install(|| {
                runs.par_iter()
                    .map(|run| {
                        let init = run.init.overlaps(&run.model, &run.variant)?;
                        integrate(&run.model, &run.variant, &init, &plan)
                    })
                    .collect()
            });
            for (run, result) in runs.iter().zip(results) {
                let name = file_name("theory", run, single, "");
                match result {
                    Ok(traj) => {
                        w.write(&name, &theory_csv(&traj, run.model.k, run.model.m))?;
                        if let Some(msg) = stop_warning(&name, &traj.stop) {
                            warnings.push(msg);
                            status = Status::NumericFailure;
                        }
                        run_info.push(json!({
                            "index": run.index,
                            "coords": coords_json(&run.coords),
                            "file": name,
                            "stop": traj.stop,
                            "alpha_tilde": trajectory_crossing(&traj, &event).alpha_tilde,
                            "eps_final": traj.last_eps(),
                        }));
                    }
                    Err(e) if numeric(&e) => {
                        warnings.push(format!("{name}: {e}"));
                        status = Status::NumericFailure;
                        run_info.push(json!({"index": run.index, "coords": coords_json(&run.coords), "error": e.to_string()}));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Kind::Simulate | Kind::Compare => {
            let opts = config.stream_options();
            for run in &runs {
                let base = run.init.sim_state(&run.model, &run.variant)?;
                let trajs = workers.install(|| run_ensemble(&base, &config.seeds, &opts))?;
                let (k, m) = (run.model.k, run.model.m);
                let mut files = Vec::new();
                for (seed, traj) in config.seeds.iter().zip(&trajs) {
                    let name = file_name("simulate", run, single, &format!("_seed{seed}"));
                    w.write(&name, &sim_csv(traj, k, m)?)?;
                    if let Some(msg) = stop_warning(&name, &traj.stop) {
                        warnings.push(msg);
                        status = Status::NumericFailure;
                    }
                    files.push(json!({"seed": seed, "file": name, "stop": traj.stop}));
                }
                let stats = ensemble_stats(&trajs);
                let ens_name = file_name("ensemble", run, single, "");
                w.write(&ens_name, &ensemble_csv(&stats, k, m))?;
                let mut info = json!({
                    "index": run.index,
                    "coords": coords_json(&run.coords),
                    "simulations": files,
                    "ensemble": ens_name,
                });
                if config.kind == Kind::Compare {
                    let init = crate::sim::measure_order_params(&base)?;
                    let mut theory_plan = plan;
                    theory_plan.alpha_max = opts.alpha_max;
                    let theory = integrate(&run.model, &run.variant, &init, &theory_plan)?;
                    let th_name = file_name("theory", run, single, "");
                    w.write(&th_name, &theory_csv(&theory, k, m))?;
                    if let Some(msg) = stop_warning(&th_name, &theory.stop) {
                        warnings.push(msg);
                        status = Status::NumericFailure;
                    }
                    let cmp_name = file_name("compare", run, single, "");
                    w.write(&cmp_name, &compare_csv(&theory, &stats, k, m))?;
                    info["theory"] = json!(th_name);
                    info["compare"] = json!(cmp_name);
                }
                run_info.push(info);
            }
        }
        Kind::Sweep => {
            let rows = sweep(config, jobs)?;
            w.write("sweep.csv", &sweep_csv(&rows))?;
            for r in &rows {
                if let Some(e) = &r.error {
                    warnings.push(format!("sweep cell {}: {e}", r.index));
                }
                run_info.push(serde_json::to_value(r)?);
            }
        }
    }

    let mut resolved = config.clone();
    if resolved.kind == Kind::ValidateIntegrals {
        resolved.validate = Some(config.validate.unwrap_or_default());
    } else {
        resolved.plan = Some(plan);
        resolved.threshold = Some(config.effective_threshold());
        if resolved.init.is_none() {
            let name = if matches!(config.kind, Kind::Simulate | Kind::Compare) { "random" } else { "paper-fig3" };
            resolved.init = Some(InitList::One(InitSpec::Named(name.into())));
        }
    }
    resolved.output = None;
    let manifest = json!({
        "kind": config.kind,
        "config": resolved,
        "seeds": config.seeds,
        "status": status,
        "runs": run_info,
        "artifacts": w.artifacts.iter().map(|(f, h)| json!({"file": f, "sha256": h})).collect::<Vec<_>>(),
        "warnings": warnings,
    });
    let manifest_path = w.dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    let artifacts = w.artifacts.iter().map(|(f, _)| w.dir.join(f)).collect();
    Ok(Outcome {
        status,
        artifacts,
        manifest: manifest_path,
        warnings,
    })
}
