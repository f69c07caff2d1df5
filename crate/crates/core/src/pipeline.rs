//! End-to-end pipeline: sample noisy dynamics data, fit the GP, initialize
//! the controller from the linearized LQR, improve it by synthesis, certify
//! a stability region, and roll out the true plant from certified starts.
//! Every stage reads its inputs from and writes its outputs to a working
//! directory, so stages can be re-run and inspected individually.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certifier::{certify, controller_hash, CertifierError, StabilityCertificate};
use crate::controller::{
    init_lqr, synthesize, ClosedLoopModel, ControllerError, CostSpec, DecreaseMargin, StateCost,
    SynthesisParams, TraceRow, ValueFunctionParams,
};
use crate::geometry::{BoxBounds, GeometryError, Triangulation};
use crate::gpmodel::{fit_mean, optimize_hyperparams, GpError, GpMean, Hyperparams, TrainingSet};
use crate::simulator::{sweep, Dynamics, PlantSpec, SweepEntry};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} requires missing input {path}")]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown plant {0:?}")]
    UnknownPlant(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Certifier(#[from] CertifierError),
}

impl PipelineError {
    /// The missing-input path, when the error is a missing input.
    pub fn missing(&self) -> Option<&Path> {
        match self {
            PipelineError::MissingInput { path, .. } => Some(path),
            _ => None,
        }
    }
}

/// Full pipeline configuration; the defaults reproduce the damped-pendulum
/// study (9x9 data grid with +-0.1 uniform noise on [-6, 6]^2, 21x21 check
/// states, 10000 synthesis iterations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub plant: String,
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    pub data_points_per_dim: usize,
    pub noise_amplitude: f64,
    pub gp_budget: usize,
    pub kappa_theta: f64,
    pub check_points_per_dim: usize,
    pub r: f64,
    pub kappa_alpha: f64,
    pub kappa: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub eta_offset: f64,
    pub certify_lower: Vec<f64>,
    pub certify_upper: Vec<f64>,
    pub certify_step: f64,
    pub certify_margin: f64,
    pub dt: f64,
    pub horizon: f64,
    pub conv_radius: f64,
    pub num_trajectories: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            plant: "pendulum".into(),
            box_lower: vec![-6.0, -6.0],
            box_upper: vec![6.0, 6.0],
            data_points_per_dim: 9,
            noise_amplitude: 0.1,
            gp_budget: 100,
            kappa_theta: 3.0,
            check_points_per_dim: 21,
            r: 1.0,
            kappa_alpha: 0.001,
            kappa: 500.0,
            step_size: 1e-5,
            iterations: 10000,
            eta_offset: 5.0,
            certify_lower: vec![-6.0, -6.0],
            certify_upper: vec![6.0, 6.0],
            certify_step: 0.1,
            certify_margin: 1e-6,
            dt: 0.005,
            horizon: 20.0,
            conv_radius: 0.1,
            num_trajectories: 25,
        }
    }
}

impl PipelineConfig {
    pub fn dynamics(&self) -> Result<Dynamics, PipelineError> {
        match self.plant.as_str() {
            "pendulum" => Ok(Dynamics::Pendulum),
            "linear_decay" => Ok(Dynamics::LinearDecay),
            other => Err(PipelineError::UnknownPlant(other.to_string())),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.box_lower.len()
    }

    /// The true input matrix of the configured plant.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }

    pub fn cost(&self) -> CostSpec {
        CostSpec::new(StateCost::SquaredNorm, DMatrix::from_element(1, 1, self.r))
    }

    pub fn sample_box(&self) -> Result<BoxBounds, PipelineError> {
        Ok(BoxBounds::new(self.box_lower.clone(), self.box_upper.clone())?)
    }

    pub fn check_states(&self) -> Result<Vec<DVector<f64>>, PipelineError> {
        Ok(self.sample_box()?.grid(self.check_points_per_dim))
    }

    pub fn plant_spec(&self) -> Result<PlantSpec, PipelineError> {
        Ok(PlantSpec {
            dynamics: self.dynamics()?,
            g: self.input_matrix(),
            dt: self.dt,
            horizon: self.horizon,
            conv_radius: self.conv_radius,
            div_radius: 50.0,
        })
    }
}

fn write(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|source| PipelineError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn read(stage: &'static str, path: &Path) -> Result<String, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput { stage, path: path.into() });
    }
    fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, s: &str) -> Result<T, PipelineError> {
    serde_json::from_str(s)
        .map_err(|e| PipelineError::Malformed { path: path.into(), reason: e.to_string() })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Samples the true drift on a uniform grid with additive uniform noise and
/// writes `data.csv` (columns `x_1..x_n, f_1..f_n`).
pub fn gen_data_stage(cfg: &PipelineConfig, out: &Path) -> Result<TrainingSet, PipelineError> {
    let dyn_ = cfg.dynamics()?;
    let grid = cfg.sample_box()?.grid(cfg.data_points_per_dim);
    let n = cfg.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inputs = Vec::with_capacity(grid.len());
    let mut targets = vec![Vec::with_capacity(grid.len()); n];
    for x in &grid {
        let f = dyn_.eval(x);
        inputs.push(x.iter().cloned().collect::<Vec<f64>>());
        for d in 0..n {
            let noise = rng.gen_range(-cfg.noise_amplitude..=cfg.noise_amplitude);
            targets[d].push(f[d] + noise);
        }
    }
    let ts = TrainingSet::new(inputs, targets)?;

    let mut csv = String::new();
    for d in 0..n {
        csv.push_str(&format!("x_{},", d + 1));
    }
    for d in 0..n {
        csv.push_str(&format!("f_{}", d + 1));
        csv.push(if d + 1 == n { '\n' } else { ',' });
    }
    for (i, x) in ts.inputs.iter().enumerate() {
        for v in x {
            csv.push_str(&format!("{v},"));
        }
        for d in 0..n {
            csv.push_str(&format!("{}", ts.targets[d][i]));
            csv.push(if d + 1 == n { '\n' } else { ',' });
        }
    }
    write(&out.join("data.csv"), &csv)?;
    Ok(ts)
}

/// Reads `data.csv` back into a training set.
pub fn load_training(stage: &'static str, out: &Path) -> Result<TrainingSet, PipelineError> {
    let path = out.join("data.csv");
    let body = read(stage, &path)?;
    let mut lines = body.lines();
    let header = lines.next().unwrap_or("");
    let n = header.split(',').filter(|c| c.starts_with("x_")).count();
    if n == 0 {
        return Err(PipelineError::Malformed { path, reason: "no x_ columns".into() });
    }
    let mut inputs = Vec::new();
    let mut targets = vec![Vec::new(); n];
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        let vals = vals.map_err(|e| PipelineError::Malformed {
            path: path.clone(),
            reason: format!("line {}: {e}", lineno + 2),
        })?;
        if vals.len() != 2 * n {
            return Err(PipelineError::Malformed {
                path,
                reason: format!("line {}: expected {} columns", lineno + 2, 2 * n),
            });
        }
        inputs.push(vals[..n].to_vec());
        for d in 0..n {
            targets[d].push(vals[n + d]);
        }
    }
    Ok(TrainingSet::new(inputs, targets)?)
}

/// Optimizes the hyperparameters from the default initialization and fits
/// the mean; writes `gp_hyperparams.json` and the per-dimension mean
/// expressions to `gp.json`.
pub fn fit_gp_stage(cfg: &PipelineConfig, out: &Path) -> Result<GpMean, PipelineError> {
    let ts = load_training("fit-gp", out)?;
    let ini = Hyperparams::initial(ts.state_dim());
    let hp = optimize_hyperparams(&ts, &ini, cfg.kappa_theta, cfg.gp_budget)?;
    let gp = fit_mean(&ts, &hp)?;
    write(&out.join("gp_hyperparams.json"), &to_json(&hp))?;
    write(&out.join("gp.json"), &to_json(&gp.to_exprs()))?;
    Ok(gp)
}

/// Rebuilds the fitted mean from `data.csv` plus `gp_hyperparams.json`.
pub fn load_gp(stage: &'static str, out: &Path) -> Result<GpMean, PipelineError> {
    let ts = load_training(stage, out)?;
    let path = out.join("gp_hyperparams.json");
    let hp: Hyperparams = from_json(&path, &read(stage, &path)?)?;
    Ok(fit_mean(&ts, &hp)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerFile {
    pub value: ValueFunctionParams,
    pub controller_hash: u64,
}

fn write_controller(path: &Path, m: &ClosedLoopModel) -> Result<(), PipelineError> {
    let file = ControllerFile { value: m.value.clone(), controller_hash: controller_hash(m) };
    write(path, &to_json(&file))
}

fn load_controller(
    stage: &'static str,
    cfg: &PipelineConfig,
    out: &Path,
    name: &str,
) -> Result<ClosedLoopModel, PipelineError> {
    let gp = load_gp(stage, out)?;
    let path = out.join(name);
    let file: ControllerFile = from_json(&path, &read(stage, &path)?)?;
    Ok(ClosedLoopModel { gp, g: cfg.input_matrix(), cost: cfg.cost(), value: file.value })
}

/// Reconstructs a closed-loop model from a previously written controller
/// file (`controller.json` or `controller_lqr.json`) and the training data
/// in `out`.
pub fn load_saved_controller(
    cfg: &PipelineConfig,
    out: &Path,
    name: &str,
) -> Result<ClosedLoopModel, PipelineError> {
    load_controller("load-controller", cfg, out, name)
}

/// LQR-based initialization of the value function; writes
/// `controller_lqr.json`.
pub fn init_lqr_stage(cfg: &PipelineConfig, out: &Path) -> Result<ClosedLoopModel, PipelineError> {
    let gp = load_gp("init-lqr", out)?;
    let m = init_lqr(&gp, cfg.input_matrix(), cfg.cost(), &cfg.check_states()?, cfg.kappa_alpha)?;
    write_controller(&out.join("controller_lqr.json"), &m)?;
    Ok(m)
}

/// Synthesis from the LQR controller; writes `controller.json` and the
/// objective trace to `synthesis_trace.csv`.
pub fn synthesize_stage(
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<(ClosedLoopModel, Vec<TraceRow>), PipelineError> {
    let m = load_controller("synthesize", cfg, out, "controller_lqr.json")?;
    let params = SynthesisParams {
        kappa: cfg.kappa,
        step: cfg.step_size,
        iterations: cfg.iterations,
        eta: DecreaseMargin::Quadratic { scale: 1.0, offset: cfg.eta_offset },
    };
    let (improved, trace) = synthesize(&m, &cfg.check_states()?, &params)?;
    write_controller(&out.join("controller.json"), &improved)?;
    let mut csv = String::from("iter,objective,hjb_term,lyap_term\n");
    for row in &trace {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.iter, row.objective, row.hjb_term, row.lyap_term
        ));
    }
    write(&out.join("synthesis_trace.csv"), &csv)?;
    Ok((improved, trace))
}

/// Certifies the named controller over the configured cover; writes
/// `certificate.json` (summary) and `certificate.csv` (per simplex).
pub fn certify_stage(
    cfg: &PipelineConfig,
    out: &Path,
    controller: &str,
) -> Result<StabilityCertificate, PipelineError> {
    let m = load_controller("certify", cfg, out, controller)?;
    let bx = BoxBounds::new(cfg.certify_lower.clone(), cfg.certify_upper.clone())?;
    let t = Triangulation::uniform(bx, cfg.certify_step)?;
    let cert = certify(&m, &t, cfg.certify_margin)?;

    let mut csv = String::new();
    let n = cfg.state_dim();
    for d in 0..n {
        csv.push_str(&format!("c_{},", d + 1));
    }
    csv.push_str("value_lower,vdot_upper,contains_origin,certified\n");
    for v in &cert.verdicts {
        let c = t.simplices()[v.id].centroid();
        for x in c.iter() {
            csv.push_str(&format!("{x},"));
        }
        csv.push_str(&format!(
            "{},{},{},{}\n",
            v.value_lower, v.vdot_upper, v.contains_origin, v.certified
        ));
    }
    write(&out.join("certificate.csv"), &csv)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        certified_fraction: f64,
        certified_count: usize,
        total: usize,
        region_size: usize,
        margin: f64,
        controller_hash: u64,
        region: &'a [usize],
    }
    let summary = Summary {
        certified_fraction: cert.certified_fraction,
        certified_count: cert.verdicts.iter().filter(|v| v.certified).count(),
        total: cert.verdicts.len(),
        region_size: cert.region.len(),
        margin: cert.margin,
        controller_hash: cert.controller_hash,
        region: &cert.region,
    };
    write(&out.join("certificate.json"), &to_json(&summary))?;
    Ok(cert)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulationReport {
    pub entries: Vec<SweepEntry>,
    pub converged: usize,
    pub diverged: usize,
    pub timeout: usize,
    pub failed: usize,
}

/// Rolls out the true plant from the centroids of the certified region
/// (evenly subsampled down to the configured count); writes one trajectory
/// CSV per start plus `simulation.json`.
pub fn simulate_stage(
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<SimulationReport, PipelineError> {
    let m = load_controller("simulate", cfg, out, "controller.json")?;
    let path = out.join("certificate.json");
    let summary: serde_json::Value = from_json(&path, &read("simulate", &path)?)?;
    let region: Vec<usize> = summary
        .get("region")
        .and_then(|r| serde_json::from_value(r.clone()).ok())
        .ok_or_else(|| PipelineError::Malformed {
            path: path.clone(),
            reason: "missing region".into(),
        })?;
    let bx = BoxBounds::new(cfg.certify_lower.clone(), cfg.certify_upper.clone())?;
    let t = Triangulation::uniform(bx, cfg.certify_step)?;

    let count = cfg.num_trajectories.min(region.len());
    let initials: Vec<DVector<f64>> = (0..count)
        .map(|k| {
            let idx = region[k * region.len() / count.max(1)];
            t.simplices()[idx].centroid()
        })
        .collect();
    let plant = cfg.plant_spec()?;
    let results = sweep(&plant, &m, &initials);

    let traj_dir = out.join("trajectories");
    fs::create_dir_all(&traj_dir)
        .map_err(|source| PipelineError::Io { path: traj_dir.clone(), source })?;
    let n = cfg.state_dim();
    let m_in = m.input_dim();
    for (idx, (_, traj)) in results.iter().enumerate() {
        let Some(traj) = traj else { continue };
        let mut csv = String::from("t,");
        for d in 0..n {
            csv.push_str(&format!("x_{},", d + 1));
        }
        for d in 0..m_in {
            csv.push_str(&format!("u_{},", d + 1));
        }
        csv.push_str("V\n");
        for k in 0..traj.times.len() {
            csv.push_str(&format!("{},", traj.times[k]));
            for v in &traj.states[k] {
                csv.push_str(&format!("{v},"));
            }
            for u in &traj.inputs[k] {
                csv.push_str(&format!("{u},"));
            }
            csv.push_str(&format!("{}\n", traj.values[k]));
        }
        write(&traj_dir.join(format!("traj_{idx:03}.csv")), &csv)?;
    }

    let entries: Vec<SweepEntry> = results.into_iter().map(|(e, _)| e).collect();
    let report = SimulationReport {
        converged: entries
            .iter()
            .filter(|e| e.outcome == Some(crate::simulator::Outcome::Converged))
            .count(),
        diverged: entries
            .iter()
            .filter(|e| e.outcome == Some(crate::simulator::Outcome::Diverged))
            .count(),
        timeout: entries
            .iter()
            .filter(|e| e.outcome == Some(crate::simulator::Outcome::Timeout))
            .count(),
        failed: entries.iter().filter(|e| e.error.is_some()).count(),
        entries,
    };
    write(&out.join("simulation.json"), &to_json(&report))?;
    Ok(report)
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    gen_data_stage(cfg, out)?;
    fit_gp_stage(cfg, out)?;
    init_lqr_stage(cfg, out)?;
    synthesize_stage(cfg, out)?;
    certify_stage(cfg, out, "controller.json")?;
    simulate_stage(cfg, out)?;
    Ok(())
}
