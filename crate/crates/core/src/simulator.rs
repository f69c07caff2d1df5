//! Closed-loop rollouts of the true plant under the synthesized feedback:
//! forward-Euler integration with convergence/divergence classification and
//! parallel sweeps over initial conditions.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ClosedLoopModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulatorError {
    #[error("state became non-finite at t = {time}")]
    NonFiniteState { time: f64 },
    #[error("initial state has dimension {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// True drift dynamics of the plant.
#[derive(Clone)]
pub enum Dynamics {
    /// Damped pendulum `[x2, -(9.8 sin x1 + x2)]`.
    Pendulum,
    /// `x' = -x` in every coordinate.
    LinearDecay,
    Custom(fn(&DVector<f64>) -> DVector<f64>),
}

impl Dynamics {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Dynamics::Pendulum => {
                DVector::from_column_slice(&[x[1], -(9.8 * x[0].sin() + x[1])])
            }
            Dynamics::LinearDecay => -x.clone(),
            Dynamics::Custom(f) => f(x),
        }
    }
}

/// Plant and integration settings.
#[derive(Clone)]
pub struct PlantSpec {
    pub dynamics: Dynamics,
    /// True input matrix (may differ from the model's).
    pub g: DMatrix<f64>,
    pub dt: f64,
    pub horizon: f64,
    /// Radius below which a rollout counts as converged.
    pub conv_radius: f64,
    /// Radius beyond which a rollout counts as diverged.
    pub div_radius: f64,
}

impl PlantSpec {
    pub fn pendulum(dt: f64, horizon: f64) -> Self {
        Self {
            dynamics: Dynamics::Pendulum,
            g: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            dt,
            horizon,
            conv_radius: 0.1,
            div_radius: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Converged,
    Diverged,
    Timeout,
}

/// One rollout: states, inputs, and model value along the trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn final_state(&self) -> DVector<f64> {
        DVector::from_column_slice(self.states.last().expect("nonempty trajectory"))
    }
}

/// Forward-Euler rollout of the true plant under the model's feedback law;
/// integration stops early inside the convergence radius or beyond the
/// divergence radius.
pub fn simulate(
    plant: &PlantSpec,
    model: &ClosedLoopModel,
    x0: &DVector<f64>,
) -> Result<Trajectory, SimulatorError> {
    let n = model.state_dim();
    if x0.len() != n {
        return Err(SimulatorError::DimensionMismatch { got: x0.len(), expected: n });
    }
    let steps = (plant.horizon / plant.dt).round() as usize;
    let mut x = x0.clone();
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        values: Vec::with_capacity(steps + 1),
        outcome: Outcome::Timeout,
    };
    for k in 0..=steps {
        let t = k as f64 * plant.dt;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SimulatorError::NonFiniteState { time: t });
        }
        let u = model.optimal_input(&x);
        traj.times.push(t);
        traj.states.push(x.iter().cloned().collect());
        traj.inputs.push(u.iter().cloned().collect());
        traj.values.push(model.value(&x));
        let r = x.norm();
        if r < plant.conv_radius {
            traj.outcome = Outcome::Converged;
            break;
        }
        if r > plant.div_radius {
            traj.outcome = Outcome::Diverged;
            break;
        }
        if k == steps {
            break;
        }
        x += (plant.dynamics.eval(&x) + &plant.g * u) * plant.dt;
    }
    Ok(traj)
}

/// Summary of one rollout in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub initial: Vec<f64>,
    pub outcome: Option<Outcome>,
    pub final_norm: Option<f64>,
    pub error: Option<String>,
}

/// Rolls out every initial condition in parallel; failures are recorded per
/// entry instead of aborting the sweep.
pub fn sweep(
    plant: &PlantSpec,
    model: &ClosedLoopModel,
    initials: &[DVector<f64>],
) -> Vec<(SweepEntry, Option<Trajectory>)> {
    initials
        .par_iter()
        .map(|x0| match simulate(plant, model, x0) {
            Ok(traj) => (
                SweepEntry {
                    initial: x0.iter().cloned().collect(),
                    outcome: Some(traj.outcome),
                    final_norm: Some(traj.final_state().norm()),
                    error: None,
                },
                Some(traj),
            ),
            Err(e) => (
                SweepEntry {
                    initial: x0.iter().cloned().collect(),
                    outcome: None,
                    final_norm: None,
                    error: Some(e.to_string()),
                },
                None,
            ),
        })
        .collect()
}
