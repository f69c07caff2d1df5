//! Certified stabilizing controller synthesis for Gaussian-process dynamics
//! models: kernel interpolation-error bounds over simplicial covers, bound
//! propagation through sum/product expressions, GP mean fitting, value
//! function synthesis, region-of-attraction certification, and closed-loop
//! simulation.

pub mod certifier;
pub mod compose;
pub mod controller;
pub mod geometry;
pub mod gpmodel;
pub mod kernel;
pub mod pipeline;
pub mod simulator;

pub use certifier::{certify, StabilityCertificate};
pub use compose::{expr_bounds, global_bounds, sum_product_bounds, BoundExpr, SimplexBound};
pub use controller::{init_lqr, synthesize, ClosedLoopModel, CostSpec, StateCost, SynthesisParams};
pub use geometry::{BoxBounds, Simplex, Triangulation};
pub use gpmodel::{fit_mean, optimize_hyperparams, GpMean, Hyperparams, TrainingSet};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError};
pub use simulator::{simulate, sweep, Dynamics, Outcome, PlantSpec, Trajectory};
pub use kernel::{kernel_simplex_bounds, BoundPair, KernelSpec};
