//! Learning-based Kazantzis-Kravaris/Luenberger (KKL) observers for
//! autonomous nonlinear systems.
//!
//! A KKL observer runs a stable linear filter `z' = A z + B y` in a latent
//! space and recovers the state through the left inverse of the
//! transformation `T` that maps system trajectories onto filter
//! trajectories. This crate learns `T` and its left inverse `T*` as
//! multilayer perceptrons trained on simulated trajectory data, with the
//! defining transformation PDE enforced as a physics residual during
//! training. It also ships the supporting toolkit: fixed-step simulation,
//! dataset generation, a numerical-integral oracle for `T`, noise-robustness
//! experiments, and an empirical generalization metric over test points
//! placed at controlled distances from the training region.
//!
//! Entry points by task:
//!
//! * [`dynamics`] — benchmark systems and RK4 integration.
//! * [`datagen`] — Latin hypercube sampling, latent burn-in, datasets.
//! * [`neural`] — the MLP stack with parameter gradients and input tangents.
//! * [`training`] — the physics-informed objective, its baselines, Adam.
//! * [`observer`] — online estimation runs, the quadrature oracle, and
//!   empirical Lipschitz / approximation-error estimators.
//! * [`evaluation`] — error traces, ensembles, and the generalization sweep.
//! * [`config`] / [`commands`] — the file-driven experiment front end used
//!   by the `kkl` binary.

pub mod commands;
pub mod config;
pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod neural;
pub mod observer;
pub mod training;

pub use datagen::{
    burn_in_time, generate_dataset, latin_hypercube, ObserverSpec, PartitionRule,
    TrajectoryDataset,
};
pub use dynamics::{
    builtin_system, integrate_linear_filter, integrate_rk4, linear_system, AxisBox,
    DynamicalSystem, TimeGrid, Trajectory,
};
pub use error::{Error, Result};
pub use evaluation::{
    generalization_sweep, mean_error_variance, normalized_error_trace, ring_points,
    GeneralizationSweep,
};
pub use neural::{Activation, DualEval, MlpModel};
pub use observer::{
    estimate_approx_error, estimate_lipschitz, estimation_run, initial_latent, oracle_transform,
    run_observer, simulate_plant, EstimationRun, NoiseSpec,
};
pub use training::{train, TrainMethod, TrainedPair, TrainingConfig};

/// Splits a master seed into independent deterministic streams; stream `i`
/// of a given master never collides with stream `j != i` in practice.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
