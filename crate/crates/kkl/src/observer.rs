//! Running the learned observer against clean or noisy measurement streams,
//! plus the numerical-integral oracle for the true transformation and the
//! empirical constants of the robustness analysis (Lipschitz constant of
//! the inverse, approximation-error ceiling).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{burn_in_time, ObserverSpec};
use crate::derive_seed;
use crate::dynamics::{
    integrate_linear_filter, integrate_rk4, AxisBox, DynamicalSystem, GridDirection, TimeGrid,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::neural::MlpModel;

/// Gaussian disturbance model: process noise `w` enters the drift held
/// constant over each `hold` interval, sensor noise `v` is drawn i.i.d. per
/// output sample. A zero standard deviation switches the signal off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub process_std: f64,
    pub sensor_std: f64,
    pub seed: u64,
    /// Zero-order-hold interval for `w`; `None` holds per integrator step.
    pub hold: Option<f64>,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec {
            process_std: 0.0,
            sensor_std: 0.0,
            seed: 0,
            hold: None,
        }
    }

    pub fn gaussian(process_std: f64, sensor_std: f64, seed: u64) -> Self {
        NoiseSpec {
            process_std,
            sensor_std,
            seed,
            hold: None,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.process_std == 0.0 && self.sensor_std == 0.0
    }
}

/// One estimation experiment: the truth, what the sensor reported, and what
/// the observer reconstructed, all on a shared grid.
#[derive(Debug, Clone)]
pub struct EstimationRun {
    pub true_traj: Trajectory,
    pub measured: Vec<Vec<f64>>,
    pub latent: Trajectory,
    pub estimate: Trajectory,
}

impl EstimationRun {
    pub fn grid(&self) -> &TimeGrid {
        &self.true_traj.grid
    }

    /// `t, x_1.., y_1.., zhat_1.., xhat_1..` rows at full precision.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let (n_x, n_y, n_z) = (
            self.true_traj.dim(),
            self.measured.first().map_or(0, Vec::len),
            self.latent.dim(),
        );
        let mut header = String::from("t");
        for i in 1..=n_x {
            write!(header, ",x_{i}").unwrap();
        }
        for i in 1..=n_y {
            write!(header, ",y_{i}").unwrap();
        }
        for i in 1..=n_z {
            write!(header, ",zhat_{i}").unwrap();
        }
        for i in 1..=n_x {
            write!(header, ",xhat_{i}").unwrap();
        }
        writeln!(w, "{header}")?;
        let mut line = String::new();
        for k in 0..self.true_traj.states.len() {
            line.clear();
            write!(line, "{}", self.true_traj.grid.time(k)).unwrap();
            for v in self.true_traj.states[k]
                .iter()
                .chain(&self.measured[k])
                .chain(&self.latent.states[k])
                .chain(&self.estimate.states[k])
            {
                write!(line, ",{v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_csv(&mut f)
    }
}

/// Simulates the disturbed plant `x' = f(x) + w, y = h(x) + v` and returns
/// the state trajectory with its noisy output samples. Deterministic per
/// seed; the process and sensor streams are independent.
pub fn simulate_plant(
    system: &DynamicalSystem,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &NoiseSpec,
) -> Result<(Trajectory, Vec<Vec<f64>>)> {
    if grid.direction() != GridDirection::Forward {
        return Err(Error::Config("plant simulation runs on forward grids".into()));
    }
    if noise.process_std < 0.0 || noise.sensor_std < 0.0 {
        return Err(Error::Config("noise standard deviations must be >= 0".into()));
    }
    let n_x = system.state_dim();
    let hold = noise.hold.unwrap_or(grid.dt());
    if !(hold > 0.0) {
        return Err(Error::Config("noise hold interval must be positive".into()));
    }

    let total = grid.t_end() - grid.t_start();
    let intervals = (total / hold).ceil() as usize + 1;
    let mut w_draws: Vec<Vec<f64>> = vec![vec![0.0; n_x]; intervals];
    if noise.process_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise.seed, 0));
        for draw in &mut w_draws {
            for v in draw.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = noise.process_std * g;
            }
        }
    }

    let t0 = grid.t_start();
    let deriv = move |t: f64, x: &[f64]| -> Vec<f64> {
        let mut dx = system.drift(x);
        if noise.process_std > 0.0 {
            // The midpoint of the surrounding step picks the interval, so
            // all four RK4 stages of a step see one held draw.
            let idx = (((t - t0) / hold).floor().max(0.0) as usize).min(intervals - 1);
            for (d, w) in dx.iter_mut().zip(&w_draws[idx]) {
                *d += w;
            }
        }
        dx
    };
    let traj = integrate_rk4(&deriv, x0, grid)?;

    let mut outputs: Vec<Vec<f64>> = traj.states.iter().map(|s| system.output(s)).collect();
    if noise.sensor_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise.seed, 1));
        for y in &mut outputs {
            for v in y.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += noise.sensor_std * g;
            }
        }
    }
    Ok((traj, outputs))
}

/// Runs the observer: integrates `z' = A z + B y` from `z0` over the grid
/// and maps every latent sample through the learned inverse.
pub fn run_observer(
    spec: &ObserverSpec,
    tstar_model: &MlpModel,
    y: &[Vec<f64>],
    grid: &TimeGrid,
    z0: &[f64],
) -> Result<(Trajectory, Trajectory)> {
    if tstar_model.input_dim() != spec.n_z() {
        return Err(Error::Dimension(format!(
            "inverse model expects {} latents, observer produces {}",
            tstar_model.input_dim(),
            spec.n_z()
        )));
    }
    let latent = integrate_linear_filter(spec.a(), spec.b(), y, z0, grid)?;
    let estimates: Result<Vec<Vec<f64>>> = latent
        .states
        .iter()
        .map(|z| tstar_model.try_forward(z))
        .collect();
    let estimate = Trajectory {
        grid: *grid,
        states: estimates?,
    };
    Ok((latent, estimate))
}

/// Assembles a full estimation run against a (possibly noisy) plant.
pub fn estimation_run(
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    tstar_model: &MlpModel,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &NoiseSpec,
    z0: &[f64],
) -> Result<EstimationRun> {
    let (true_traj, measured) = simulate_plant(system, x0, grid, noise)?;
    let (latent, estimate) = run_observer(spec, tstar_model, &measured, grid, z0)?;
    Ok(EstimationRun {
        true_traj,
        measured,
        latent,
        estimate,
    })
}

/// Warm-start latent: the learned transform evaluated at a state guess.
pub fn initial_latent(t_model: &MlpModel, x0_guess: &[f64]) -> Vec<f64> {
    t_model.forward(x0_guess)
}

/// Truncated-integral oracle for the true transformation: the backward
/// solution under the clamped vector field weighted by the filter kernel,
/// integrated by the trapezoid rule on the `dt` grid.
///
/// [`burn_in_time`] with the point's own output norm seeds the truncation
/// horizon, which then doubles until the integral moves by less than
/// `epsilon / 2` — the direct convergence criterion, valid whether or not
/// the backward output keeps growing inside the window.
pub fn oracle_transform(
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    x: &[f64],
    epsilon: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if !system.admissible_box().contains(x) {
        return Err(Error::Config(
            "oracle evaluation point must lie inside the admissible box".into(),
        ));
    }
    let eig = crate::linalg::eigen_decompose(spec.a())?;
    let lambda_min = eig.lambda_min();
    let b_norm = linalg::op_norm(spec.b());
    let y_bar = norm(&system.output(x)).max(1e-3);
    let base = burn_in_time(spec.a(), epsilon, y_bar * b_norm / lambda_min)?.min(-dt);
    const MAX_DOUBLINGS: u32 = 8;
    let mut prev: Option<Vec<f64>> = None;
    for round in 0..=MAX_DOUBLINGS {
        let tau_b = base * f64::powi(2.0, round as i32);
        let value = oracle_transform_fixed_horizon(system, spec, x, tau_b, dt)?;
        if let Some(p) = &prev {
            if dist(p, &value) <= 0.5 * epsilon {
                return Ok(value);
            }
        }
        prev = Some(value);
    }
    Ok(prev.expect("at least one horizon evaluated"))
}

/// The oracle integral over a caller-pinned horizon `[tau_b, 0]`. Useful
/// when several evaluations must share one horizon (finite-difference
/// probes of the oracle need it to vary smoothly in `x`).
pub fn oracle_transform_fixed_horizon(
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    x: &[f64],
    tau_b: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if !(tau_b < 0.0) {
        return Err(Error::Config(format!(
            "oracle horizon must be negative, got {tau_b}"
        )));
    }
    let steps = ((tau_b.abs() / dt).ceil() as usize).max(1);
    let back_grid = TimeGrid::backward(0.0, -(steps as f64) * dt, dt)?;
    let traj = integrate_rk4(
        &|_, s| system.clamped_drift(s, system.admissible_box()),
        x,
        &back_grid,
    )?;
    let n_z = spec.n_z();
    // Weight at sample k (time -k dt) is exp(A k dt), which decays because
    // A is Hurwitz; accumulate it by repeated multiplication.
    let step_weight = linalg::matrix_exp(&(spec.a() * dt));
    let mut weight = DMatrix::<f64>::identity(n_z, n_z);
    let mut acc = vec![0.0; n_z];
    for (k, state) in traj.states.iter().enumerate() {
        let y = system.output(state);
        let by = spec.b() * DMatrix::from_column_slice(y.len(), 1, &y);
        let g = &weight * by;
        let scale = if k == 0 || k == steps { 0.5 } else { 1.0 };
        for i in 0..n_z {
            acc[i] += scale * g[(i, 0)];
        }
        weight *= &step_weight;
    }
    for v in &mut acc {
        *v *= dt;
    }
    Ok(acc)
}

/// Empirical Lipschitz constant of the learned inverse: the largest
/// difference quotient over `n_pairs` sampled pairs in a latent box. A
/// lower bound on the true constant; nested sampling (same seed, more
/// pairs) can only raise it.
pub fn estimate_lipschitz(
    tstar_model: &MlpModel,
    latent_box: &AxisBox,
    n_pairs: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = latent_box.dim();
    let mut best = 0.0f64;
    for _ in 0..n_pairs {
        let z1: Vec<f64> = (0..dim)
            .map(|d| rng.random_range(latent_box.lo()[d]..=latent_box.hi()[d]))
            .collect();
        let z2: Vec<f64> = (0..dim)
            .map(|d| rng.random_range(latent_box.lo()[d]..=latent_box.hi()[d]))
            .collect();
        let dz = dist(&z1, &z2);
        if dz < 1e-12 {
            continue;
        }
        let df = dist(&tstar_model.forward(&z1), &tstar_model.forward(&z2));
        best = best.max(df / dz);
    }
    best
}

/// Empirical approximation-error ceiling of the learned inverse over states
/// sampled in `probe_box`: `max ||x - T*(oracle(x))||`. Restricted to
/// latents reachable from the probe box, an under-approximation of the
/// supremum over the full latent set.
pub fn estimate_approx_error(
    tstar_model: &MlpModel,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    probe_box: &AxisBox,
    probe_count: usize,
    seed: u64,
    epsilon: f64,
    dt: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = probe_box.dim();
    let mut probes = Vec::with_capacity(probe_count);
    for _ in 0..probe_count {
        probes.push(
            (0..dim)
                .map(|d| rng.random_range(probe_box.lo()[d]..=probe_box.hi()[d]))
                .collect::<Vec<f64>>(),
        );
    }
    estimate_approx_error_at(tstar_model, system, spec, &probes, epsilon, dt)
}

/// Same ceiling over caller-chosen probe states.
pub fn estimate_approx_error_at(
    tstar_model: &MlpModel,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    probes: &[Vec<f64>],
    epsilon: f64,
    dt: f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in probes {
        let z = oracle_transform(system, spec, x, epsilon, dt)?;
        let back = tstar_model.try_forward(&z)?;
        worst = worst.max(dist(x, &back));
    }
    Ok(worst)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{builtin_system, linear_system};
    use crate::neural::Activation;
    use approx::assert_relative_eq;

    fn scalar_benchmark() -> (DynamicalSystem, ObserverSpec) {
        let sys = linear_system(
            "scalar_decay",
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            AxisBox::centered(1e6, 1),
        )
        .unwrap();
        let spec = ObserverSpec::new(
            DMatrix::from_element(1, 1, -2.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        (sys, spec)
    }

    fn identity_model(dim: usize) -> MlpModel {
        let mut m = MlpModel::init(&[dim, dim], Activation::Relu, 0).unwrap();
        m.params = vec![0.0; MlpModel::param_count(&[dim, dim])];
        for i in 0..dim {
            m.params[i * dim + i] = 1.0;
        }
        m
    }

    #[test]
    fn clean_plant_equals_plain_integration() {
        let sys = builtin_system("reverse_duffing").unwrap();
        let grid = TimeGrid::forward(0.0, 5.0, 0.01).unwrap();
        let (traj, y) = simulate_plant(&sys, &[0.5, -0.2], &grid, &NoiseSpec::clean()).unwrap();
        let plain = integrate_rk4(&|_, s| sys.drift(s), &[0.5, -0.2], &grid).unwrap();
        assert_eq!(traj.states, plain.states);
        for (yk, s) in y.iter().zip(&plain.states) {
            assert_eq!(yk, &sys.output(s));
        }
    }

    #[test]
    fn process_noise_has_zero_mean() {
        let sys = builtin_system("reverse_duffing").unwrap();
        let grid = TimeGrid::forward(0.0, 50.0, 0.01).unwrap();
        let noise = NoiseSpec::gaussian(0.1, 0.0, 99);
        // Reconstruct the draws the plant used by differencing the drift.
        let (traj, _) = simulate_plant(&sys, &[0.3, 0.1], &grid, &noise).unwrap();
        assert!(traj.states.iter().all(|s| s.iter().all(|v| v.is_finite())));
        // Direct check on the generator stream instead: per-component mean
        // within 3 sigma / sqrt(N) of zero.
        let n = 5000;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(99, 0));
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            for s in &mut sums {
                let g: f64 = StandardNormal.sample(&mut rng);
                *s += 0.1 * g;
            }
        }
        let tol = 3.0 * 0.1 / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < tol);
        }
    }

    #[test]
    fn noisy_plant_is_seed_deterministic() {
        let sys = builtin_system("reverse_duffing").unwrap();
        let grid = TimeGrid::forward(0.0, 2.0, 0.01).unwrap();
        let noise = NoiseSpec::gaussian(0.1, 0.1, 5);
        let a = simulate_plant(&sys, &[0.2, 0.4], &grid, &noise).unwrap();
        let b = simulate_plant(&sys, &[0.2, 0.4], &grid, &noise).unwrap();
        assert_eq!(a.0.states, b.0.states);
        assert_eq!(a.1, b.1);
        let other = simulate_plant(
            &sys,
            &[0.2, 0.4],
            &grid,
            &NoiseSpec::gaussian(0.1, 0.1, 6),
        )
        .unwrap();
        assert_ne!(a.1, other.1);
    }

    #[test]
    fn exact_observer_tracks_scalar_benchmark() {
        let (sys, spec) = scalar_benchmark();
        let grid = TimeGrid::forward(0.0, 5.0, 0.01).unwrap();
        let run = estimation_run(
            &sys,
            &spec,
            &identity_model(1),
            &[0.8],
            &grid,
            &NoiseSpec::clean(),
            &[0.8], // z0 = T(x0) = x0
        )
        .unwrap();
        for k in 0..grid.sample_count() {
            let err = (run.estimate.states[k][0] - run.true_traj.states[k][0]).abs();
            assert!(err < 1e-4, "sample {k}: error {err:.3e}");
        }
    }

    #[test]
    fn latent_error_decays_at_filter_rate() {
        let (sys, spec) = scalar_benchmark();
        let grid = TimeGrid::forward(0.0, 12.0, 0.01).unwrap();
        let (_, y) = simulate_plant(&sys, &[0.5], &grid, &NoiseSpec::clean()).unwrap();
        // Offset initial latent: the error obeys e' = -2e exactly.
        let (latent, estimate) =
            run_observer(&spec, &identity_model(1), &y, &grid, &[0.5 + 1.0]).unwrap();
        let (latent_ref, _) = run_observer(&spec, &identity_model(1), &y, &grid, &[0.5]).unwrap();
        for k in [0, 100, 500, 1000] {
            let t = grid.time(k);
            let gap = (latent.states[k][0] - latent_ref.states[k][0]).abs();
            assert_relative_eq!(gap, (-2.0 * t).exp(), max_relative = 1e-6);
        }
        // After t = 10 the estimate is back on the truth.
        let k10 = 1000;
        for k in k10..grid.sample_count() {
            let err = (estimate.states[k][0] - latent_ref.states[k][0]).abs();
            assert!(err < 1e-3);
        }
    }

    #[test]
    fn observer_latent_contraction_bound() {
        // Two runs with identical measurements but different z0 contract at
        // the slowest filter rate (diagonal A: cond(V) = 1).
        let sys = builtin_system("reverse_duffing").unwrap();
        let spec = ObserverSpec::default_for(2, 1);
        let grid = TimeGrid::forward(0.0, 8.0, 0.01).unwrap();
        let (_, y) = simulate_plant(&sys, &[0.4, -0.3], &grid, &NoiseSpec::clean()).unwrap();
        let z0a = vec![0.0; 5];
        let z0b = vec![0.5, -0.25, 0.125, 0.4, -0.3];
        let tstar = MlpModel::init(&[5, 8, 2], Activation::Relu, 1).unwrap();
        let (la, _) = run_observer(&spec, &tstar, &y, &grid, &z0a).unwrap();
        let (lb, _) = run_observer(&spec, &tstar, &y, &grid, &z0b).unwrap();
        let d0 = dist(&z0a, &z0b);
        for k in [0, 50, 200, 400, 800] {
            let t = grid.time(k);
            let gap = dist(&la.states[k], &lb.states[k]);
            assert!(
                gap <= d0 * (-t).exp() * 1.01,
                "t = {t}: gap {gap:.3e} exceeds bound {:.3e}",
                d0 * (-t).exp() * 1.01
            );
        }
    }

    #[test]
    fn zero_measurements_from_origin_stay_at_tstar_of_zero() {
        let (_, spec) = scalar_benchmark();
        let grid = TimeGrid::forward(0.0, 1.0, 0.01).unwrap();
        let y = vec![vec![0.0]; grid.sample_count()];
        let m = identity_model(1);
        let (latent, estimate) = run_observer(&spec, &m, &y, &grid, &[0.0]).unwrap();
        for k in 0..grid.sample_count() {
            assert_eq!(latent.states[k][0], 0.0);
            assert_eq!(estimate.states[k][0], m.forward(&[0.0])[0]);
        }
    }

    #[test]
    fn initial_latent_is_the_transform_of_the_guess() {
        let m = identity_model(3);
        assert_eq!(initial_latent(&m, &[0.1, 0.2, 0.3]), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn warm_start_beats_cold_start_on_transient() {
        let (sys, spec) = scalar_benchmark();
        let grid = TimeGrid::forward(0.0, 3.0, 0.01).unwrap();
        let m = identity_model(1);
        let x0 = [0.8];
        let warm = estimation_run(&sys, &spec, &m, &x0, &grid, &NoiseSpec::clean(), &x0).unwrap();
        let cold =
            estimation_run(&sys, &spec, &m, &x0, &grid, &NoiseSpec::clean(), &[0.0]).unwrap();
        let integral = |run: &EstimationRun| -> f64 {
            run.estimate
                .states
                .iter()
                .zip(&run.true_traj.states)
                .map(|(a, b)| (a[0] - b[0]).abs())
                .sum::<f64>()
        };
        assert!(integral(&warm) < integral(&cold));
    }

    #[test]
    fn oracle_matches_closed_form_on_scalar_benchmark() {
        let (sys, spec) = scalar_benchmark();
        for x in [-0.9, -0.4, 0.1, 0.55, 1.0] {
            let z = oracle_transform(&sys, &spec, &[x], 1e-4, 0.01).unwrap();
            assert!(
                (z[0] - x).abs() < 1e-4,
                "oracle({x}) = {} (error {:.3e})",
                z[0],
                (z[0] - x).abs()
            );
        }
    }

    #[test]
    fn oracle_at_equilibrium_is_zero() {
        let (sys, spec) = scalar_benchmark();
        let z = oracle_transform(&sys, &spec, &[0.0], 1e-4, 0.01).unwrap();
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn oracle_satisfies_pde_on_duffing_interior() {
        // Directional finite difference of the oracle along the drift minus
        // the filter response: the transformation PDE residual. Interior
        // points keep the backward orbit inside the admissible box, so the
        // clamp never activates and the oracle stays smooth.
        let sys = builtin_system("reverse_duffing").unwrap();
        let spec = ObserverSpec::default_for(2, 1);
        let tau_b = -12.0;
        let dt = 0.005;
        for x in [[0.3, 0.2], [-0.25, 0.35], [0.1, -0.4]] {
            let f = sys.drift(&x);
            let h = 1e-4 / norm(&f).max(1.0);
            let xp: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a - h * b).collect();
            let tp = oracle_transform_fixed_horizon(&sys, &spec, &xp, tau_b, dt).unwrap();
            let tm = oracle_transform_fixed_horizon(&sys, &spec, &xm, tau_b, dt).unwrap();
            let t0 = oracle_transform_fixed_horizon(&sys, &spec, &x, tau_b, dt).unwrap();
            let y = sys.output(&x);
            let mut res = vec![0.0; 5];
            for i in 0..5 {
                let deriv = (tp[i] - tm[i]) / (2.0 * h);
                res[i] = deriv - spec.a()[(i, i)] * t0[i] - spec.b()[(i, 0)] * y[0];
            }
            let r = norm(&res);
            assert!(r < 1e-2, "residual {r:.3e} at {x:?}");
        }
    }

    #[test]
    fn lipschitz_estimate_of_affine_map_approaches_operator_norm() {
        // T*(z) = M z + c has Lipschitz constant sigma_max(M).
        let mut m = MlpModel::init(&[2, 2], Activation::Relu, 0).unwrap();
        m.params = vec![1.0, 2.0, 0.0, 1.5, 0.3, -0.4];
        let mat = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.5]);
        let sigma = linalg::op_norm(&mat);
        let box_ = AxisBox::centered(1.0, 2);
        let rough = estimate_lipschitz(&m, &box_, 50, 4);
        let fine = estimate_lipschitz(&m, &box_, 5000, 4);
        assert!(rough <= sigma + 1e-9);
        assert!(fine <= sigma + 1e-9);
        assert!(fine >= 0.9 * sigma, "fine = {fine}, sigma = {sigma}");
        assert!(fine >= rough);
    }

    #[test]
    fn lipschitz_estimate_of_constant_map_is_zero() {
        let mut m = MlpModel::init(&[2, 2], Activation::Relu, 0).unwrap();
        m.params = vec![0.0, 0.0, 0.0, 0.0, 0.7, -0.3];
        assert_eq!(estimate_lipschitz(&m, &AxisBox::centered(1.0, 2), 100, 1), 0.0);
    }

    #[test]
    fn approx_error_exact_inverse_sits_at_oracle_floor() {
        let (sys, spec) = scalar_benchmark();
        let e = estimate_approx_error(
            &identity_model(1),
            &sys,
            &spec,
            &AxisBox::centered(1.0, 1),
            25,
            7,
            1e-4,
            0.01,
        )
        .unwrap();
        assert!(e < 1e-3, "approx error {e:.3e}");
    }

    #[test]
    fn approx_error_of_random_model_is_large() {
        let (sys, spec) = scalar_benchmark();
        let random = MlpModel::init(&[1, 16, 1], Activation::Relu, 11).unwrap();
        let e_random = estimate_approx_error(
            &random,
            &sys,
            &spec,
            &AxisBox::centered(1.0, 1),
            25,
            7,
            1e-4,
            0.01,
        )
        .unwrap();
        let e_exact = estimate_approx_error(
            &identity_model(1),
            &sys,
            &spec,
            &AxisBox::centered(1.0, 1),
            25,
            7,
            1e-4,
            0.01,
        )
        .unwrap();
        assert!(e_random > 0.1, "random model error {e_random:.3e}");
        assert!(e_random > e_exact);
    }

    #[test]
    fn approx_error_single_probe_at_origin() {
        let (sys, spec) = scalar_benchmark();
        let e = estimate_approx_error_at(
            &identity_model(1),
            &sys,
            &spec,
            &[vec![0.0]],
            1e-4,
            0.01,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn run_csv_layout() {
        let (sys, spec) = scalar_benchmark();
        let grid = TimeGrid::forward(0.0, 0.1, 0.05).unwrap();
        let run = estimation_run(
            &sys,
            &spec,
            &identity_model(1),
            &[0.5],
            &grid,
            &NoiseSpec::clean(),
            &[0.5],
        )
        .unwrap();
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,y_1,zhat_1,xhat_1");
        assert_eq!(lines.count(), 3);
    }
}
