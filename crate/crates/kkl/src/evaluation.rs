//! Quantitative evaluation of learned observers: normalized error traces,
//! trajectory-ensemble statistics, and the empirical generalization error
//! as a function of the distance between test initial conditions and the
//! training region.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ObserverSpec, TrajectoryDataset};
use crate::derive_seed;
use crate::dynamics::{AxisBox, DynamicalSystem, TimeGrid};
use crate::error::{Error, Result};
use crate::observer::{estimation_run, EstimationRun, NoiseSpec};
use crate::training::{train, TrainedPair, TrainingConfig};

/// Norms below this floor flag the sample instead of dividing by it.
pub const NORM_FLOOR: f64 = 1e-9;

/// Pointwise normalized estimation error `||xhat - x|| / ||x||`; flagged
/// samples (degenerate `||x||`) carry NaN and their indices.
#[derive(Debug, Clone)]
pub struct ErrorTrace {
    pub values: Vec<f64>,
    pub flagged: Vec<usize>,
}

impl ErrorTrace {
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for k in range {
            let v = self.values[k];
            if v.is_finite() {
                acc += v;
                n += 1;
            }
        }
        acc / n.max(1) as f64
    }
}

pub fn normalized_error_trace(run: &EstimationRun) -> ErrorTrace {
    let mut values = Vec::with_capacity(run.true_traj.states.len());
    let mut flagged = Vec::new();
    for (k, (x, xhat)) in run
        .true_traj
        .states
        .iter()
        .zip(&run.estimate.states)
        .enumerate()
    {
        let nx = norm(x);
        if nx <= NORM_FLOOR {
            values.push(f64::NAN);
            flagged.push(k);
        } else {
            values.push(dist(x, xhat) / nx);
        }
    }
    ErrorTrace { values, flagged }
}

/// Normalized mean estimation error variance over an ensemble: the double
/// mean of squared normalized errors, flagged samples skipped.
pub fn mean_error_variance(runs: &[EstimationRun]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Config("error variance needs at least one run".into()));
    }
    let count = runs[0].true_traj.states.len();
    if runs.iter().any(|r| r.true_traj.states.len() != count) {
        return Err(Error::Dimension("runs must share one time grid".into()));
    }
    let mut total = 0.0;
    for run in runs {
        let trace = normalized_error_trace(run);
        let mut acc = 0.0;
        let mut n = 0usize;
        for v in trace.values.iter().filter(|v| v.is_finite()) {
            acc += v * v;
            n += 1;
        }
        total += acc / n.max(1) as f64;
    }
    Ok(total / runs.len() as f64)
}

/// `q` test points on rays at equally spaced angles from the box center,
/// each placed so its Euclidean distance to the box equals `delta` exactly.
/// Defined for planar state spaces; other dimensions take caller-supplied
/// points.
pub fn ring_points(train_box: &AxisBox, delta: f64, q: usize) -> Result<Vec<Vec<f64>>> {
    if train_box.dim() != 2 {
        return Err(Error::Config(format!(
            "ring formation is defined for planar systems; state dimension is {} \
             (supply custom test points instead)",
            train_box.dim()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!("ring delta must be positive, got {delta}")));
    }
    if q == 0 {
        return Err(Error::Config("ring needs at least one point".into()));
    }
    let center = train_box.center();
    let mut points = Vec::with_capacity(q);
    for j in 0..q {
        let angle = 2.0 * std::f64::consts::PI * j as f64 / q as f64;
        let dir = [angle.cos(), angle.sin()];
        // Distance to the box is zero inside and strictly increasing along
        // the ray outside; bisect the scale to hit delta exactly.
        let at = |s: f64| -> Vec<f64> {
            vec![center[0] + s * dir[0], center[1] + s * dir[1]]
        };
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        while train_box.distance(&at(hi)) < delta {
            lo = hi;
            hi *= 2.0;
            assert!(hi < 1e12, "ring scale runaway");
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if train_box.distance(&at(mid)) < delta {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 * hi.max(1.0) {
                break;
            }
        }
        points.push(at(0.5 * (lo + hi)));
    }
    Ok(points)
}

/// Result of a delta-sweep: per-delta test points, normalized testing error
/// variance, and the generalization gap against the training error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationSweep {
    pub deltas: Vec<f64>,
    pub points_per_delta: usize,
    pub test_points: Vec<Vec<Vec<f64>>>,
    pub e_test: Vec<f64>,
    pub e_train: f64,
    pub g_emp: Vec<f64>,
    /// Points whose truth trajectory stayed finite, per delta.
    pub q_effective: Vec<usize>,
    /// Points excluded for truth-trajectory divergence, per delta.
    pub excluded: Vec<usize>,
}

impl GeneralizationSweep {
    /// `delta,E_test,G_emp,q_effective` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "delta,E_test,G_emp,q_effective")?;
        let mut line = String::new();
        for i in 0..self.deltas.len() {
            line.clear();
            write!(
                line,
                "{},{},{},{}",
                self.deltas[i], self.e_test[i], self.g_emp[i], self.q_effective[i]
            )
            .unwrap();
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_csv(&mut f)
    }
}

/// Warm-started estimation run against the clean plant.
fn warm_run(
    trained: &TrainedPair,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    x0: &[f64],
    grid: &TimeGrid,
) -> Result<EstimationRun> {
    let z0 = trained.t_model.try_forward(x0)?;
    estimation_run(
        system,
        spec,
        &trained.tstar_model,
        x0,
        grid,
        &NoiseSpec::clean(),
        &z0,
    )
}

/// Training-region error: warm-started observers on the training initial
/// conditions themselves.
pub fn training_error(
    trained: &TrainedPair,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    train_x0s: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<f64> {
    let runs: Result<Vec<EstimationRun>> = train_x0s
        .iter()
        .map(|x0| warm_run(trained, system, spec, x0, grid))
        .collect();
    mean_error_variance(&runs?)
}

/// Sweeps the empirical generalization error over ring-formation test
/// points at each `delta`. Planar systems only; see
/// [`generalization_sweep_with_points`] for custom geometries.
#[allow(clippy::too_many_arguments)]
pub fn generalization_sweep(
    trained: &TrainedPair,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    train_box: &AxisBox,
    train_x0s: &[Vec<f64>],
    deltas: &[f64],
    q: usize,
    grid: &TimeGrid,
) -> Result<GeneralizationSweep> {
    let per_delta: Result<Vec<(f64, Vec<Vec<f64>>)>> = deltas
        .iter()
        .map(|d| Ok((*d, ring_points(train_box, *d, q)?)))
        .collect();
    generalization_sweep_with_points(trained, system, spec, train_x0s, &per_delta?, grid)
}

/// The sweep over caller-supplied `(delta, test points)` groups. Truth
/// trajectories that diverge are excluded and counted.
pub fn generalization_sweep_with_points(
    trained: &TrainedPair,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    train_x0s: &[Vec<f64>],
    per_delta: &[(f64, Vec<Vec<f64>>)],
    grid: &TimeGrid,
) -> Result<GeneralizationSweep> {
    if per_delta.is_empty() {
        return Err(Error::Config("evaluation.deltas: must not be empty".into()));
    }
    if train_x0s.is_empty() {
        return Err(Error::Config("sweep needs the training initial conditions".into()));
    }
    let e_train = training_error(trained, system, spec, train_x0s, grid)?;

    let q = per_delta[0].1.len();
    let mut deltas = Vec::with_capacity(per_delta.len());
    let mut test_points = Vec::with_capacity(per_delta.len());
    let mut e_test = Vec::with_capacity(per_delta.len());
    let mut g_emp = Vec::with_capacity(per_delta.len());
    let mut q_effective = Vec::with_capacity(per_delta.len());
    let mut excluded = Vec::with_capacity(per_delta.len());
    for (delta, points) in per_delta {
        let mut runs = Vec::with_capacity(points.len());
        let mut kept = Vec::with_capacity(points.len());
        let mut dropped = 0usize;
        for x0 in points {
            match warm_run(trained, system, spec, x0, grid) {
                Ok(run) => {
                    runs.push(run);
                    kept.push(x0.clone());
                }
                Err(Error::Divergence { .. }) => dropped += 1,
                Err(other) => return Err(other),
            }
        }
        if runs.is_empty() {
            return Err(Error::Config(format!(
                "every test trajectory at delta = {delta} diverged"
            )));
        }
        let et = mean_error_variance(&runs)?;
        deltas.push(*delta);
        e_test.push(et);
        g_emp.push((et - e_train).abs());
        q_effective.push(kept.len());
        excluded.push(dropped);
        test_points.push(kept);
    }
    Ok(GeneralizationSweep {
        deltas,
        points_per_delta: q,
        test_points,
        e_test,
        e_train,
        g_emp,
        q_effective,
        excluded,
    })
}

/// Per-time envelope of an ensemble of error traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub times: Vec<f64>,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

impl ErrorEnvelope {
    pub fn from_traces(times: Vec<f64>, traces: &[ErrorTrace]) -> Self {
        let count = times.len();
        let mut min = vec![f64::INFINITY; count];
        let mut mean = vec![0.0; count];
        let mut max = vec![f64::NEG_INFINITY; count];
        let mut n = vec![0usize; count];
        for trace in traces {
            for k in 0..count {
                let v = trace.values[k];
                if v.is_finite() {
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                    mean[k] += v;
                    n[k] += 1;
                }
            }
        }
        for k in 0..count {
            if n[k] > 0 {
                mean[k] /= n[k] as f64;
            } else {
                min[k] = f64::NAN;
                mean[k] = f64::NAN;
                max[k] = f64::NAN;
            }
        }
        ErrorEnvelope {
            times,
            min,
            mean,
            max,
        }
    }

    /// `t,min,mean,max` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,min,mean,max")?;
        let mut line = String::new();
        for k in 0..self.times.len() {
            line.clear();
            write!(
                line,
                "{},{},{},{}",
                self.times[k], self.min[k], self.mean[k], self.max[k]
            )
            .unwrap();
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Protocol shared by every method in a comparison: which ensemble to run,
/// which deltas to sweep, on what grid.
#[derive(Debug, Clone)]
pub struct ComparisonProtocol {
    pub ensemble_size: usize,
    /// Outside-region initial conditions are drawn uniformly from the
    /// training box scaled by this factor, rejecting interior points.
    pub outside_scale: f64,
    pub deltas: Vec<f64>,
    pub q: usize,
    pub grid: TimeGrid,
    pub seed: u64,
}

/// Everything measured for one training method.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub method: String,
    pub trained: TrainedPair,
    pub envelope: ErrorEnvelope,
    pub sweep: GeneralizationSweep,
    pub mean_g_emp: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub methods: Vec<MethodReport>,
}

/// Initial conditions outside the training box: uniform over the scaled
/// box with interior-rejection, deterministic per seed.
pub fn outside_region_points(
    train_box: &AxisBox,
    count: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(scale > 1.0) {
        return Err(Error::Config(
            "outside-region scale must exceed 1 so an exterior exists".into(),
        ));
    }
    let center = train_box.center();
    let dim = train_box.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cand: Vec<f64> = (0..dim)
            .map(|d| {
                let half = 0.5 * (train_box.hi()[d] - train_box.lo()[d]) * scale;
                center[d] + rng.random_range(-half..=half)
            })
            .collect();
        if !train_box.contains(&cand) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Trains every listed method variant on the shared dataset, then runs the
/// outside-region ensemble and the delta-sweep under one protocol.
pub fn compare_methods(
    dataset: &TrajectoryDataset,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    configs: &[TrainingConfig],
    protocol: &ComparisonProtocol,
) -> Result<ComparisonReport> {
    let mut pairs = Vec::with_capacity(configs.len());
    for config in configs {
        let trained = train(dataset, system, spec, config).map_err(|e| {
            Error::Config(format!("training {} failed: {e}", config.method.as_str()))
        })?;
        pairs.push((config.method.as_str().to_string(), trained));
    }
    compare_methods_with_pairs(dataset, system, spec, &pairs, protocol)
}

/// The evaluation half of [`compare_methods`], reusable with pre-trained
/// (or exact) model pairs.
pub fn compare_methods_with_pairs(
    dataset: &TrajectoryDataset,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    pairs: &[(String, TrainedPair)],
    protocol: &ComparisonProtocol,
) -> Result<ComparisonReport> {
    let ensemble_x0s = outside_region_points(
        &dataset.sample_box,
        protocol.ensemble_size,
        protocol.outside_scale,
        derive_seed(protocol.seed, 100),
    )?;
    let train_x0s = dataset.initial_conditions();

    let mut methods = Vec::with_capacity(pairs.len());
    for (name, trained) in pairs {
        let mut traces = Vec::with_capacity(ensemble_x0s.len());
        for x0 in &ensemble_x0s {
            let run = warm_run(trained, system, spec, x0, &protocol.grid)
                .map_err(|e| Error::Config(format!("method {name}: ensemble run failed: {e}")))?;
            traces.push(normalized_error_trace(&run));
        }
        let envelope = ErrorEnvelope::from_traces(protocol.grid.times(), &traces);

        let sweep = if system.state_dim() == 2 {
            generalization_sweep(
                trained,
                system,
                spec,
                &dataset.sample_box,
                &train_x0s,
                &protocol.deltas,
                protocol.q,
                &protocol.grid,
            )
        } else {
            let per_delta: Result<Vec<(f64, Vec<Vec<f64>>)>> = protocol
                .deltas
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    Ok((
                        *d,
                        shell_points(
                            &dataset.sample_box,
                            *d,
                            protocol.q,
                            derive_seed(protocol.seed, 200 + i as u64),
                        )?,
                    ))
                })
                .collect();
            generalization_sweep_with_points(
                trained,
                system,
                spec,
                &train_x0s,
                &per_delta?,
                &protocol.grid,
            )
        }
        .map_err(|e| Error::Config(format!("method {name}: sweep failed: {e}")))?;

        let mean_g_emp = sweep.g_emp.iter().sum::<f64>() / sweep.g_emp.len() as f64;
        methods.push(MethodReport {
            method: name.clone(),
            trained: trained.clone(),
            envelope,
            sweep,
            mean_g_emp,
        });
    }
    Ok(ComparisonReport { methods })
}

/// Random directions scaled to exact box distance `delta`; the non-planar
/// replacement for the ring formation.
pub fn shell_points(
    train_box: &AxisBox,
    delta: f64,
    q: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("shell delta must be positive, got {delta}")));
    }
    let dim = train_box.dim();
    let center = train_box.center();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(q);
    while out.len() < q {
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let n = norm(&dir);
        if n < 1e-9 {
            continue;
        }
        let at = |s: f64| -> Vec<f64> {
            center
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + s * d / n)
                .collect::<Vec<f64>>()
        };
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        while train_box.distance(&at(hi)) < delta {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if train_box.distance(&at(mid)) < delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(at(0.5 * (lo + hi)));
    }
    Ok(out)
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
