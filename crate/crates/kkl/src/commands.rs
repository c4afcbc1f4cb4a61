//! Implementations behind the `kkl` binary's subcommands. Each command
//! reads an [`ExperimentConfig`], writes its artifacts into an output
//! directory together with the exact config it ran from, and prints a short
//! summary to stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::datagen::{burn_in_time, generate_dataset_with_partition, TrajectoryDataset};
use crate::derive_seed;
use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_methods, generalization_sweep, generalization_sweep_with_points, shell_points,
    ComparisonProtocol,
};
use crate::neural::MlpModel;
use crate::observer::{estimation_run, initial_latent, NoiseSpec};
use crate::training::{train, TrainMethod, TrainedPair, TrainingConfig};

fn write_config_copy(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

/// Parses and validates a config file; the `validate` subcommand.
pub fn cmd_validate(config_path: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let system = config.build_system()?;
    let spec = config.observer_spec(&system)?;
    println!(
        "ok: system '{}' (n_x = {}, n_y = {}), observer n_z = {}",
        system.name(),
        system.state_dim(),
        system.output_dim(),
        spec.n_z()
    );
    Ok(())
}

/// Generates the training dataset into `<out>/dataset`.
pub fn cmd_generate(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let system = config.build_system()?;
    let spec = config.observer_spec(&system)?;
    let sample_box = config.sample_box()?;
    let grid = config.datagen_grid()?;
    let dataset = generate_dataset_with_partition(
        &system,
        &spec,
        &sample_box,
        config.datagen.p,
        &grid,
        config.datagen.epsilon,
        config.datagen.seed,
        config.datagen.partition,
    )?;
    let dir = out_dir.join("dataset");
    dataset.save_dir(&dir)?;
    fs::create_dir_all(out_dir)?;
    write_config_copy(config, out_dir)?;

    // The burn-in horizon the generator derived, for the summary line.
    let tau_b = burn_in_time(spec.a(), config.datagen.epsilon, (spec.n_z() as f64).sqrt())
        .unwrap_or(f64::NAN);
    println!(
        "dataset: p = {}, samples per trajectory = {}, burn-in horizon <= {:.3}",
        dataset.p,
        grid.sample_count(),
        tau_b
    );
    println!("wrote {}", dir.display());
    Ok(dir)
}

#[derive(Serialize)]
struct TrainMeta<'a> {
    config: &'a ExperimentConfig,
    dataset_fingerprint: String,
    final_regression_loss: Option<f64>,
    final_physics_residual: Option<f64>,
    final_total_loss: Option<f64>,
    steps: usize,
}

/// Trains on a generated dataset directory and writes the model pair into
/// `<out>/models`.
pub fn cmd_train(
    config: &ExperimentConfig,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    let system = config.build_system()?;
    let spec = config.observer_spec(&system)?;
    let dataset = TrajectoryDataset::load_dir(dataset_dir)?;

    // The dataset must be the one this config describes.
    let expected = {
        let sample_box = config.sample_box()?;
        let grid = config.datagen_grid()?;
        let probe = TrajectoryDataset {
            grid,
            x: nalgebra::DMatrix::zeros(0, 0),
            z: nalgebra::DMatrix::zeros(0, 0),
            p: config.datagen.p,
            regression_idx: vec![],
            physics_idx: vec![],
            source_system: system.name().to_string(),
            spec: spec.clone(),
            n_x: system.state_dim(),
            partition: config.datagen.partition,
            seed: config.datagen.seed,
            epsilon: config.datagen.epsilon,
            sample_box,
        };
        probe.fingerprint()
    };
    if dataset.fingerprint() != expected {
        return Err(Error::Config(format!(
            "dataset at {} does not match this config (fingerprint {} != {})",
            dataset_dir.display(),
            dataset.fingerprint(),
            expected
        )));
    }

    let tc = config.training_config()?;
    let pair = train(&dataset, &system, &spec, &tc)?;
    let dir = out_dir.join("models");
    pair.save_models(&dir)?;
    let last = pair.loss_history.last();
    let meta = TrainMeta {
        config,
        dataset_fingerprint: dataset.fingerprint(),
        final_regression_loss: last.map(|r| r.regression_loss),
        final_physics_residual: last.and_then(|r| r.physics_residual),
        final_total_loss: last.map(|r| r.total),
        steps: pair.loss_history.len(),
    };
    fs::write(
        dir.join("train_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    write_config_copy(config, out_dir)?;
    if let Some(r) = last {
        println!(
            "trained {} for {} steps: total loss {:.3e}",
            tc.method.as_str(),
            pair.loss_history.len(),
            r.total
        );
    }
    println!("wrote {}", dir.display());
    Ok(dir)
}

fn load_pair(models_dir: &Path, config: &ExperimentConfig) -> Result<TrainedPair> {
    Ok(TrainedPair {
        t_model: MlpModel::load(&models_dir.join("t_model.json"))?,
        tstar_model: MlpModel::load(&models_dir.join("tstar_model.json"))?,
        config: config.training_config()?,
        loss_history: Vec::new(),
    })
}

/// Simulates the plant under the configured scenario and runs the observer
/// against the measurements; writes `run.csv`, `phase.csv`, `noise.json`.
pub fn cmd_observe(
    config: &ExperimentConfig,
    models_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    let system = config.build_system()?;
    let spec = config.observer_spec(&system)?;
    let pair = load_pair(models_dir, config)?;
    let scenario = &config.observe;
    let x0 = if scenario.x0.is_empty() {
        vec![0.0; system.state_dim()]
    } else {
        scenario.x0.clone()
    };
    if x0.len() != system.state_dim() {
        return Err(Error::Config(format!(
            "observe.x0: must have the system's state dimension {}",
            system.state_dim()
        )));
    }
    let noise = NoiseSpec {
        process_std: scenario.process_std,
        sensor_std: scenario.sensor_std,
        seed: scenario.noise_seed,
        hold: None,
    };
    fs::create_dir_all(out_dir)?;
    write_config_copy(config, out_dir)?;
    fs::write(out_dir.join("noise.json"), serde_json::to_string_pretty(&noise)?)?;

    let z0 = if scenario.warm_start {
        initial_latent(&pair.t_model, &x0)
    } else {
        vec![0.0; spec.n_z()]
    };

    if scenario.horizon == 0.0 {
        // Degenerate single-sample scenario: no dynamics to integrate, the
        // estimate is just the inverse applied to the initial latent.
        let xhat = pair.tstar_model.try_forward(&z0)?;
        let y = system.output(&x0);
        let mut line = String::from("0");
        for v in x0.iter().chain(&y).chain(&z0).chain(&xhat) {
            write!(line, ",{v}").unwrap();
        }
        let mut header = String::from("t");
        for i in 1..=x0.len() {
            write!(header, ",x_{i}").unwrap();
        }
        for i in 1..=y.len() {
            write!(header, ",y_{i}").unwrap();
        }
        for i in 1..=z0.len() {
            write!(header, ",zhat_{i}").unwrap();
        }
        for i in 1..=xhat.len() {
            write!(header, ",xhat_{i}").unwrap();
        }
        fs::write(out_dir.join("run.csv"), format!("{header}\n{line}\n"))?;
        println!("single-sample run: wrote {}", out_dir.join("run.csv").display());
        return Ok(());
    }

    let dt = scenario.dt.unwrap_or(config.datagen.dt);
    let grid = TimeGrid::forward(0.0, scenario.horizon, dt)?;
    let run = estimation_run(&system, &spec, &pair.tstar_model, &x0, &grid, &noise, &z0)?;
    run.save_csv(&out_dir.join("run.csv"))?;

    // Phase-portrait data: true and estimated state pairs per row.
    let mut phase = String::new();
    let n_x = system.state_dim();
    let mut header = String::new();
    for i in 1..=n_x {
        write!(header, "{}x_{i}", if i > 1 { "," } else { "" }).unwrap();
    }
    for i in 1..=n_x {
        write!(header, ",xhat_{i}").unwrap();
    }
    phase.push_str(&header);
    phase.push('\n');
    for k in 0..grid.sample_count() {
        let mut line = String::new();
        for (j, v) in run.true_traj.states[k]
            .iter()
            .chain(&run.estimate.states[k])
            .enumerate()
        {
            write!(line, "{}{v}", if j > 0 { "," } else { "" }).unwrap();
        }
        phase.push_str(&line);
        phase.push('\n');
    }
    fs::write(out_dir.join("phase.csv"), phase)?;
    println!(
        "observer run over [0, {}]: wrote {}",
        scenario.horizon,
        out_dir.join("run.csv").display()
    );
    Ok(())
}

/// Runs the generalization sweep for a trained pair; needs the dataset for
/// the training initial conditions.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    models_dir: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    let system = config.build_system()?;
    let spec = config.observer_spec(&system)?;
    let pair = load_pair(models_dir, config)?;
    let dataset = TrajectoryDataset::load_dir(dataset_dir)?;
    let grid = config.evaluation_grid()?;
    let train_x0s = dataset.initial_conditions();

    let sweep = if system.state_dim() == 2 {
        generalization_sweep(
            &pair,
            &system,
            &spec,
            &dataset.sample_box,
            &train_x0s,
            &config.evaluation.deltas,
            config.evaluation.q,
            &grid,
        )?
    } else {
        let per_delta: Result<Vec<(f64, Vec<Vec<f64>>)>> = config
            .evaluation
            .deltas
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Ok((
                    *d,
                    shell_points(
                        &dataset.sample_box,
                        *d,
                        config.evaluation.q,
                        derive_seed(config.evaluation.seed, 200 + i as u64),
                    )?,
                ))
            })
            .collect();
        generalization_sweep_with_points(&pair, &system, &spec, &train_x0s, &per_delta?, &grid)?
    };

    fs::create_dir_all(out_dir)?;
    write_config_copy(config, out_dir)?;
    sweep.save_csv(&out_dir.join("gen_sweep.csv"))?;
    fs::write(
        out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&sweep)?,
    )?;
    println!(
        "sweep over {} deltas (E_train = {:.3e}): wrote {}",
        sweep.deltas.len(),
        sweep.e_train,
        out_dir.join("gen_sweep.csv").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MethodSummary {
    method: String,
    mean_g_emp: f64,
    e_train: f64,
    final_total_loss: Option<f64>,
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    config: &'a ExperimentConfig,
    methods: Vec<MethodSummary>,
}

/// End-to-end comparison: one dataset, all three training methods, the
/// outside-region ensemble, and the delta-sweep, in one report directory.
pub fn cmd_compare(
    config: &ExperimentConfig,
    dataset_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let system = config.build_system()?;
    let spec = config.observer_spec(&system)?;
    let dataset = match dataset_dir {
        Some(dir) => TrajectoryDataset::load_dir(dir)?,
        None => {
            let sample_box = config.sample_box()?;
            let grid = config.datagen_grid()?;
            generate_dataset_with_partition(
                &system,
                &spec,
                &sample_box,
                config.datagen.p,
                &grid,
                config.datagen.epsilon,
                config.datagen.seed,
                config.datagen.partition,
            )?
        }
    };

    let base = config.training_config()?;
    let configs: Vec<TrainingConfig> = [
        TrainMethod::Pinn,
        TrainMethod::SupervisedNn,
        TrainMethod::UnsupervisedAe,
    ]
    .into_iter()
    .map(|method| TrainingConfig {
        method,
        ..base.clone()
    })
    .collect();

    let protocol = ComparisonProtocol {
        ensemble_size: config.evaluation.ensemble_size,
        outside_scale: config.evaluation.outside_scale,
        deltas: config.evaluation.deltas.clone(),
        q: config.evaluation.q,
        grid: config.evaluation_grid()?,
        seed: config.evaluation.seed,
    };
    let report = compare_methods(&dataset, &system, &spec, &configs, &protocol)?;

    fs::create_dir_all(out_dir)?;
    write_config_copy(config, out_dir)?;
    let mut summaries = Vec::new();
    for m in &report.methods {
        let method_dir = out_dir.join(&m.method);
        m.trained.save_models(&method_dir)?;
        let mut f = fs::File::create(out_dir.join(format!("ensemble_errors_{}.csv", m.method)))?;
        m.envelope.write_csv(&mut f)?;
        m.sweep
            .save_csv(&out_dir.join(format!("gen_sweep_{}.csv", m.method)))?;
        summaries.push(MethodSummary {
            method: m.method.clone(),
            mean_g_emp: m.mean_g_emp,
            e_train: m.sweep.e_train,
            final_total_loss: m.trained.loss_history.last().map(|r| r.total),
        });
        println!("{}: mean G_emp = {:.4e}", m.method, m.mean_g_emp);
    }
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&CompareSummary {
            config,
            methods: summaries,
        })?,
    )?;
    println!("wrote {}", out_dir.join("report.json").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_config(dir: &Path) -> ExperimentConfig {
        let toml = format!(
            r#"
output_dir = "{}"

[system.linear]
name = "scalar_decay"
dynamics = [[-1.0]]
output = [[1.0]]
box_lo = [-1000000.0]
box_hi = [1000000.0]

[observer]
default = false
a = [[-2.0]]
b = [[1.0]]

[datagen]
p = 6
box_lo = [-1.0]
box_hi = [1.0]
horizon = 2.0
dt = 0.01
seed = 3

[training]
method = "pinn"
hidden_layers = [12, 12]
activation = "tanh"
learning_rate = 0.005
epochs = 2
batch_size = 16

[evaluation]
deltas = [0.5, 1.0]
q = 2
ensemble_size = 2
horizon = 1.0

[observe]
x0 = [0.7]
horizon = 1.0
"#,
            dir.display()
        );
        ExperimentConfig::from_toml(&toml).unwrap()
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path();
        let config = scalar_config(out);

        let dataset_dir = cmd_generate(&config, out).unwrap();
        assert!(dataset_dir.join("meta.json").exists());
        assert!(out.join("config.toml").exists());

        let models_dir = cmd_train(&config, &dataset_dir, out).unwrap();
        assert!(models_dir.join("t_model.json").exists());
        assert!(models_dir.join("loss_history.csv").exists());
        assert!(models_dir.join("train_meta.json").exists());

        let obs_dir = out.join("observe");
        cmd_observe(&config, &models_dir, &obs_dir).unwrap();
        assert!(obs_dir.join("run.csv").exists());
        assert!(obs_dir.join("phase.csv").exists());
        assert!(obs_dir.join("noise.json").exists());

        let sweep_dir = out.join("sweep");
        cmd_sweep(&config, &models_dir, &dataset_dir, &sweep_dir).unwrap();
        let sweep_csv = fs::read_to_string(sweep_dir.join("gen_sweep.csv")).unwrap();
        assert_eq!(sweep_csv.lines().count(), 3); // header + 2 deltas
        assert!(sweep_csv.starts_with("delta,E_test,G_emp,q_effective"));
    }

    #[test]
    fn train_rejects_mismatched_dataset() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path();
        let config = scalar_config(out);
        let dataset_dir = cmd_generate(&config, out).unwrap();

        let mut other = config.clone();
        other.datagen.seed = 4;
        let err = cmd_train(&other, &dataset_dir, out).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn observe_horizon_zero_is_single_sample() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path();
        let mut config = scalar_config(out);
        let dataset_dir = cmd_generate(&config, out).unwrap();
        let models_dir = cmd_train(&config, &dataset_dir, out).unwrap();
        config.observe.horizon = 0.0;
        let obs_dir = out.join("observe0");
        cmd_observe(&config, &models_dir, &obs_dir).unwrap();
        let text = fs::read_to_string(obs_dir.join("run.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn rerun_with_same_seed_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path();
        let config = scalar_config(out);
        let dataset_dir = cmd_generate(&config, out).unwrap();
        let m1 = cmd_train(&config, &dataset_dir, &out.join("a")).unwrap();
        let m2 = cmd_train(&config, &dataset_dir, &out.join("b")).unwrap();
        let t1 = fs::read(m1.join("t_model.json")).unwrap();
        let t2 = fs::read(m2.join("t_model.json")).unwrap();
        assert_eq!(t1, t2);
        let s1 = fs::read(m1.join("tstar_model.json")).unwrap();
        let s2 = fs::read(m2.join("tstar_model.json")).unwrap();
        assert_eq!(s1, s2);
    }
}
