//! Supervised physics-informed training of the transformation network and
//! its left inverse, plus the two baselines it is compared against:
//!
//! * `pinn` — latent regression + reconstruction + the transformation-PDE
//!   residual as a weighted penalty,
//! * `supervised_nn` — the same data terms without the residual,
//! * `unsupervised_ae` — reconstruction + residual, no latent targets.
//!
//! One Adam loop drives all three; mini-batches of regression and physics
//! points are drawn from independent seeded streams so method variants are
//! reproducible and comparable step for step.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ObserverSpec, TrajectoryDataset};
use crate::derive_seed;
use crate::dynamics::DynamicalSystem;
use crate::error::{Error, Result};
use crate::neural::{Activation, MlpModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Pinn,
    SupervisedNn,
    UnsupervisedAe,
}

impl TrainMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMethod::Pinn => "pinn",
            TrainMethod::SupervisedNn => "supervised_nn",
            TrainMethod::UnsupervisedAe => "unsupervised_ae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pinn" => Ok(TrainMethod::Pinn),
            "supervised_nn" => Ok(TrainMethod::SupervisedNn),
            "unsupervised_ae" => Ok(TrainMethod::UnsupervisedAe),
            other => Err(Error::Config(format!(
                "training.method: unknown method '{other}' \
                 (expected pinn, supervised_nn, or unsupervised_ae)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub method: TrainMethod,
    /// Weight of the state-reconstruction term in the data loss.
    pub chi: f64,
    /// Weight of the PDE residual penalty.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_interval` steps.
    pub lr_decay: f64,
    /// Steps between decays; `None` decays once per epoch.
    pub decay_interval: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Hidden layer widths of both networks.
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            method: TrainMethod::Pinn,
            chi: 1.0,
            lambda: 0.5,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            decay_interval: None,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            hidden_layers: vec![50; 5],
            activation: Activation::Relu,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chi < 0.0 {
            return Err(Error::Config("training.chi: must be nonnegative".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("training.lambda: must be nonnegative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "training.learning_rate: must be positive".into(),
            ));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("training.lr_decay: must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size: must be positive".into()));
        }
        if self.decay_interval == Some(0) {
            return Err(Error::Config(
                "training.decay_interval: must be positive when set".into(),
            ));
        }
        Ok(())
    }
}

/// One optimizer step of the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    /// Data term: latent regression + reconstruction (pinn / supervised_nn)
    /// or plain reconstruction (unsupervised_ae).
    pub regression_loss: f64,
    /// PDE residual; `None` whenever the method did not evaluate it.
    pub physics_residual: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Trained transformation network, its left inverse, and the loss history.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub t_model: MlpModel,
    pub tstar_model: MlpModel,
    pub config: TrainingConfig,
    pub loss_history: Vec<LossRecord>,
}

impl TrainedPair {
    /// `step,regression_loss,physics_residual,total,lr` rows; the residual
    /// column is empty where the method skipped it.
    pub fn write_history_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,regression_loss,physics_residual,total,lr")?;
        let mut line = String::new();
        for r in &self.loss_history {
            line.clear();
            write!(line, "{},{},", r.step, r.regression_loss).unwrap();
            if let Some(p) = r.physics_residual {
                write!(line, "{p}").unwrap();
            }
            write!(line, ",{},{}", r.total, r.lr).unwrap();
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_models(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.t_model.save(&dir.join("t_model.json"))?;
        self.tstar_model.save(&dir.join("tstar_model.json"))?;
        let mut f = std::fs::File::create(dir.join("loss_history.csv"))?;
        self.write_history_csv(&mut f)?;
        Ok(())
    }
}

/// Learning rate after `step` optimizer steps: multiplicative decay every
/// `decay_interval` steps (default: once per epoch).
pub fn lr_schedule(step: usize, config: &TrainingConfig, steps_per_epoch: usize) -> f64 {
    let interval = config.decay_interval.unwrap_or(steps_per_epoch).max(1);
    config.learning_rate * config.lr_decay.powi((step / interval) as i32)
}

/// Mean over the batch of `||z - T(x)||^2 + chi ||x - T*(T(x))||^2` with
/// gradients for both parameter vectors; the reconstruction term
/// backpropagates through the composition into the encoder.
pub fn loss_regression(
    t_model: &MlpModel,
    tstar_model: &MlpModel,
    batch: &[(Vec<f64>, Vec<f64>)],
    chi: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("regression batch must not be empty".into()));
    }
    let pairs: Vec<(&[f64], Option<&[f64]>)> = batch
        .iter()
        .map(|(x, z)| (x.as_slice(), Some(z.as_slice())))
        .collect();
    data_terms(t_model, tstar_model, &pairs, chi)
}

/// Shared implementation of the data terms. Each entry is `(x, Some(z))`
/// for latent-supervised losses or `(x, None)` for reconstruction-only.
fn data_terms(
    t_model: &MlpModel,
    tstar_model: &MlpModel,
    batch: &[(&[f64], Option<&[f64]>)],
    chi: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let m = batch.len() as f64;
    let mut value = 0.0;
    let mut grad_t = vec![0.0; t_model.params.len()];
    let mut grad_tstar = vec![0.0; tstar_model.params.len()];
    for (x, z_target) in batch {
        let latent = t_model.try_forward(x)?;
        // Upstream cotangent on the latent collects both loss terms.
        let mut latent_bar = vec![0.0; latent.len()];
        if let Some(z) = z_target {
            if z.len() != latent.len() {
                return Err(Error::Dimension(format!(
                    "latent target has length {}, network produces {}",
                    z.len(),
                    latent.len()
                )));
            }
            for (i, (o, zt)) in latent.iter().zip(*z).enumerate() {
                let e = o - zt;
                value += e * e;
                latent_bar[i] += 2.0 * e;
            }
        }
        if chi != 0.0 {
            let recon = tstar_model.try_forward(&latent)?;
            if recon.len() != x.len() {
                return Err(Error::Dimension(format!(
                    "reconstruction has length {}, state has {}",
                    recon.len(),
                    x.len()
                )));
            }
            let err: Vec<f64> = recon.iter().zip(*x).map(|(r, xv)| r - xv).collect();
            value += chi * err.iter().map(|e| e * e).sum::<f64>();
            let upstream: Vec<f64> = err.iter().map(|e| 2.0 * chi * e).collect();
            let bw = tstar_model.try_backward(&latent, &upstream)?;
            for (g, d) in grad_tstar.iter_mut().zip(&bw.param_grad) {
                *g += d;
            }
            for (b, d) in latent_bar.iter_mut().zip(&bw.input_grad) {
                *b += d;
            }
        }
        let bw_t = t_model.try_backward(x, &latent_bar)?;
        for (g, d) in grad_t.iter_mut().zip(&bw_t.param_grad) {
            *g += d;
        }
    }
    value /= m;
    for g in grad_t.iter_mut().chain(grad_tstar.iter_mut()) {
        *g /= m;
    }
    Ok((value, grad_t, grad_tstar))
}

/// Mean squared residual of the transformation PDE over the batch,
/// `r(x) = J_T(x) f(x) - A T(x) - B h(x)`, with its gradient in the encoder
/// parameters. The residual needs the parameter gradient of a
/// Jacobian-vector product, hence the tangent-backward pass.
pub fn loss_physics(
    t_model: &MlpModel,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    batch: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("physics batch must not be empty".into()));
    }
    let a = spec.a();
    let b = spec.b();
    let n_z = spec.n_z();
    let m = batch.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; t_model.params.len()];
    for x in batch {
        let f = system.drift(x);
        let h = system.output(x);
        let dual = t_model.try_forward_with_input_tangent(x, &f)?;
        if dual.value.len() != n_z {
            return Err(Error::Dimension(format!(
                "network produces {} latents, observer expects {n_z}",
                dual.value.len()
            )));
        }
        let mut r = dual.input_tangent.clone();
        for i in 0..n_z {
            for j in 0..n_z {
                r[i] -= a[(i, j)] * dual.value[j];
            }
            for j in 0..h.len() {
                r[i] -= b[(i, j)] * h[j];
            }
        }
        value += r.iter().map(|v| v * v).sum::<f64>();

        // d||r||^2 = 2 r . (d(J f) - A dT); two pullbacks, one per path.
        let up_tangent: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let gt = t_model.try_backward_through_tangent(x, &f, &up_tangent)?;
        let mut up_value = vec![0.0; n_z];
        for j in 0..n_z {
            // -A^T (2 r)
            for i in 0..n_z {
                up_value[j] -= 2.0 * a[(i, j)] * r[i];
            }
        }
        let gv = t_model.try_backward(x, &up_value)?;
        for ((g, a_), b_) in grad.iter_mut().zip(&gt).zip(&gv.param_grad) {
            *g += a_ + b_;
        }
    }
    value /= m;
    for g in &mut grad {
        *g /= m;
    }
    Ok((value, grad))
}

/// Autoencoder loss: reconstruction plus the weighted PDE residual, no
/// latent targets. Returns `(value, grad_theta, grad_eta)`.
pub fn loss_ae(
    t_model: &MlpModel,
    tstar_model: &MlpModel,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    batch: &[Vec<f64>],
    lambda: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("autoencoder batch must not be empty".into()));
    }
    let entries: Vec<(&[f64], Option<&[f64]>)> =
        batch.iter().map(|x| (x.as_slice(), None)).collect();
    let (recon, mut grad_t, grad_tstar) = data_terms(t_model, tstar_model, &entries, 1.0)?;
    let mut value = recon;
    if lambda != 0.0 {
        let (res, grad_phys) = loss_physics(t_model, system, spec, batch)?;
        value += lambda * res;
        for (g, d) in grad_t.iter_mut().zip(&grad_phys) {
            *g += lambda * d;
        }
    }
    Ok((value, grad_t, grad_tstar))
}

/// Adam with bias correction; one instance per parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
}

impl Adam {
    fn new(len: usize, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: betas.0,
            beta2: betas.1,
            eps,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Trains a transformation/inverse pair on a dataset.
///
/// Every epoch shuffles the regression pool and walks it in `batch_size`
/// chunks; methods that use the residual draw an equal-size physics batch
/// per step from an independent stream. `pinn` with `lambda = 0` follows
/// the exact update path of `supervised_nn`, which keeps the two
/// bit-comparable under a shared seed.
pub fn train(
    dataset: &TrajectoryDataset,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    config: &TrainingConfig,
) -> Result<TrainedPair> {
    config.validate()?;
    if dataset.n_x != system.state_dim() {
        return Err(Error::Dimension(format!(
            "dataset states have dimension {}, system has {}",
            dataset.n_x,
            system.state_dim()
        )));
    }
    if dataset.n_z() != spec.n_z() {
        return Err(Error::Dimension(format!(
            "dataset latents have dimension {}, observer has {}",
            dataset.n_z(),
            spec.n_z()
        )));
    }

    let reg_pool = dataset.regression_samples();
    let phys_pool = dataset.physics_samples();
    if reg_pool.is_empty() || phys_pool.is_empty() {
        return Err(Error::Config(
            "dataset partition left an empty regression or physics pool".into(),
        ));
    }

    let n_x = dataset.n_x;
    let n_z = dataset.n_z();
    let mut t_dims = vec![n_x];
    t_dims.extend_from_slice(&config.hidden_layers);
    t_dims.push(n_z);
    let mut tstar_dims = vec![n_z];
    tstar_dims.extend_from_slice(&config.hidden_layers);
    tstar_dims.push(n_x);

    // Normalization comes from the full trajectory matrices, not just the
    // regression split, so both networks share one view of the data scale.
    let all_x: Vec<Vec<f64>> = (0..dataset.p)
        .flat_map(|i| (0..dataset.grid.sample_count()).map(move |k| (i, k)))
        .map(|(i, k)| dataset.state(i, k))
        .collect();
    let all_z: Vec<Vec<f64>> = (0..dataset.p)
        .flat_map(|i| (0..dataset.grid.sample_count()).map(move |k| (i, k)))
        .map(|(i, k)| dataset.latent(i, k))
        .collect();

    let mut t_model = MlpModel::init(&t_dims, config.activation, derive_seed(config.seed, 10))?
        .fit_normalization(&all_x, &all_z)?;
    let mut tstar_model =
        MlpModel::init(&tstar_dims, config.activation, derive_seed(config.seed, 11))?
            .fit_normalization(&all_z, &all_x)?;

    let steps_per_epoch = reg_pool.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(total_steps);

    let uses_physics = match config.method {
        TrainMethod::Pinn | TrainMethod::UnsupervisedAe => config.lambda > 0.0,
        TrainMethod::SupervisedNn => false,
    };

    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 12));
    let mut phys_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 13));
    let mut adam_t = Adam::new(t_model.params.len(), config.adam_betas, config.adam_eps);
    let mut adam_tstar = Adam::new(tstar_model.params.len(), config.adam_betas, config.adam_eps);

    let mut order: Vec<usize> = (0..reg_pool.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut batch_rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = lr_schedule(step, config, steps_per_epoch);
            let batch: Vec<(Vec<f64>, Vec<f64>)> =
                chunk.iter().map(|&i| reg_pool[i].clone()).collect();

            let (data_value, mut grad_t, grad_tstar) = match config.method {
                TrainMethod::Pinn | TrainMethod::SupervisedNn => {
                    loss_regression(&t_model, &tstar_model, &batch, config.chi)?
                }
                TrainMethod::UnsupervisedAe => {
                    let xs: Vec<(&[f64], Option<&[f64]>)> =
                        batch.iter().map(|(x, _)| (x.as_slice(), None)).collect();
                    data_terms(&t_model, &tstar_model, &xs, 1.0)?
                }
            };

            let physics = if uses_physics {
                let pbatch: Vec<Vec<f64>> = (0..config.batch_size)
                    .map(|_| phys_pool[phys_rng.random_range(0..phys_pool.len())].clone())
                    .collect();
                let (res, grad_phys) = loss_physics(&t_model, system, spec, &pbatch)?;
                for (g, d) in grad_t.iter_mut().zip(&grad_phys) {
                    *g += config.lambda * d;
                }
                Some(res)
            } else {
                None
            };

            let total = data_value + config.lambda * physics.unwrap_or(0.0);
            if !total.is_finite() {
                return Err(Error::TrainingDiverged { step, epoch });
            }

            adam_t.step(&mut t_model.params, &grad_t, lr);
            adam_tstar.step(&mut tstar_model.params, &grad_tstar, lr);

            history.push(LossRecord {
                step,
                regression_loss: data_value,
                physics_residual: physics,
                total,
                lr,
            });
            step += 1;
        }
    }

    Ok(TrainedPair {
        t_model,
        tstar_model,
        config: config.clone(),
        loss_history: history,
    })
}

/// Composite objective value and gradients at the current parameters,
/// evaluated over whole pools; used by gradient-fidelity checks.
pub fn composite_loss(
    t_model: &MlpModel,
    tstar_model: &MlpModel,
    system: &DynamicalSystem,
    spec: &ObserverSpec,
    reg_batch: &[(Vec<f64>, Vec<f64>)],
    phys_batch: &[Vec<f64>],
    chi: f64,
    lambda: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (reg, mut grad_t, grad_tstar) = loss_regression(t_model, tstar_model, reg_batch, chi)?;
    let (res, grad_phys) = loss_physics(t_model, system, spec, phys_batch)?;
    for (g, d) in grad_t.iter_mut().zip(&grad_phys) {
        *g += lambda * d;
    }
    Ok((reg + lambda * res, grad_t, grad_tstar))
}
