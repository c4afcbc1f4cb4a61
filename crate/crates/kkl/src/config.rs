//! The experiment configuration file: one TOML document fully describes a
//! run (system, observer, data generation, training, evaluation), so any
//! result directory can be reproduced from the config it embeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{rows_matrix, ObserverSpec, PartitionRule};
use crate::dynamics::{builtin_system, linear_system, AxisBox, DynamicalSystem, TimeGrid};
use crate::error::{Error, Result};
use crate::neural::Activation;
use crate::training::{TrainMethod, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub system: SystemConfig,
    #[serde(default)]
    pub observer: ObserverConfig,
    pub datagen: DatagenConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub observe: ObserveConfig,
}

fn default_output_dir() -> String {
    "out".to_string()
}

/// Either a builtin oscillator by name or an inline linear system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearSystemConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystemConfig {
    #[serde(default = "default_linear_name")]
    pub name: String,
    pub dynamics: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
}

fn default_linear_name() -> String {
    "linear".to_string()
}

/// `default = true` takes `n_z = n_y (2 n_x + 1)`, `A = -diag(1..n_z)`,
/// `B` all ones; otherwise `a` and `b` are given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    #[serde(default = "default_true")]
    pub default: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
}

fn default_true() -> bool {
    true
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            default: true,
            a: None,
            b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    pub p: usize,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_partition")]
    pub partition: PartitionRule,
}

fn default_horizon() -> f64 {
    50.0
}

fn default_dt() -> f64 {
    0.01
}

fn default_epsilon() -> f64 {
    1e-3
}

fn default_partition() -> PartitionRule {
    PartitionRule::EvenOdd
}

/// Mirrors [`TrainingConfig`] with file-friendly field types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_chi")]
    pub chi: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_interval: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_method() -> String {
    "pinn".to_string()
}

fn default_chi() -> f64 {
    1.0
}

fn default_lambda() -> f64 {
    0.5
}

fn default_lr() -> f64 {
    1e-3
}

fn default_lr_decay() -> f64 {
    1.0
}

fn default_batch_size() -> usize {
    32
}

fn default_epochs() -> usize {
    10
}

fn default_hidden() -> Vec<usize> {
    vec![50; 5]
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for TrainingSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section takes defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "default_eval_horizon")]
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_outside_scale")]
    pub outside_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_deltas() -> Vec<f64> {
    (1..=20).map(|i| 0.5 * i as f64).collect()
}

fn default_q() -> usize {
    10
}

fn default_ensemble() -> usize {
    50
}

fn default_eval_horizon() -> f64 {
    20.0
}

fn default_outside_scale() -> f64 {
    2.0
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty section takes defaults")
    }
}

/// Scenario for the `observe` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveConfig {
    #[serde(default)]
    pub x0: Vec<f64>,
    #[serde(default = "default_eval_horizon")]
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default)]
    pub process_std: f64,
    #[serde(default)]
    pub sensor_std: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Warm-start the latent from the transform of `x0`; `false` starts at
    /// the zero vector.
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty section takes defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Field-by-field validation; error messages carry the field path.
    pub fn validate(&self) -> Result<()> {
        match (&self.system.name, &self.system.linear) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "system: give either a builtin name or an inline linear system, not both"
                        .into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "system: a builtin name or an inline linear system is required".into(),
                ))
            }
            _ => {}
        }
        let system = self.build_system()?;
        if self.datagen.p == 0 {
            return Err(Error::Config("datagen.p: must be at least 1".into()));
        }
        if self.datagen.box_lo.len() != system.state_dim()
            || self.datagen.box_hi.len() != system.state_dim()
        {
            return Err(Error::Config(format!(
                "datagen.box_lo/box_hi: must have the system's state dimension {}",
                system.state_dim()
            )));
        }
        AxisBox::new(self.datagen.box_lo.clone(), self.datagen.box_hi.clone())
            .map_err(|e| Error::Config(format!("datagen.box_lo/box_hi: {e}")))?;
        if !(self.datagen.horizon > 0.0) {
            return Err(Error::Config("datagen.horizon: must be positive".into()));
        }
        if !(self.datagen.dt > 0.0) {
            return Err(Error::Config("datagen.dt: must be positive".into()));
        }
        if !(self.datagen.epsilon > 0.0) {
            return Err(Error::Config("datagen.epsilon: must be positive".into()));
        }
        self.observer_spec(&system)?;
        self.training_config()?.validate()?;
        if self.evaluation.deltas.is_empty() {
            return Err(Error::Config("evaluation.deltas: must not be empty".into()));
        }
        if self.evaluation.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("evaluation.deltas: must all be positive".into()));
        }
        if self.evaluation.q == 0 {
            return Err(Error::Config("evaluation.q: must be at least 1".into()));
        }
        if self.evaluation.ensemble_size == 0 {
            return Err(Error::Config(
                "evaluation.ensemble_size: must be at least 1".into(),
            ));
        }
        if !(self.evaluation.outside_scale > 1.0) {
            return Err(Error::Config(
                "evaluation.outside_scale: must exceed 1".into(),
            ));
        }
        if !self.observe.x0.is_empty() && self.observe.x0.len() != system.state_dim() {
            return Err(Error::Config(format!(
                "observe.x0: must have the system's state dimension {}",
                system.state_dim()
            )));
        }
        if self.observe.horizon < 0.0 {
            return Err(Error::Config("observe.horizon: must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<DynamicalSystem> {
        if let Some(name) = &self.system.name {
            return builtin_system(name);
        }
        let lin = self.system.linear.as_ref().expect("validated");
        let f = rows_matrix(&lin.dynamics)
            .map_err(|e| Error::Config(format!("system.linear.dynamics: {e}")))?;
        let h = rows_matrix(&lin.output)
            .map_err(|e| Error::Config(format!("system.linear.output: {e}")))?;
        let b = AxisBox::new(lin.box_lo.clone(), lin.box_hi.clone())
            .map_err(|e| Error::Config(format!("system.linear.box_lo/box_hi: {e}")))?;
        linear_system(lin.name.clone(), f, h, b)
    }

    pub fn observer_spec(&self, system: &DynamicalSystem) -> Result<ObserverSpec> {
        match (&self.observer.a, &self.observer.b) {
            (Some(a), Some(b)) => ObserverSpec::new(
                rows_matrix(a).map_err(|e| Error::Config(format!("observer.a: {e}")))?,
                rows_matrix(b).map_err(|e| Error::Config(format!("observer.b: {e}")))?,
            ),
            (None, None) if self.observer.default => Ok(ObserverSpec::default_for(
                system.state_dim(),
                system.output_dim(),
            )),
            _ => Err(Error::Config(
                "observer: give both a and b, or set default = true".into(),
            )),
        }
    }

    pub fn sample_box(&self) -> Result<AxisBox> {
        AxisBox::new(self.datagen.box_lo.clone(), self.datagen.box_hi.clone())
    }

    pub fn datagen_grid(&self) -> Result<TimeGrid> {
        TimeGrid::forward(0.0, self.datagen.horizon, self.datagen.dt)
    }

    pub fn evaluation_grid(&self) -> Result<TimeGrid> {
        TimeGrid::forward(
            0.0,
            self.evaluation.horizon,
            self.evaluation.dt.unwrap_or(self.datagen.dt),
        )
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        Ok(TrainingConfig {
            method: TrainMethod::parse(&self.training.method)?,
            chi: self.training.chi,
            lambda: self.training.lambda,
            learning_rate: self.training.learning_rate,
            lr_decay: self.training.lr_decay,
            decay_interval: self.training.decay_interval,
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            seed: self.training.seed,
            adam_betas: self.training.adam_betas,
            adam_eps: self.training.adam_eps,
            hidden_layers: self.training.hidden_layers.clone(),
            activation: self.training.activation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn duffing_toml() -> String {
        r#"
output_dir = "runs/duffing"

[system]
name = "reverse_duffing"

[datagen]
p = 100
box_lo = [-1.0, -1.0]
box_hi = [1.0, 1.0]
horizon = 50.0
dt = 0.01

[training]
method = "pinn"
epochs = 5

[evaluation]
deltas = [0.5, 1.0]
q = 10
"#
        .to_string()
    }

    #[test]
    fn parse_and_derive_default_observer() {
        let config = ExperimentConfig::from_toml(&duffing_toml()).unwrap();
        let system = config.build_system().unwrap();
        let spec = config.observer_spec(&system).unwrap();
        assert_eq!(spec.n_z(), 5);
        assert_eq!(spec.a()[(0, 0)], -1.0);
        assert_eq!(spec.a()[(4, 4)], -5.0);
        assert!(spec.b().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn rossler_default_latent_dimension() {
        let toml = r#"
[system]
name = "rossler"

[datagen]
p = 10
box_lo = [-1.0, -1.0, -1.0]
box_hi = [1.0, 1.0, 1.0]
"#;
        let config = ExperimentConfig::from_toml(toml).unwrap();
        let system = config.build_system().unwrap();
        let spec = config.observer_spec(&system).unwrap();
        assert_eq!(spec.n_z(), 7);
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let config = ExperimentConfig::from_toml(&duffing_toml()).unwrap();
        let text = config.to_toml();
        let again = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(again, config);
        assert_eq!(again.to_toml(), text);
    }

    #[test]
    fn zero_p_names_the_field() {
        let toml = duffing_toml().replace("p = 100", "p = 0");
        let err = ExperimentConfig::from_toml(&toml).unwrap_err();
        assert!(err.to_string().contains("datagen.p"), "{err}");
    }

    #[test]
    fn unknown_method_names_the_field() {
        let toml = duffing_toml().replace("method = \"pinn\"", "method = \"dropout\"");
        let err = ExperimentConfig::from_toml(&toml).unwrap_err();
        assert!(err.to_string().contains("training.method"), "{err}");
    }

    #[test]
    fn empty_deltas_rejected() {
        let toml = duffing_toml().replace("deltas = [0.5, 1.0]", "deltas = []");
        let err = ExperimentConfig::from_toml(&toml).unwrap_err();
        assert!(err.to_string().contains("evaluation.deltas"), "{err}");
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let toml = format!("{}\n[datagen2]\nzzz = 1\n", duffing_toml());
        assert!(ExperimentConfig::from_toml(&toml).is_err());
    }

    #[test]
    fn inline_linear_system_builds() {
        let toml = r#"
[system.linear]
name = "scalar_decay"
dynamics = [[-1.0]]
output = [[1.0]]
box_lo = [-1000000.0]
box_hi = [1000000.0]

[datagen]
p = 5
box_lo = [-1.0]
box_hi = [1.0]

[observer]
default = false
a = [[-2.0]]
b = [[1.0]]
"#;
        let config = ExperimentConfig::from_toml(toml).unwrap();
        let system = config.build_system().unwrap();
        assert_eq!(system.state_dim(), 1);
        assert_eq!(system.drift(&[2.0]), vec![-2.0]);
        let spec = config.observer_spec(&system).unwrap();
        assert_eq!(spec.a()[(0, 0)], -2.0);
    }

    #[test]
    fn both_system_kinds_is_an_error() {
        let toml = r#"
[system]
name = "rossler"
[system.linear]
dynamics = [[-1.0]]
output = [[1.0]]
box_lo = [-1.0]
box_hi = [1.0]

[datagen]
p = 5
box_lo = [-1.0, -1.0, -1.0]
box_hi = [1.0, 1.0, 1.0]
"#;
        assert!(ExperimentConfig::from_toml(toml).is_err());
    }
}
