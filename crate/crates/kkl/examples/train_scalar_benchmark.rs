//! The closed-form benchmark: for `x' = -x, y = x` with filter `A = [-2]`,
//! `B = [1]`, the true transformation is the identity. Trains the
//! physics-informed pair and reports how close the learned maps are to it.

use nalgebra::DMatrix;

use kkl::datagen::generate_dataset;
use kkl::dynamics::{linear_system, AxisBox, TimeGrid};
use kkl::neural::Activation;
use kkl::training::{loss_physics, train, TrainMethod, TrainingConfig};
use kkl::{ObserverSpec, Result};

fn main() -> Result<()> {
    let system = linear_system(
        "scalar_decay",
        DMatrix::from_element(1, 1, -1.0),
        DMatrix::from_element(1, 1, 1.0),
        AxisBox::centered(1e6, 1),
    )?;
    let spec = ObserverSpec::new(
        DMatrix::from_element(1, 1, -2.0),
        DMatrix::from_element(1, 1, 1.0),
    )?;

    let grid = TimeGrid::forward(0.0, 2.0, 0.02)?;
    let sample_box = AxisBox::centered(1.0, 1);
    let dataset = generate_dataset(&system, &spec, &sample_box, 50, &grid, 1e-3, 0)?;
    println!(
        "dataset: {} trajectories x {} samples",
        dataset.p,
        grid.sample_count()
    );

    let config = TrainingConfig {
        method: TrainMethod::Pinn,
        chi: 1.0,
        lambda: 0.5,
        learning_rate: 5e-3,
        lr_decay: 0.7,
        decay_interval: Some(250),
        batch_size: 32,
        epochs: 25,
        seed: 0,
        hidden_layers: vec![32, 32],
        activation: Activation::Tanh,
        ..TrainingConfig::default()
    };
    let start = std::time::Instant::now();
    let pair = train(&dataset, &system, &spec, &config)?;
    let elapsed = start.elapsed();
    let last = pair.loss_history.last().unwrap();
    println!(
        "trained {} steps in {:.1?}: total loss {:.3e}",
        pair.loss_history.len(),
        elapsed,
        last.total
    );

    // Compare both maps against the identity on a grid over [-1, 1].
    let mut worst_t = 0.0f64;
    let mut worst_tstar = 0.0f64;
    let probes: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 / 100.0).collect();
    for &x in &probes {
        worst_t = worst_t.max((pair.t_model.forward(&[x])[0] - x).abs());
        worst_tstar = worst_tstar.max((pair.tstar_model.forward(&[x])[0] - x).abs());
    }
    let batch: Vec<Vec<f64>> = probes.iter().map(|x| vec![*x]).collect();
    let (residual, _) = loss_physics(&pair.t_model, &system, &spec, &batch)?;
    println!("max |T(x) - x|    = {worst_t:.4}");
    println!("max |T*(z) - z|   = {worst_tstar:.4}");
    println!("mean PDE residual = {residual:.3e}");
    Ok(())
}
