//! A minimal multilayer-perceptron stack with exactly the derivatives the
//! physics-informed objective needs:
//!
//! * [`MlpModel::forward`] — plain evaluation,
//! * [`MlpModel::forward_with_input_tangent`] — a Jacobian-vector product
//!   `J(x) d` computed in one forward sweep (the PDE residual contracts the
//!   network Jacobian against the system drift),
//! * [`MlpModel::backward`] — reverse-mode gradients of `u . f(x)` in the
//!   parameters (and the input, which composed losses need),
//! * [`MlpModel::backward_through_tangent`] — reverse mode *over* the
//!   tangent sweep: gradients of `u . (J(x) d)` in the parameters.
//!
//! Normalization is a fixed affine layer inside the model rather than a
//! preprocessing step, so every derivative above automatically includes the
//! scaling. Parameters live in one flat vector laid out per layer as the
//! row-major weight matrix followed by the bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Tanh => v.tanh(),
        }
    }

    /// First derivative; the relu kink at zero takes the inactive branch.
    #[inline]
    fn d(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
        }
    }

    /// Second derivative; zero almost everywhere for relu.
    #[inline]
    fn dd(self, v: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = v.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Per-feature affine standardization `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }
}

/// Value and directional derivative of one network evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEval {
    pub value: Vec<f64>,
    /// `J(x) . direction` where `J` is the network Jacobian at `x`.
    pub input_tangent: Vec<f64>,
}

/// Gradients of `upstream . forward(x)`.
#[derive(Debug, Clone)]
pub struct BackwardEval {
    pub param_grad: Vec<f64>,
    /// Cotangent pulled back to the (unnormalized) input.
    pub input_grad: Vec<f64>,
}

/// Fully-connected network with fixed input/output standardization layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub in_norm: Normalization,
    pub out_norm: Normalization,
}

/// Offsets of one layer's weights and bias inside the flat parameter vector.
#[derive(Clone, Copy)]
struct LayerSpan {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl MlpModel {
    /// Total parameter count for a dimension list.
    pub fn param_count(layer_dims: &[usize]) -> usize {
        layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Fresh model with fan-in-scaled Gaussian weights (variance `2/fan_in`
    /// for relu, `1/fan_in` for tanh), zero biases, identity normalization.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(
                "a network needs at least input and output dimensions".into(),
            ));
        }
        if layer_dims.iter().any(|d| *d == 0) {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count(layer_dims));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let var = match activation {
                Activation::Relu => 2.0 / fan_in as f64,
                Activation::Tanh => 1.0 / fan_in as f64,
            };
            let dist = Normal::new(0.0, var.sqrt()).expect("positive std");
            for _ in 0..fan_in * fan_out {
                params.push(dist.sample(&mut rng));
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            activation,
            params,
            in_norm: Normalization::identity(layer_dims[0]),
            out_norm: Normalization::identity(*layer_dims.last().unwrap()),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut out = Vec::with_capacity(self.layer_count());
        let mut offset = 0;
        for w in self.layer_dims.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            out.push(LayerSpan {
                w: offset,
                b: offset + rows * cols,
                rows,
                cols,
            });
            offset += rows * cols + rows;
        }
        out
    }

    /// Sets the standardization layers from data: per-feature mean and
    /// population standard deviation of the inputs and targets, stds floored
    /// at `1e-8` so constant features stay finite.
    pub fn fit_normalization(mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        self.in_norm = fit_norm(inputs, self.input_dim())?;
        self.out_norm = fit_norm(targets, self.output_dim())?;
        Ok(self)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.try_forward(x).expect("input dimension mismatch")
    }

    pub fn try_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let spans = self.spans();
        let last = self.layer_count() - 1;
        let mut a = self.in_norm.normalize(x);
        for (l, span) in spans.iter().enumerate() {
            let mut z = self.affine(span, &a);
            if l < last {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
            }
            a = z;
        }
        Ok(self.out_norm.denormalize(&a))
    }

    fn affine(&self, span: &LayerSpan, a: &[f64]) -> Vec<f64> {
        let w = &self.params[span.w..span.w + span.rows * span.cols];
        let b = &self.params[span.b..span.b + span.rows];
        let mut out = Vec::with_capacity(span.rows);
        for r in 0..span.rows {
            let row = &w[r * span.cols..(r + 1) * span.cols];
            let mut acc = b[r];
            for (wi, ai) in row.iter().zip(a) {
                acc += wi * ai;
            }
            out.push(acc);
        }
        out
    }

    /// Evaluates the network together with the directional derivative of its
    /// output along `direction` (a Jacobian-vector product).
    pub fn forward_with_input_tangent(&self, x: &[f64], direction: &[f64]) -> DualEval {
        self.try_forward_with_input_tangent(x, direction)
            .expect("input dimension mismatch")
    }

    pub fn try_forward_with_input_tangent(
        &self,
        x: &[f64],
        direction: &[f64],
    ) -> Result<DualEval> {
        self.check_input(x)?;
        self.check_input(direction)?;
        let spans = self.spans();
        let last = self.layer_count() - 1;
        let mut a = self.in_norm.normalize(x);
        let mut da: Vec<f64> = direction
            .iter()
            .zip(&self.in_norm.std)
            .map(|(d, s)| d / s)
            .collect();
        for (l, span) in spans.iter().enumerate() {
            let z = self.affine(span, &a);
            let dz = self.linear_map(span, &da);
            if l < last {
                a = z.iter().map(|v| self.activation.apply(*v)).collect();
                da = z
                    .iter()
                    .zip(&dz)
                    .map(|(v, dv)| self.activation.d(*v) * dv)
                    .collect();
            } else {
                a = z;
                da = dz;
            }
        }
        Ok(DualEval {
            value: self.out_norm.denormalize(&a),
            input_tangent: da
                .iter()
                .zip(&self.out_norm.std)
                .map(|(v, s)| v * s)
                .collect(),
        })
    }

    fn linear_map(&self, span: &LayerSpan, v: &[f64]) -> Vec<f64> {
        let w = &self.params[span.w..span.w + span.rows * span.cols];
        let mut out = Vec::with_capacity(span.rows);
        for r in 0..span.rows {
            let row = &w[r * span.cols..(r + 1) * span.cols];
            let mut acc = 0.0;
            for (wi, vi) in row.iter().zip(v) {
                acc += wi * vi;
            }
            out.push(acc);
        }
        out
    }

    fn linear_map_transpose(&self, span: &LayerSpan, v: &[f64]) -> Vec<f64> {
        let w = &self.params[span.w..span.w + span.rows * span.cols];
        let mut out = vec![0.0; span.cols];
        for r in 0..span.rows {
            let row = &w[r * span.cols..(r + 1) * span.cols];
            for (o, wi) in out.iter_mut().zip(row) {
                *o += wi * v[r];
            }
        }
        out
    }

    /// Gradient of `upstream . forward(x)` in the parameters plus the
    /// cotangent pulled back to the input. Linear in `upstream`, so batch
    /// gradients compose by summation.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> BackwardEval {
        self.try_backward(x, upstream).expect("dimension mismatch")
    }

    pub fn try_backward(&self, x: &[f64], upstream: &[f64]) -> Result<BackwardEval> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "upstream has length {}, network produces {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let spans = self.spans();
        let last = self.layer_count() - 1;

        // Forward sweep keeping pre-activations and activations.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count() + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count());
        acts.push(self.in_norm.normalize(x));
        for (l, span) in spans.iter().enumerate() {
            let z = self.affine(span, acts.last().unwrap());
            let a = if l < last {
                z.iter().map(|v| self.activation.apply(*v)).collect()
            } else {
                z.clone()
            };
            pres.push(z);
            acts.push(a);
        }

        let mut grad = vec![0.0; self.params.len()];
        // d(u . y)/dz_last includes the output scaling.
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(&self.out_norm.std)
            .map(|(u, s)| u * s)
            .collect();
        for l in (0..=last).rev() {
            let span = &spans[l];
            let a_prev = &acts[l];
            for r in 0..span.rows {
                let g = delta[r];
                let row = &mut grad[span.w + r * span.cols..span.w + (r + 1) * span.cols];
                for (gi, ai) in row.iter_mut().zip(a_prev) {
                    *gi += g * ai;
                }
                grad[span.b + r] += g;
            }
            if l > 0 {
                let back = self.linear_map_transpose(span, &delta);
                delta = back
                    .iter()
                    .zip(&pres[l - 1])
                    .map(|(v, z)| v * self.activation.d(*z))
                    .collect();
            } else {
                delta = self.linear_map_transpose(span, &delta);
            }
        }
        let input_grad: Vec<f64> = delta
            .iter()
            .zip(&self.in_norm.std)
            .map(|(v, s)| v / s)
            .collect();
        Ok(BackwardEval {
            param_grad: grad,
            input_grad,
        })
    }

    /// Gradient of `upstream . (J(x) direction)` in the parameters: reverse
    /// mode over the tangent sweep. Both sweeps share one activation
    /// pattern, so for relu the second-derivative terms vanish identically.
    pub fn backward_through_tangent(
        &self,
        x: &[f64],
        direction: &[f64],
        upstream: &[f64],
    ) -> Vec<f64> {
        self.try_backward_through_tangent(x, direction, upstream)
            .expect("dimension mismatch")
    }

    pub fn try_backward_through_tangent(
        &self,
        x: &[f64],
        direction: &[f64],
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_input(direction)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "upstream has length {}, network produces {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let spans = self.spans();
        let last = self.layer_count() - 1;

        // Forward-tangent sweep, keeping everything both reverse passes need.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count() + 1);
        let mut tangents: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count() + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count());
        let mut pre_tangents: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count());
        acts.push(self.in_norm.normalize(x));
        tangents.push(
            direction
                .iter()
                .zip(&self.in_norm.std)
                .map(|(d, s)| d / s)
                .collect(),
        );
        for (l, span) in spans.iter().enumerate() {
            let z = self.affine(span, acts.last().unwrap());
            let dz = self.linear_map(span, tangents.last().unwrap());
            let (a, da) = if l < last {
                (
                    z.iter().map(|v| self.activation.apply(*v)).collect(),
                    z.iter()
                        .zip(&dz)
                        .map(|(v, dv)| self.activation.d(*v) * dv)
                        .collect(),
                )
            } else {
                (z.clone(), dz.clone())
            };
            pres.push(z);
            pre_tangents.push(dz);
            acts.push(a);
            tangents.push(da);
        }

        // Reverse pass over the joint (value, tangent) computation. S only
        // reads the output tangent, so the value chain starts at zero.
        let mut grad = vec![0.0; self.params.len()];
        let mut lambda: Vec<f64> = upstream
            .iter()
            .zip(&self.out_norm.std)
            .map(|(u, s)| u * s)
            .collect(); // dS/d(pre-tangent of layer l)
        let mut delta: Vec<f64> = vec![0.0; self.output_dim()]; // dS/d(pre-activation)
        for l in (0..=last).rev() {
            let span = &spans[l];
            let a_prev = &acts[l];
            let t_prev = &tangents[l];
            for r in 0..span.rows {
                let (lr, dr) = (lambda[r], delta[r]);
                let row = &mut grad[span.w + r * span.cols..span.w + (r + 1) * span.cols];
                for (c, gi) in row.iter_mut().enumerate() {
                    *gi += lr * t_prev[c] + dr * a_prev[c];
                }
                grad[span.b + r] += dr;
            }
            if l > 0 {
                let a_bar = self.linear_map_transpose(span, &delta);
                let t_bar = self.linear_map_transpose(span, &lambda);
                let z = &pres[l - 1];
                let dz = &pre_tangents[l - 1];
                let mut next_delta = Vec::with_capacity(z.len());
                let mut next_lambda = Vec::with_capacity(z.len());
                for i in 0..z.len() {
                    let d1 = self.activation.d(z[i]);
                    let d2 = self.activation.dd(z[i]);
                    next_delta.push(d2 * dz[i] * t_bar[i] + d1 * a_bar[i]);
                    next_lambda.push(d1 * t_bar[i]);
                }
                delta = next_delta;
                lambda = next_lambda;
            }
        }
        Ok(grad)
    }

    /// Serializes the model as JSON; shortest-round-trip float formatting
    /// makes save/load bit-exact.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: MlpModel = serde_json::from_str(s)?;
        if model.params.len() != Self::param_count(&model.layer_dims) {
            return Err(Error::Format(format!(
                "parameter vector has {} entries, layout requires {}",
                model.params.len(),
                Self::param_count(&model.layer_dims)
            )));
        }
        if model.in_norm.mean.len() != model.layer_dims[0]
            || model.out_norm.mean.len() != *model.layer_dims.last().unwrap()
        {
            return Err(Error::Format(
                "normalization dimensions do not match the layer dimensions".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn fit_norm(samples: &[Vec<f64>], dim: usize) -> Result<Normalization> {
    if samples.len() < 2 {
        return Err(Error::Config(
            "normalization needs at least 2 samples per feature".into(),
        ));
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::Dimension(format!(
            "normalization samples must all have length {dim}"
        )));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for s in samples {
        for ((v, m), acc) in s.iter().zip(&mean).zip(var.iter_mut()) {
            let d = v - m;
            *acc += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(1e-8)).collect();
    Ok(Normalization { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Probe net with non-trivial weights, biases, and normalization.
    fn probe_model(dims: &[usize], activation: Activation, seed: u64) -> MlpModel {
        let mut model = MlpModel::init(dims, activation, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
        for p in &mut model.params {
            *p += 0.3 * rng.random_range(-1.0..1.0);
        }
        model.in_norm = Normalization {
            mean: (0..dims[0]).map(|i| 0.1 * i as f64).collect(),
            std: (0..dims[0]).map(|i| 0.8 + 0.1 * i as f64).collect(),
        };
        let out = *dims.last().unwrap();
        model.out_norm = Normalization {
            mean: (0..out).map(|i| -0.2 + 0.05 * i as f64).collect(),
            std: (0..out).map(|i| 1.3 - 0.07 * i as f64).collect(),
        };
        model
    }

    fn identity_model(dim: usize) -> MlpModel {
        let mut m = MlpModel::init(&[dim, dim], Activation::Relu, 0).unwrap();
        m.params = vec![0.0; MlpModel::param_count(&[dim, dim])];
        for i in 0..dim {
            m.params[i * dim + i] = 1.0;
        }
        m
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn param_count_matches_architecture_arithmetic() {
        let dims = [2, 50, 50, 50, 50, 50, 5];
        assert_eq!(MlpModel::param_count(&dims), 10605);
        let model = MlpModel::init(&dims, Activation::Relu, 1).unwrap();
        assert_eq!(model.params.len(), 10605);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = MlpModel::init(&[3, 8, 2], Activation::Tanh, 9).unwrap();
        let b = MlpModel::init(&[3, 8, 2], Activation::Tanh, 9).unwrap();
        assert_eq!(a.params, b.params);
        // Biases sit after each weight block.
        let spans = [(0, 3 * 8, 8), (3 * 8 + 8, 8 * 2, 2)];
        for (off, wlen, blen) in spans {
            for i in 0..blen {
                assert_eq!(a.params[off + wlen + i], 0.0);
            }
        }
        // Zero input through a zero-bias relu net denormalizes zero.
        let out = a.forward(&[0.0, 0.0, 0.0]);
        assert_eq!(out, a.out_norm.denormalize(&vec![0.0; 2]));
    }

    #[test]
    fn identity_network_is_identity() {
        let m = identity_model(3);
        let x = [0.3, -1.2, 4.0];
        assert_eq!(m.forward(&x), x.to_vec());
        let dual = m.forward_with_input_tangent(&x, &[1.0, 0.0, -2.0]);
        assert_eq!(dual.input_tangent, vec![1.0, 0.0, -2.0]);
    }

    #[test]
    fn relu_is_locally_linear_on_active_pattern() {
        let m = probe_model(&[2, 16, 16, 2], Activation::Relu, 3);
        // Probe along a segment short enough to keep the activation pattern.
        let x0 = [0.4, 0.2];
        let d = [1e-3, -5e-4];
        let f = |t: f64| m.forward(&[x0[0] + t * d[0], x0[1] + t * d[1]]);
        let (f0, f1, f2) = (f(0.0), f(0.5), f(1.0));
        for i in 0..2 {
            assert_relative_eq!(f1[i], 0.5 * (f0[i] + f2[i]), epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_is_pure() {
        let m = probe_model(&[2, 8, 3], Activation::Tanh, 5);
        let x = [0.1, -0.7];
        assert_eq!(m.forward(&x), m.forward(&x));
    }

    #[test]
    fn jvp_matches_finite_differences_tanh() {
        let m = probe_model(&[3, 16, 16, 4], Activation::Tanh, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = rand_vec(&mut rng, 3, 1.0);
            let d = rand_vec(&mut rng, 3, 1.0);
            let dual = m.forward_with_input_tangent(&x, &d);
            let eps = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - eps * b).collect();
            let (fp, fm) = (m.forward(&xp), m.forward(&xm));
            for i in 0..4 {
                let fd = (fp[i] - fm[i]) / (2.0 * eps);
                let denom = fd.abs().max(dual.input_tangent[i].abs()).max(1e-6);
                assert!(
                    (fd - dual.input_tangent[i]).abs() / denom < 1e-6,
                    "jvp {} vs fd {}",
                    dual.input_tangent[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn jvp_zero_direction_is_zero() {
        let m = probe_model(&[2, 8, 2], Activation::Relu, 7);
        let dual = m.forward_with_input_tangent(&[0.2, 0.5], &[0.0, 0.0]);
        assert_eq!(dual.input_tangent, vec![0.0, 0.0]);
    }

    #[test]
    fn jvp_agrees_with_assembled_jacobian() {
        let m = probe_model(&[3, 10, 2], Activation::Tanh, 13);
        let x = [0.3, -0.4, 0.9];
        // Assemble J column by column through unit-direction JVPs.
        let mut jac = vec![vec![0.0; 3]; 2];
        for c in 0..3 {
            let mut e = [0.0; 3];
            e[c] = 1.0;
            let col = m.forward_with_input_tangent(&x, &e).input_tangent;
            for r in 0..2 {
                jac[r][c] = col[r];
            }
        }
        let d = [0.7, -1.3, 0.2];
        let want: Vec<f64> = (0..2)
            .map(|r| (0..3).map(|c| jac[r][c] * d[c]).sum())
            .collect();
        let got = m.forward_with_input_tangent(&x, &d).input_tangent;
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_matches_finite_differences_tanh() {
        let m = probe_model(&[2, 12, 12, 3], Activation::Tanh, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, 2, 1.0);
        let u = rand_vec(&mut rng, 3, 1.0);
        let grad = m.backward(&x, &u).param_grad;
        let eps = 1e-5;
        for _ in 0..20 {
            let idx = rng.random_range(0..m.params.len());
            let mut plus = m.clone();
            plus.params[idx] += eps;
            let mut minus = m.clone();
            minus.params[idx] -= eps;
            let s = |mm: &MlpModel| -> f64 {
                mm.forward(&x).iter().zip(&u).map(|(a, b)| a * b).sum()
            };
            let fd = (s(&plus) - s(&minus)) / (2.0 * eps);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-5,
                "param {idx}: grad {} vs fd {}",
                grad[idx],
                fd
            );
        }
    }

    #[test]
    fn backward_input_grad_matches_jvp_transpose() {
        // <u, J d> must equal <J^T u, d>.
        let m = probe_model(&[3, 9, 2], Activation::Tanh, 23);
        let x = [0.2, 0.1, -0.6];
        let d = [0.5, -0.25, 1.5];
        let u = [1.1, -0.3];
        let lhs: f64 = m
            .forward_with_input_tangent(&x, &d)
            .input_tangent
            .iter()
            .zip(&u)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = m
            .backward(&x, &u)
            .input_grad
            .iter()
            .zip(&d)
            .map(|(a, b)| a * b)
            .sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn backward_zero_upstream_and_linearity() {
        let m = probe_model(&[2, 6, 2], Activation::Relu, 29);
        let x = [0.4, 0.9];
        let zero = m.backward(&x, &[0.0, 0.0]).param_grad;
        assert!(zero.iter().all(|g| *g == 0.0));

        let u1 = [0.3, -0.8];
        let u2 = [-1.2, 0.5];
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let g1 = m.backward(&x, &u1).param_grad;
        let g2 = m.backward(&x, &u2).param_grad;
        let gs = m.backward(&x, &sum).param_grad;
        for i in 0..gs.len() {
            assert_relative_eq!(gs[i], g1[i] + g2[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn tangent_backward_matches_finite_differences_tanh() {
        let m = probe_model(&[2, 10, 10, 3], Activation::Tanh, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut rng, 2, 1.0);
        let d = rand_vec(&mut rng, 2, 1.0);
        let u = rand_vec(&mut rng, 3, 1.0);
        let grad = m.backward_through_tangent(&x, &d, &u);
        let eps = 1e-5;
        let s = |mm: &MlpModel| -> f64 {
            mm.forward_with_input_tangent(&x, &d)
                .input_tangent
                .iter()
                .zip(&u)
                .map(|(a, b)| a * b)
                .sum()
        };
        for _ in 0..20 {
            let idx = rng.random_range(0..m.params.len());
            let mut plus = m.clone();
            plus.params[idx] += eps;
            let mut minus = m.clone();
            minus.params[idx] -= eps;
            let fd = (s(&plus) - s(&minus)) / (2.0 * eps);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-4,
                "param {idx}: grad {} vs fd {}",
                grad[idx],
                fd
            );
        }
    }

    #[test]
    fn tangent_backward_linear_layer_closed_form() {
        // y = W x + b gives d(u . (W d))/dW = u d^T and zero bias gradient.
        let mut m = MlpModel::init(&[2, 2], Activation::Relu, 0).unwrap();
        m.params = vec![0.5, -1.0, 2.0, 0.3, 0.7, -0.2];
        let d = [0.4, -0.9];
        let u = [1.5, 2.5];
        let grad = m.backward_through_tangent(&[0.3, 0.8], &d, &u);
        let expected = [
            u[0] * d[0],
            u[0] * d[1],
            u[1] * d[0],
            u[1] * d[1],
            0.0,
            0.0,
        ];
        assert_eq!(grad, expected.to_vec());
    }

    #[test]
    fn tangent_backward_zero_direction_is_zero() {
        let m = probe_model(&[2, 8, 2], Activation::Tanh, 37);
        let grad = m.backward_through_tangent(&[0.1, 0.2], &[0.0, 0.0], &[1.0, 1.0]);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn relu_gradients_away_from_kinks() {
        // Same finite-difference checks, restricted to probe points whose
        // pre-activations all clear the kink by at least 1e-3.
        let m = probe_model(&[2, 8, 8, 2], Activation::Relu, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clears_kinks = |x: &[f64]| {
            let spans = m.spans();
            let mut a = m.in_norm.normalize(x);
            for (l, span) in spans.iter().enumerate() {
                let z = m.affine(span, &a);
                if z.iter().any(|v| v.abs() < 1e-3) {
                    return false;
                }
                if l < spans.len() - 1 {
                    a = z.iter().map(|v| m.activation.apply(*v)).collect();
                }
            }
            true
        };
        let mut checked = 0;
        while checked < 5 {
            let x = rand_vec(&mut rng, 2, 1.5);
            if !clears_kinks(&x) {
                continue;
            }
            checked += 1;
            let u = rand_vec(&mut rng, 2, 1.0);
            let d = rand_vec(&mut rng, 2, 0.5);
            let g = m.backward(&x, &u).param_grad;
            let gt = m.backward_through_tangent(&x, &d, &u);
            let eps = 1e-6;
            for _ in 0..10 {
                let idx = rng.random_range(0..m.params.len());
                let mut plus = m.clone();
                plus.params[idx] += eps;
                let mut minus = m.clone();
                minus.params[idx] -= eps;
                let sv = |mm: &MlpModel| -> f64 {
                    mm.forward(&x).iter().zip(&u).map(|(a, b)| a * b).sum()
                };
                let st = |mm: &MlpModel| -> f64 {
                    mm.forward_with_input_tangent(&x, &d)
                        .input_tangent
                        .iter()
                        .zip(&u)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let fdv = (sv(&plus) - sv(&minus)) / (2.0 * eps);
                let fdt = (st(&plus) - st(&minus)) / (2.0 * eps);
                assert!((fdv - g[idx]).abs() / fdv.abs().max(g[idx].abs()).max(1e-4) < 1e-4);
                assert!((fdt - gt[idx]).abs() / fdt.abs().max(gt[idx].abs()).max(1e-4) < 1e-3);
            }
        }
    }

    #[test]
    fn normalization_fit_and_round_trip() {
        let m = MlpModel::init(&[1, 4, 1], Activation::Tanh, 0).unwrap();
        let inputs = vec![vec![-1.0], vec![1.0]];
        let targets = vec![vec![3.0], vec![3.0]];
        let m = m.fit_normalization(&inputs, &targets).unwrap();
        assert_relative_eq!(m.in_norm.mean[0], 0.0);
        assert_relative_eq!(m.in_norm.std[0], 1.0); // population convention
        assert_eq!(m.out_norm.std[0], 1e-8); // degenerate variance floored

        let x = vec![0.7532];
        let back = m.in_norm.denormalize(&m.in_norm.normalize(&x));
        assert!((back[0] - x[0]).abs() < 1e-12);
    }

    #[test]
    fn fitted_normalization_centers_training_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs: Vec<Vec<f64>> = (0..200).map(|_| rand_vec(&mut rng, 3, 5.0)).collect();
        let targets: Vec<Vec<f64>> = (0..200).map(|_| rand_vec(&mut rng, 2, 2.0)).collect();
        let m = MlpModel::init(&[3, 4, 2], Activation::Relu, 0)
            .unwrap()
            .fit_normalization(&inputs, &targets)
            .unwrap();
        for d in 0..3 {
            let mean: f64 =
                inputs.iter().map(|s| m.in_norm.normalize(s)[d]).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = probe_model(&[2, 7, 3], Activation::Relu, 43);
        let back = MlpModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn from_json_rejects_inconsistent_layout() {
        let mut m = probe_model(&[2, 4, 1], Activation::Tanh, 47);
        m.params.pop();
        let s = serde_json::to_string(&m).unwrap();
        assert!(matches!(MlpModel::from_json(&s), Err(Error::Format(_))));
    }
}
