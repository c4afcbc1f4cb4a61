//! Autonomous nonlinear systems and fixed-step numerical integration.
//!
//! The integrator is the classic 4th-order Runge-Kutta scheme with a fixed
//! step, running forward or backward in time. States are plain `Vec<f64>`;
//! a [`Trajectory`] is the sampled solution on a [`TimeGrid`].

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any state component beyond this magnitude (or non-finite) aborts the
/// integration. Backward Rossler orbits blow up in finite time; failing
/// loudly keeps the divergence out of datasets.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

/// Axis-aligned box in state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Dimension(format!(
                "box bounds must be nonempty and of equal length, got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) {
                return Err(Error::Config(format!(
                    "box axis {i}: lower bound {l} must be below upper bound {h}"
                )));
            }
        }
        Ok(AxisBox { lo, hi })
    }

    /// The symmetric box `[-r, r]^dim`.
    pub fn centered(r: f64, dim: usize) -> Self {
        AxisBox {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn contains_box(&self, other: &AxisBox) -> bool {
        self.dim() == other.dim()
            && other
                .lo
                .iter()
                .zip(&other.hi)
                .zip(self.lo.iter().zip(&self.hi))
                .all(|((ol, oh), (l, h))| ol >= l && oh <= h)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// Closest point of the box to `x` (componentwise clamp).
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| v.max(*l).min(*h))
            .collect()
    }

    /// Euclidean distance from `x` to the box (zero inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| {
                let d = if v < l {
                    l - v
                } else if v > h {
                    v - h
                } else {
                    0.0
                };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridDirection {
    Forward,
    Backward,
}

/// Uniform time grid. Sample `k` sits at exactly `t_start + k * step` where
/// `step` carries the direction sign, so grids never accumulate drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    dt: f64,
    direction: GridDirection,
}

impl TimeGrid {
    pub fn forward(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        Self::new(t_start, t_end, dt, GridDirection::Forward)
    }

    pub fn backward(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        Self::new(t_start, t_end, dt, GridDirection::Backward)
    }

    fn new(t_start: f64, t_end: f64, dt: f64, direction: GridDirection) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("grid dt must be positive, got {dt}")));
        }
        let span = t_end - t_start;
        let ok = match direction {
            GridDirection::Forward => span > 0.0,
            GridDirection::Backward => span < 0.0,
        };
        if !ok {
            return Err(Error::Config(format!(
                "grid span [{t_start}, {t_end}] does not match direction {direction:?}"
            )));
        }
        let grid = TimeGrid {
            t_start,
            t_end,
            dt,
            direction,
        };
        if grid.sample_count() < 2 {
            return Err(Error::Config(format!(
                "grid [{t_start}, {t_end}] with dt {dt} has fewer than 2 samples"
            )));
        }
        Ok(grid)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn direction(&self) -> GridDirection {
        self.direction
    }

    /// Step including the direction sign.
    pub fn signed_dt(&self) -> f64 {
        match self.direction {
            GridDirection::Forward => self.dt,
            GridDirection::Backward => -self.dt,
        }
    }

    pub fn sample_count(&self) -> usize {
        let steps = ((self.t_end - self.t_start) / self.signed_dt()).round();
        steps as usize + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.signed_dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.sample_count()).map(|k| self.time(k)).collect()
    }
}

/// Sampled solution of an ODE; row `k` of `states` is the state at grid
/// time index `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    /// Writes `t,x1,...,xn` rows at full precision; Rust's shortest-decimal
    /// float formatting makes the round trip exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t");
        for i in 1..=self.dim() {
            write!(header, ",x{i}").unwrap();
        }
        writeln!(w, "{header}")?;
        for (k, row) in self.states.iter().enumerate() {
            let mut line = format!("{}", self.grid.time(k));
            for v in row {
                write!(line, ",{v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads rows written by [`Trajectory::write_csv`]; returns the sampled
    /// times and states.
    pub fn read_csv<R: BufRead>(r: R) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            if ln == 0 {
                if !line.starts_with("t,") {
                    return Err(Error::Format(format!(
                        "expected trajectory CSV header starting with 't,', got '{line}'"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))
            });
            let t = fields
                .next()
                .ok_or_else(|| Error::Format(format!("line {}: empty row", ln + 1)))??;
            times.push(t);
            states.push(fields.collect::<Result<Vec<f64>>>()?);
        }
        Ok((times, states))
    }
}

/// An autonomous system `x' = f(x), y = h(x)` on a compact admissible box.
#[derive(Clone)]
pub struct DynamicalSystem {
    name: String,
    state_dim: usize,
    output_dim: usize,
    admissible_box: AxisBox,
    drift: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    output: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl std::fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("output_dim", &self.output_dim)
            .finish()
    }
}

impl DynamicalSystem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        output_dim: usize,
        admissible_box: AxisBox,
        drift: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        output: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if admissible_box.dim() != state_dim {
            return Err(Error::Dimension(format!(
                "admissible box dimension {} does not match state dimension {state_dim}",
                admissible_box.dim()
            )));
        }
        Ok(DynamicalSystem {
            name: name.into(),
            state_dim,
            output_dim,
            admissible_box,
            drift: Arc::new(drift),
            output: Arc::new(output),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn admissible_box(&self) -> &AxisBox {
        &self.admissible_box
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        (self.output)(x)
    }

    /// The modified vector field used for backward solutions: `f(x)` inside
    /// `clamp_box`, zero outside, which freezes escaping orbits.
    pub fn clamped_drift(&self, x: &[f64], clamp_box: &AxisBox) -> Vec<f64> {
        if clamp_box.contains(x) {
            (self.drift)(x)
        } else {
            vec![0.0; self.state_dim]
        }
    }

    /// Replaces the admissible box, keeping the vector fields.
    pub fn with_admissible_box(mut self, b: AxisBox) -> Result<Self> {
        if b.dim() != self.state_dim {
            return Err(Error::Dimension(format!(
                "box dimension {} does not match state dimension {}",
                b.dim(),
                self.state_dim
            )));
        }
        self.admissible_box = b;
        Ok(self)
    }
}

/// The named benchmark oscillators.
///
/// * `reverse_duffing`: `x1' = x2^3, x2' = -x1, y = x1` on `[-1,1]^2`.
/// * `rossler`: the Rossler attractor with `a = b = 0.2`, `c = 5.7` and
///   `y = x2`, on `[-1,1]^3`.
pub fn builtin_system(name: &str) -> Result<DynamicalSystem> {
    match name {
        "reverse_duffing" => DynamicalSystem::new(
            "reverse_duffing",
            2,
            1,
            AxisBox::centered(1.0, 2),
            |x| vec![x[1] * x[1] * x[1], -x[0]],
            |x| vec![x[0]],
        ),
        "rossler" => {
            let (a, b, c) = (0.2, 0.2, 5.7);
            DynamicalSystem::new(
                "rossler",
                3,
                1,
                AxisBox::centered(1.0, 3),
                move |x| vec![-x[1] - x[2], x[0] + a * x[1], b + x[2] * (x[0] - c)],
                |x| vec![x[1]],
            )
        }
        other => Err(Error::Config(format!(
            "unknown builtin system '{other}' (expected 'reverse_duffing' or 'rossler')"
        ))),
    }
}

/// A linear system `x' = F x, y = C x` defined by plain matrices; the shape
/// every inline config definition reduces to.
pub fn linear_system(
    name: impl Into<String>,
    dynamics: DMatrix<f64>,
    output: DMatrix<f64>,
    admissible_box: AxisBox,
) -> Result<DynamicalSystem> {
    let n = dynamics.nrows();
    if dynamics.ncols() != n || output.ncols() != n {
        return Err(Error::Dimension(format!(
            "linear system needs square dynamics and matching output columns, got {}x{} and {}x{}",
            dynamics.nrows(),
            dynamics.ncols(),
            output.nrows(),
            output.ncols()
        )));
    }
    let n_y = output.nrows();
    let f = dynamics.clone();
    let h = output.clone();
    DynamicalSystem::new(
        name,
        n,
        n_y,
        admissible_box,
        move |x| (&f * DMatrix::from_column_slice(x.len(), 1, x)).as_slice().to_vec(),
        move |x| (&h * DMatrix::from_column_slice(x.len(), 1, x)).as_slice().to_vec(),
    )
}

fn check_finite(x: &[f64], index: usize, time: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        Err(Error::Divergence {
            index,
            time,
            trajectory: None,
        })
    } else {
        Ok(())
    }
}

/// Classic fixed-step RK4. Backward grids integrate with a negated time
/// step; samples are ordered from `t_start` to `t_end` either way.
pub fn integrate_rk4(
    deriv: &dyn Fn(f64, &[f64]) -> Vec<f64>,
    x0: &[f64],
    grid: &TimeGrid,
) -> Result<Trajectory> {
    let n = grid.sample_count();
    let h = grid.signed_dt();
    let dim = x0.len();
    let mut states = Vec::with_capacity(n);
    check_finite(x0, 0, grid.time(0))?;
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    let mut stage = vec![0.0; dim];
    for k in 0..n - 1 {
        let t = grid.time(k);
        let k1 = deriv(t, &x);
        for i in 0..dim {
            stage[i] = x[i] + 0.5 * h * k1[i];
        }
        let k2 = deriv(t + 0.5 * h, &stage);
        for i in 0..dim {
            stage[i] = x[i] + 0.5 * h * k2[i];
        }
        let k3 = deriv(t + 0.5 * h, &stage);
        for i in 0..dim {
            stage[i] = x[i] + h * k3[i];
        }
        let k4 = deriv(t + h, &stage);
        for i in 0..dim {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&x, k + 1, grid.time(k + 1))?;
        states.push(x.clone());
    }
    Ok(Trajectory { grid: *grid, states })
}

/// Reconstructs the input at an RK4 midpoint from neighbouring samples.
///
/// A literal zero-order hold caps the filter accuracy near `dt * |u'|`, which
/// would dominate every downstream tolerance; cubic midpoints keep the
/// sampled-input path at the integrator's own order. Boundary steps fall
/// back to quadratic, a two-sample signal to the average.
fn midpoint_input(u: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = u.len();
    let dim = u[0].len();
    let mut out = vec![0.0; dim];
    let acc = |out: &mut Vec<f64>, w: f64, s: &Vec<f64>| {
        for i in 0..dim {
            out[i] += w * s[i];
        }
    };
    if n == 2 {
        acc(&mut out, 0.5, &u[0]);
        acc(&mut out, 0.5, &u[1]);
    } else if k == 0 {
        acc(&mut out, 0.375, &u[0]);
        acc(&mut out, 0.75, &u[1]);
        acc(&mut out, -0.125, &u[2]);
    } else if k + 2 >= n {
        acc(&mut out, -0.125, &u[k - 1]);
        acc(&mut out, 0.75, &u[k]);
        acc(&mut out, 0.375, &u[k + 1]);
    } else {
        acc(&mut out, -1.0 / 16.0, &u[k - 1]);
        acc(&mut out, 9.0 / 16.0, &u[k]);
        acc(&mut out, 9.0 / 16.0, &u[k + 1]);
        acc(&mut out, -1.0 / 16.0, &u[k + 2]);
    }
    out
}

/// Integrates the linear filter `z' = A z + B u(t)` over a forward grid,
/// where `u` is sampled once per grid point and reconstructed between
/// samples (see [`midpoint_input`]).
pub fn integrate_linear_filter(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &[Vec<f64>],
    z0: &[f64],
    grid: &TimeGrid,
) -> Result<Trajectory> {
    let n_z = a.nrows();
    if a.ncols() != n_z || b.nrows() != n_z {
        return Err(Error::Dimension(format!(
            "filter matrices must be A: n_z x n_z, B: n_z x n_y, got A {}x{}, B {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if z0.len() != n_z {
        return Err(Error::Dimension(format!(
            "z0 has length {}, expected n_z = {n_z}",
            z0.len()
        )));
    }
    if grid.direction() != GridDirection::Forward {
        return Err(Error::Config(
            "linear filter integration requires a forward grid".into(),
        ));
    }
    let count = grid.sample_count();
    if u.len() != count {
        return Err(Error::Dimension(format!(
            "input has {} samples, grid has {count}",
            u.len()
        )));
    }
    let n_y = b.ncols();
    if u.iter().any(|s| s.len() != n_y) {
        return Err(Error::Dimension(format!(
            "every input sample must have length n_y = {n_y}"
        )));
    }

    let h = grid.signed_dt();
    let deriv = |z: &[f64], uk: &[f64], out: &mut [f64]| {
        for i in 0..n_z {
            let mut acc = 0.0;
            for j in 0..n_z {
                acc += a[(i, j)] * z[j];
            }
            for j in 0..n_y {
                acc += b[(i, j)] * uk[j];
            }
            out[i] = acc;
        }
    };

    let mut states = Vec::with_capacity(count);
    check_finite(z0, 0, grid.time(0))?;
    states.push(z0.to_vec());
    let mut z = z0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![0.0; n_z],
        vec![0.0; n_z],
        vec![0.0; n_z],
        vec![0.0; n_z],
    );
    let mut stage = vec![0.0; n_z];
    for k in 0..count - 1 {
        let u_mid = midpoint_input(u, k);
        deriv(&z, &u[k], &mut k1);
        for i in 0..n_z {
            stage[i] = z[i] + 0.5 * h * k1[i];
        }
        deriv(&stage, &u_mid, &mut k2);
        for i in 0..n_z {
            stage[i] = z[i] + 0.5 * h * k2[i];
        }
        deriv(&stage, &u_mid, &mut k3);
        for i in 0..n_z {
            stage[i] = z[i] + h * k3[i];
        }
        deriv(&stage, &u[k + 1], &mut k4);
        for i in 0..n_z {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&z, k + 1, grid.time(k + 1))?;
        states.push(z.clone());
    }
    Ok(Trajectory { grid: *grid, states })
}
