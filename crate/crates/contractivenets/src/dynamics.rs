//! Fixed-step simulation of the coupled dynamics
//! τẋ = −x + W̃φ(x) + Lx + u(t), plus measurement tools: empirical
//! contraction rates in a metric, a runtime monitor for the
//! slowly-varying-slope condition, and the affine x↔y form equivalence check.

use crate::composition::ComposedNetwork;
use crate::numerics::{max_eig_sym, sym_part, Diagonal, Matrix, Vector};
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("state diverged (non-finite values) at t = {0}")]
    Diverged(f64),
    #[error("trajectories are not comparable: {0}")]
    NotComparable(String),
    #[error("monitor precondition failed: {0}")]
    MonitorRefused(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Static nonlinearity applied unit-wise. Slope bound is 1 for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// φ′; the ReLU subgradient at 0 is taken as 0.
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn map(self, v: &Vector) -> Vector {
        v.map(|x| self.apply(x))
    }
}

/// Zero-order-hold input: `values` row t is held on [t·dt, (t+1)·dt).
#[derive(Debug, Clone)]
pub struct InputSequence {
    /// T×dim, one row per step.
    pub values: Matrix,
    pub dt: f64,
}

impl InputSequence {
    pub fn new(values: Matrix, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DynamicsError::Input(format!("dt must be > 0, got {dt}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Input("non-finite input values".into()));
        }
        Ok(Self { values, dt })
    }

    pub fn zeros(steps: usize, dim: usize, dt: f64) -> Self {
        Self {
            values: Matrix::zeros(steps, dim),
            dt,
        }
    }

    pub fn constant(value: &Vector, steps: usize, dt: f64) -> Self {
        let mut m = Matrix::zeros(steps, value.len());
        for t in 0..steps {
            m.row_mut(t).copy_from(&value.transpose());
        }
        Self { values: m, dt }
    }

    /// Sample a function of time on the step grid.
    pub fn from_fn(steps: usize, dim: usize, dt: f64, f: impl Fn(f64, usize) -> f64) -> Self {
        Self {
            values: Matrix::from_fn(steps, dim, |t, i| f(t as f64 * dt, i)),
            dt,
        }
    }

    pub fn steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn step_value(&self, t: usize) -> Vector {
        self.values.row(t.min(self.steps().saturating_sub(1))).transpose()
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// CSV with header t,x_1..x_n; floats printed at full round-trip precision.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "t")?;
        for i in 0..self.dim() {
            write!(out, ",x_{}", i + 1)?;
        }
        writeln!(out)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            write!(out, "{t}")?;
            for v in x.iter() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv(input: &str) -> Result<Self> {
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (ln, line) in input.lines().enumerate() {
            if ln == 0 || line.trim().is_empty() {
                continue;
            }
            let mut vals = line.split(',').map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| DynamicsError::Input(format!("line {ln}: {e}")))
            });
            let t = vals.next().ok_or_else(|| {
                DynamicsError::Input(format!("line {ln}: empty row"))
            })??;
            let xs: std::result::Result<Vec<f64>, _> = vals.collect();
            times.push(t);
            states.push(Vector::from_vec(xs?));
        }
        Ok(Self { times, states })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    Euler,
    Rk4,
}

/// Right-hand side (−x + W̃φ(x) + Lx + u)/τ with u the per-unit drive.
fn rhs(net: &ComposedNetwork, activation: Activation, x: &Vector, u: &Vector) -> Vector {
    let offsets = net.offsets();
    let mut out = u - x;
    // W̃φ(x) blockwise
    for (idx, s) in net.subnets.iter().enumerate() {
        let o = offsets[idx];
        let ni = s.units();
        let phi = Vector::from_iterator(ni, (0..ni).map(|k| activation.apply(x[o + k])));
        let mut seg = out.rows_mut(o, ni);
        seg.gemv(1.0, &s.w, &phi, 1.0);
    }
    out.gemv(1.0, &net.l, x, 1.0);
    out / net.tau
}

/// Per-unit drive for a raw task input vector: U_in·v + b_in.
pub fn drive_from_task(net: &ComposedNetwork, task_input: &Vector) -> Result<Vector> {
    if task_input.len() != net.in_dim() {
        return Err(DynamicsError::Dimension(format!(
            "task input has {} entries, input layer expects {}",
            task_input.len(),
            net.in_dim()
        )));
    }
    Ok(&net.input_w * task_input + &net.input_b)
}

/// One integration step. The input is held constant across the step
/// (zero-order hold), including RK4's internal stages.
pub fn step(
    x: &Vector,
    u: &Vector,
    net: &ComposedNetwork,
    activation: Activation,
    dt: f64,
    method: Method,
) -> Result<Vector> {
    let n = net.n_total();
    if x.len() != n || u.len() != n {
        return Err(DynamicsError::Dimension(format!(
            "state/input lengths {}/{} do not match n={n}",
            x.len(),
            u.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::Input(format!("dt must be > 0, got {dt}")));
    }
    let next = match method {
        Method::Euler => {
            let k1 = rhs(net, activation, x, u);
            x + k1 * dt
        }
        Method::Rk4 => {
            let k1 = rhs(net, activation, x, u);
            let k2 = rhs(net, activation, &(x + &k1 * (dt / 2.0)), u);
            let k3 = rhs(net, activation, &(x + &k2 * (dt / 2.0)), u);
            let k4 = rhs(net, activation, &(x + &k3 * dt), u);
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::Diverged(f64::NAN));
    }
    Ok(next)
}

/// Integrate over a full input sequence. Inputs of dimension n are used as
/// the per-unit drive directly; inputs of the network's task dimension are
/// mapped through the input layer first.
pub fn simulate(
    x0: &Vector,
    inputs: &InputSequence,
    net: &ComposedNetwork,
    activation: Activation,
    method: Method,
) -> Result<Trajectory> {
    let n = net.n_total();
    if x0.len() != n {
        return Err(DynamicsError::Dimension(format!(
            "x0 has {} entries, expected {n}",
            x0.len()
        )));
    }
    let map_input = if inputs.dim() == n {
        false
    } else if inputs.dim() == net.in_dim() {
        true
    } else {
        return Err(DynamicsError::Dimension(format!(
            "input dim {} matches neither n={n} nor the task input dim {}",
            inputs.dim(),
            net.in_dim()
        )));
    };
    let dt = inputs.dt;
    let mut times = Vec::with_capacity(inputs.steps() + 1);
    let mut states = Vec::with_capacity(inputs.steps() + 1);
    times.push(0.0);
    states.push(x0.clone());
    let mut x = x0.clone();
    for t in 0..inputs.steps() {
        let raw = inputs.step_value(t);
        let u = if map_input {
            drive_from_task(net, &raw)?
        } else {
            raw
        };
        x = step(&x, &u, net, activation, dt, method)
            .map_err(|e| match e {
                DynamicsError::Diverged(_) => DynamicsError::Diverged(t as f64 * dt),
                other => other,
            })?;
        times.push((t + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

#[derive(Debug, Clone)]
pub struct RateFit {
    /// −slope of the least-squares fit of ln d(t) against t.
    pub rate: f64,
    pub r2: f64,
    /// Number of samples inside the fit window.
    pub window: usize,
}

/// Empirical contraction rate between two trajectories that share the input
/// and time grid: fits ln √(ΔᵀMΔ) versus t. The fit window drops the initial
/// transient (default 1 time unit) and truncates once the distance falls
/// below 1e-12 to stay clear of the floating-point floor.
pub fn contraction_rate(
    traj_a: &Trajectory,
    traj_b: &Trajectory,
    metric: &Matrix,
    transient: f64,
) -> Result<RateFit> {
    if traj_a.times.len() != traj_b.times.len()
        || traj_a
            .times
            .iter()
            .zip(&traj_b.times)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(DynamicsError::NotComparable("different time grids".into()));
    }
    if traj_a.dim() != traj_b.dim() || metric.nrows() != traj_a.dim() {
        return Err(DynamicsError::NotComparable("dimension mismatch".into()));
    }
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for ((t, xa), xb) in traj_a.times.iter().zip(&traj_a.states).zip(&traj_b.states) {
        let delta = xa - xb;
        let d2 = (metric * &delta).dot(&delta).max(1e-300);
        let d = d2.sqrt();
        if *t < transient {
            continue;
        }
        if d < 1e-12 {
            break;
        }
        ts.push(*t);
        logs.push(d.ln());
    }
    if ts.len() < 2 {
        return Err(DynamicsError::NotComparable(
            "fewer than 2 samples in the fit window".into(),
        ));
    }
    let n = ts.len() as f64;
    let mean_t = ts.iter().sum::<f64>() / n;
    let mean_y = logs.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (t, y) in ts.iter().zip(&logs) {
        sxx += (t - mean_t) * (t - mean_t);
        sxy += (t - mean_t) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit {
        rate: -slope,
        r2,
        window: ts.len(),
    })
}

#[derive(Debug, Clone)]
pub struct MonitorReport {
    /// Fraction of (t, i) samples where Ḋ_ii − (c/g)·D_ii ≤ −β·D_ii held.
    pub fraction_ok: f64,
    /// Worst value of Ḋ_ii − (c/g)·D_ii + β·D_ii (≤ 0 means the condition held).
    pub worst_violation: f64,
    pub checked: usize,
}

/// Runtime monitor for the slowly-varying-slope contraction condition.
///
/// Requires the static part first: (gW−I)P + P(gWᵀ−I) ⪯ −cP for the given
/// positive diagonal P (refuses to run otherwise). Along the trajectory it
/// finite-differences D(t) = φ′(x(t)) and reports how often
/// Ḋ − cg⁻¹D ⪯ −βD holds entrywise. Use a differentiable activation (tanh);
/// ReLU slopes jump and their derivative is meaningless here.
pub fn monitor_theorem6(
    w: &Matrix,
    traj: &Trajectory,
    activation: Activation,
    p: &Diagonal,
    c: f64,
    g: f64,
    beta: f64,
) -> Result<MonitorReport> {
    let n = w.nrows();
    if w.ncols() != n || traj.dim() != n || p.len() != n {
        return Err(DynamicsError::Dimension(
            "W, trajectory, and P must share the same dimension".into(),
        ));
    }
    if !(c > 0.0 && beta > 0.0 && g > 0.0) {
        return Err(DynamicsError::Input("c, g, beta must be > 0".into()));
    }
    if !p.is_positive() {
        return Err(DynamicsError::Input("P must be positive diagonal".into()));
    }
    let pd = p.to_dense();
    let gw_minus_i = w * g - Matrix::identity(n, n);
    let static_part = &gw_minus_i * &pd + &pd * gw_minus_i.transpose() + &pd * c;
    let lam = max_eig_sym(&sym_part(&static_part)?)?;
    if lam > 1e-10 * (1.0 + c) {
        return Err(DynamicsError::MonitorRefused(format!(
            "(gW−I)P + P(gWᵀ−I) + cP has λmax {lam:+.3e} > 0; P does not witness rate c"
        )));
    }
    if traj.times.len() < 3 {
        return Err(DynamicsError::Input("trajectory too short to differentiate".into()));
    }
    let slopes: Vec<Vector> = traj
        .states
        .iter()
        .map(|x| Vector::from_iterator(n, x.iter().map(|&v| activation.deriv(v))))
        .collect();
    let steps = traj.times.len();
    let mut checked = 0usize;
    let mut ok = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for t in 0..steps {
        // central differences inside, one-sided at the ends
        let (lo, hi) = if t == 0 {
            (0, 1)
        } else if t == steps - 1 {
            (steps - 2, steps - 1)
        } else {
            (t - 1, t + 1)
        };
        let span = traj.times[hi] - traj.times[lo];
        if span <= 0.0 {
            return Err(DynamicsError::Input("times must be strictly increasing".into()));
        }
        for i in 0..n {
            let ddot = (slopes[hi][i] - slopes[lo][i]) / span;
            let d = slopes[t][i];
            let value = ddot - (c / g) * d + beta * d;
            checked += 1;
            if value <= 1e-12 {
                ok += 1;
            }
            worst = worst.max(value);
        }
    }
    Ok(MonitorReport {
        fraction_ok: ok as f64 / checked as f64,
        worst_violation: worst,
        checked,
    })
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub steps: usize,
}

/// Affine equivalence of the two RNN forms: integrating
/// ẏ = −y + φ(Wy + b(t)) and ẋ = −x + Wφ(x) + v(t) with v = b + ḃ and
/// x(0) = W·y(0) + b(0) must keep x(t) = W·y(t) + b(t) up to integration
/// error. ḃ is finite-differenced from the sampled b sequence.
pub fn y_form_equivalence(
    w: &Matrix,
    b_seq: &InputSequence,
    y0: &Vector,
    activation: Activation,
    method: Method,
) -> Result<EquivalenceReport> {
    let n = w.nrows();
    if w.ncols() != n || b_seq.dim() != n || y0.len() != n {
        return Err(DynamicsError::Dimension(
            "W, b(t), and y0 must share one dimension".into(),
        ));
    }
    let steps = b_seq.steps();
    if steps < 2 {
        return Err(DynamicsError::Input("need at least 2 input steps".into()));
    }
    let dt = b_seq.dt;
    let b_at = |t: usize| b_seq.step_value(t);
    let bdot_at = |t: usize| -> Vector {
        let (lo, hi, span) = if t == 0 {
            (0, 1, dt)
        } else if t >= steps - 1 {
            (steps - 2, steps - 1, dt)
        } else {
            (t - 1, t + 1, 2.0 * dt)
        };
        (b_at(hi) - b_at(lo)) / span
    };

    let y_rhs = |y: &Vector, t: usize| -> Vector {
        let arg = w * y + b_at(t);
        Vector::from_iterator(n, arg.iter().map(|&v| activation.apply(v))) - y
    };
    let x_rhs = |x: &Vector, t: usize| -> Vector {
        let phi = Vector::from_iterator(n, x.iter().map(|&v| activation.apply(v)));
        w * phi - x + b_at(t) + bdot_at(t)
    };

    let advance = |f: &dyn Fn(&Vector, usize) -> Vector, s: &Vector, t: usize| -> Vector {
        match method {
            Method::Euler => s + f(s, t) * dt,
            Method::Rk4 => {
                let k1 = f(s, t);
                let k2 = f(&(s + &k1 * (dt / 2.0)), t);
                let k3 = f(&(s + &k2 * (dt / 2.0)), t);
                let k4 = f(&(s + &k3 * dt), t);
                s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
            }
        }
    };

    let mut y = y0.clone();
    let mut x = w * y0 + b_at(0);
    let mut max_dev: f64 = (&x - (w * &y + b_at(0))).norm();
    for t in 0..steps - 1 {
        y = advance(&|s, tt| y_rhs(s, tt), &y, t);
        x = advance(&|s, tt| x_rhs(s, tt), &x, t);
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(DynamicsError::Diverged(t as f64 * dt));
        }
        let dev = (&x - (w * &y + b_at(t + 1))).norm();
        max_dev = max_dev.max(dev);
    }
    Ok(EquivalenceReport {
        max_deviation: max_dev,
        steps,
    })
}
