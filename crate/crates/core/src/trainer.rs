//! Full-batch gradient flow `θ̇ = −η ∇L` with trajectory logging.
//!
//! The loss is `|f − y|² / 2P`, so in function space the residual obeys
//! `ḟ = −(η/P) K (f − y)`. Step sizes are capped three ways: the configured
//! `dt`, `kernel_step_factor / λ_max((η/P)K)` for stability of the linearised
//! dynamics, and a bound on the relative parameter change per step, which is
//! what keeps RK4 accurate through the fast sigmoidal phase.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dims, invalid, Error, Result};
use crate::io::{Cell, Table};
use crate::kernel::{alignment, analytic_linear_ntk, empirical_ntk, vectorize, KernelSnapshot};
use crate::linalg;
use crate::network::LayerStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub eta: f64,
    /// Largest step; with `adaptive = false` every step has this size.
    pub dt: f64,
    pub max_time: f64,
    pub integrator: Integrator,
    /// Record times. Empty means log-spaced, 50 per decade, from
    /// `max(dt, 1e-4·max_time)` to `max_time`.
    #[serde(default)]
    pub snapshot_schedule: Vec<f64>,
    /// Stop once the loss falls to this value; 0 disables.
    #[serde(default)]
    pub stop_loss: f64,
    #[serde(default = "default_true")]
    pub adaptive: bool,
    #[serde(default = "default_kernel_step_factor")]
    pub kernel_step_factor: f64,
    #[serde(default = "default_max_relative_change")]
    pub max_relative_change: f64,
    #[serde(default = "default_true")]
    pub keep_snapshots: bool,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_true() -> bool {
    true
}
fn default_kernel_step_factor() -> f64 {
    0.1
}
fn default_max_relative_change() -> f64 {
    0.02
}
fn default_max_steps() -> usize {
    20_000_000
}

impl FlowConfig {
    pub fn new(eta: f64, dt: f64, max_time: f64, integrator: Integrator) -> Self {
        Self {
            eta,
            dt,
            max_time,
            integrator,
            snapshot_schedule: Vec::new(),
            stop_loss: 0.0,
            adaptive: true,
            kernel_step_factor: default_kernel_step_factor(),
            max_relative_change: default_max_relative_change(),
            keep_snapshots: true,
            max_steps: default_max_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return invalid("dt must be positive");
        }
        if !(self.max_time >= self.dt) || !self.max_time.is_finite() {
            return invalid("max_time must be at least dt");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return invalid("eta must be positive");
        }
        if self.stop_loss < 0.0 {
            return invalid("stop_loss must be non-negative");
        }
        if !(self.kernel_step_factor > 0.0) || !(self.max_relative_change > 0.0) {
            return invalid("step-size factors must be positive");
        }
        if self.snapshot_schedule.iter().any(|&t| !(t > 0.0) || t > self.max_time) {
            return invalid("snapshot times must lie in (0, max_time]");
        }
        Ok(())
    }

    /// Sorted, deduplicated record times excluding `t = 0` (always recorded).
    pub fn schedule(&self) -> Vec<f64> {
        let mut s = if self.snapshot_schedule.is_empty() {
            let lo = self.dt.max(1e-4 * self.max_time).min(self.max_time);
            linalg::log_grid(lo, self.max_time, 50)
        } else {
            self.snapshot_schedule.clone()
        };
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }
}

/// Extra inputs that only affect what gets recorded.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    /// Test inputs for the kernel's cross rows.
    pub x_test: Option<DMatrix<f64>>,
    /// Teacher rows (`C × D`); enables the first-layer alignment series
    /// `cos(W¹ᵀW¹, βᵀβ)`.
    pub teacher: Option<DMatrix<f64>>,
    /// Store the network at every record time.
    pub keep_nets: bool,
}

#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
    /// NaN where the alignment is undefined.
    pub alignment: Vec<f64>,
    pub kernel_fro_norm: Vec<f64>,
    pub conservation_residual: Vec<f64>,
    pub u2: Vec<f64>,
    pub w1_alignment: Option<Vec<f64>>,
    pub snapshots: Vec<KernelSnapshot>,
    pub nets: Vec<LayerStack>,
    pub initial_net: LayerStack,
    pub final_net: LayerStack,
    pub config: FlowConfig,
    pub steps: usize,
    pub monotonicity_violations: usize,
    pub max_conservation_residual: f64,
    /// Stopped by `max_steps` before reaching `max_time` or `stop_loss`.
    pub truncated: bool,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_table(&self) -> Table {
        let mut header = vec!["t", "loss", "alignment", "kernel_fro", "conservation", "u2"];
        if self.w1_alignment.is_some() {
            header.push("w1_align");
        }
        let mut table = Table::new(&header);
        for i in 0..self.times.len() {
            let mut row: Vec<Cell> = vec![
                self.times[i].into(),
                self.loss[i].into(),
                self.alignment[i].into(),
                self.kernel_fro_norm[i].into(),
                self.conservation_residual[i].into(),
                self.u2[i].into(),
            ];
            if let Some(w) = &self.w1_alignment {
                row.push(w[i].into());
            }
            table.push(row);
        }
        table
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }
}

/// Gradient and kernel-vector products for one parameter vector.
trait Flow {
    fn loss_grad(&mut self, theta: &[f64]) -> (f64, Vec<f64>);
    /// `J Jᵀ v` for an output-space matrix `v` (`C × P`).
    fn kernel_apply(&mut self, theta: &[f64], v: &DMatrix<f64>) -> DMatrix<f64>;
}

struct GenericFlow<'a> {
    net: LayerStack,
    x: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
}

impl Flow for GenericFlow<'_> {
    fn loss_grad(&mut self, theta: &[f64]) -> (f64, Vec<f64>) {
        self.net.set_params(theta);
        let (loss, g) = self.net.loss_and_grad(self.x, self.y);
        (loss, LayerStack::flatten(&g))
    }

    fn kernel_apply(&mut self, theta: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
        self.net.set_params(theta);
        let tr = self.net.trace(self.x);
        let w = self.net.vjp(&tr, v);
        self.net.jvp(&tr, &w)
    }
}

/// Linear networks: everything goes through the end-to-end map
/// `Ŵ = B_ℓ W_ℓ A_ℓ`, so no per-sample activations are formed.
struct LinearFlow<'a> {
    net: LayerStack,
    x: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
}

impl LinearFlow<'_> {
    /// `above[ℓ] = W_{L−1} ⋯ W_{ℓ+1}` (identity for the last layer).
    fn above(ws: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let l = ws.len();
        let c = ws[l - 1].nrows();
        let mut above = vec![DMatrix::zeros(0, 0); l];
        above[l - 1] = DMatrix::identity(c, c);
        for i in (0..l - 1).rev() {
            above[i] = &above[i + 1] * &ws[i + 1];
        }
        above
    }

    /// Parameter cotangent of the linear functional `Ŵ ↦ ⟨g, Ŵ⟩`.
    fn pullback(ws: &[DMatrix<f64>], above: &[DMatrix<f64>], g: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut v = g;
        let mut out = Vec::with_capacity(ws.len());
        for (i, w) in ws.iter().enumerate() {
            out.push(above[i].transpose() * &v);
            if i + 1 < ws.len() {
                v = v * w.transpose();
            }
        }
        out
    }

    /// Tangent of `Ŵ` along parameter direction `dw`.
    fn push(ws: &[DMatrix<f64>], above: &[DMatrix<f64>], dw: &[DMatrix<f64>]) -> DMatrix<f64> {
        let l = ws.len();
        let mut s = dw[l - 1].clone();
        for i in (0..l - 1).rev() {
            s = &above[i] * &dw[i] + s * &ws[i];
        }
        s
    }
}

impl Flow for LinearFlow<'_> {
    fn loss_grad(&mut self, theta: &[f64]) -> (f64, Vec<f64>) {
        let ws = self.net.unflatten(theta);
        let above = Self::above(&ws);
        let w_hat = &above[0] * &ws[0];
        let p = self.x.ncols() as f64;
        let r = &w_hat * self.x - self.y;
        let loss = r.norm_squared() / (2.0 * p);
        let g = (&r * self.x.transpose()) / p;
        (loss, LayerStack::flatten(&Self::pullback(&ws, &above, g)))
    }

    fn kernel_apply(&mut self, theta: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
        let ws = self.net.unflatten(theta);
        let above = Self::above(&ws);
        let dw = Self::pullback(&ws, &above, v * self.x.transpose());
        Self::push(&ws, &above, &dw) * self.x
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frobenius cosine between `W¹ᵀW¹` and `βᵀβ`.
pub fn first_layer_alignment(net: &LayerStack, teacher: &DMatrix<f64>) -> f64 {
    let w = &net.weights[0];
    let m = w.transpose() * w;
    let b = teacher.transpose() * teacher;
    linalg::cosine(m.as_slice(), b.as_slice())
}

/// Largest change of the layer-balance quantities `W_ℓW_ℓᵀ − W_{ℓ+1}ᵀW_{ℓ+1}`
/// since `net0`, relative to `‖W_ℓ‖² + ‖W_{ℓ+1}‖²` at the current state.
pub fn conservation_residual(net: &LayerStack, net0: &LayerStack) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..net.depth().saturating_sub(1) {
        let (a, b) = (&net.weights[i], &net.weights[i + 1]);
        let (a0, b0) = (&net0.weights[i], &net0.weights[i + 1]);
        let now = a * a.transpose() - b.transpose() * b;
        let then = a0 * a0.transpose() - b0.transpose() * b0;
        let scale = a.norm_squared() + b.norm_squared();
        if scale > 0.0 {
            worst = worst.max((now - then).norm() / scale);
        }
    }
    worst
}

/// Integrate the flow from `net`, recording at `t = 0` and every schedule time.
pub fn train(net: &LayerStack, x: &DMatrix<f64>, y: &DMatrix<f64>, config: &FlowConfig) -> Result<TrajectoryLog> {
    train_with(net, x, y, config, &Probe::default())
}

pub fn train_with(
    net: &LayerStack,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &FlowConfig,
    probe: &Probe,
) -> Result<TrajectoryLog> {
    config.validate()?;
    if x.nrows() != net.input_dim() {
        return dims(format!("inputs have {} rows, network expects {}", x.nrows(), net.input_dim()));
    }
    if y.nrows() != net.outputs() || y.ncols() != x.ncols() {
        return dims(format!(
            "targets are {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            net.outputs(),
            x.ncols()
        ));
    }
    if let Some(xt) = &probe.x_test {
        if xt.nrows() != net.input_dim() {
            return dims("test inputs do not match the network input dimension");
        }
    }
    if let Some(t) = &probe.teacher {
        if t.ncols() != net.input_dim() {
            return dims("teacher does not match the network input dimension");
        }
    }

    let mut flow: Box<dyn Flow + '_> = if net.is_linear() {
        Box::new(LinearFlow { net: net.clone(), x, y })
    } else {
        Box::new(GenericFlow { net: net.clone(), x, y })
    };
    let eta = config.eta;
    let p = x.ncols() as f64;
    let y_vec = vectorize(y);
    let linear = net.is_linear();

    let mut log = TrajectoryLog {
        times: Vec::new(),
        loss: Vec::new(),
        alignment: Vec::new(),
        kernel_fro_norm: Vec::new(),
        conservation_residual: Vec::new(),
        u2: Vec::new(),
        w1_alignment: probe.teacher.as_ref().map(|_| Vec::new()),
        snapshots: Vec::new(),
        nets: Vec::new(),
        initial_net: net.clone(),
        final_net: net.clone(),
        config: config.clone(),
        steps: 0,
        monotonicity_violations: 0,
        max_conservation_residual: 0.0,
        truncated: false,
    };
    let mut scratch = net.clone();
    let mut record = |log: &mut TrajectoryLog, t: f64, loss: f64, theta: &[f64]| {
        scratch.set_params(theta);
        let mut snap = if linear {
            analytic_linear_ntk(&scratch)
                .expect("linear network")
                .snapshot(x, probe.x_test.as_ref())
        } else {
            empirical_ntk(&scratch, x, probe.x_test.as_ref())
        };
        snap.time = t;
        log.times.push(t);
        log.loss.push(loss);
        log.alignment.push(alignment(&snap.gram, &y_vec).unwrap_or(f64::NAN));
        log.kernel_fro_norm.push(snap.gram.norm());
        let cons = if linear {
            conservation_residual(&scratch, net)
        } else {
            f64::NAN
        };
        if cons.is_finite() {
            log.max_conservation_residual = log.max_conservation_residual.max(cons);
        }
        log.conservation_residual.push(cons);
        log.u2.push(scratch.weights[scratch.depth() - 1].norm_squared());
        if let (Some(series), Some(teacher)) = (log.w1_alignment.as_mut(), probe.teacher.as_ref()) {
            series.push(first_layer_alignment(&scratch, teacher));
        }
        if config.keep_snapshots {
            log.snapshots.push(snap);
        }
        if probe.keep_nets {
            log.nets.push(scratch.clone());
        }
        log.final_net = scratch.clone();
    };

    let mut theta = net.params();
    let (mut loss, mut grad) = flow.loss_grad(&theta);
    let l0 = loss;
    record(&mut log, 0.0, loss, &theta);
    if config.stop_loss > 0.0 && loss <= config.stop_loss {
        return Ok(log);
    }

    // Warm-started power iteration for λ_max of (η/P)·K.
    let mut pv = if y.norm() > 0.0 {
        y.clone()
    } else {
        DMatrix::from_element(y.nrows(), y.ncols(), 1.0)
    };
    pv /= pv.norm();
    let mut lam = 0.0;
    let power_step = |flow: &mut Box<dyn Flow + '_>, theta: &[f64], pv: &mut DMatrix<f64>| -> f64 {
        let w = flow.kernel_apply(theta, pv) * (eta / p);
        let n = w.norm();
        if n > 0.0 {
            *pv = w / n;
        }
        n
    };
    for _ in 0..30 {
        lam = power_step(&mut flow, &theta, &mut pv);
    }

    let schedule = config.schedule();
    let mut next = 0;
    let mut t = 0.0;
    while next < schedule.len() {
        let speed = eta * norm(&grad);
        if speed == 0.0 {
            // Fixed point: the state is final.
            while next < schedule.len() {
                record(&mut log, schedule[next], loss, &theta);
                next += 1;
            }
            break;
        }
        if log.steps >= config.max_steps {
            log.truncated = true;
            break;
        }
        let mut h = config.dt;
        if config.adaptive {
            lam = lam.max(0.0).max(power_step(&mut flow, &theta, &mut pv));
            if lam > 0.0 {
                h = h.min(config.kernel_step_factor / lam);
            }
            let scale = norm(&theta).max(f64::MIN_POSITIVE);
            h = h.min(config.max_relative_change * scale / speed);
            // The warm estimate is refreshed every step; let it decay slowly so
            // a transient overshoot does not pin the step size.
            lam *= 0.5;
        }
        let target = schedule[next];
        let hit = t + h >= target * (1.0 - 1e-12);
        if hit {
            h = target - t;
        }

        let new_theta = match config.integrator {
            Integrator::Euler => theta.iter().zip(&grad).map(|(a, g)| a - h * eta * g).collect::<Vec<f64>>(),
            Integrator::Rk4 => {
                let k1: Vec<f64> = grad.iter().map(|g| -eta * g).collect();
                let shifted = |k: &[f64], c: f64| -> Vec<f64> { theta.iter().zip(k).map(|(a, b)| a + c * b).collect() };
                let k2: Vec<f64> = flow.loss_grad(&shifted(&k1, 0.5 * h)).1.iter().map(|g| -eta * g).collect();
                let k3: Vec<f64> = flow.loss_grad(&shifted(&k2, 0.5 * h)).1.iter().map(|g| -eta * g).collect();
                let k4: Vec<f64> = flow.loss_grad(&shifted(&k3, h)).1.iter().map(|g| -eta * g).collect();
                (0..theta.len())
                    .map(|i| theta[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
        };
        theta = new_theta;
        let (new_loss, new_grad) = flow.loss_grad(&theta);
        log.steps += 1;
        t = if hit { target } else { t + h };
        if !new_loss.is_finite() || new_loss > 1e6 * l0.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged {
                time: t,
                loss: new_loss,
                log: Box::new(log),
            });
        }
        if new_loss - loss > 1e-12 * l0 {
            log.monotonicity_violations += 1;
        }
        loss = new_loss;
        grad = new_grad;
        let stop = config.stop_loss > 0.0 && loss <= config.stop_loss;
        if hit {
            record(&mut log, t, loss, &theta);
            next += 1;
        } else if stop {
            record(&mut log, t, loss, &theta);
        }
        if stop {
            break;
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseMarkers {
    pub t_half_loss: Option<f64>,
    pub t_align_half: Option<f64>,
    pub final_alignment: Option<f64>,
    /// Half-rise time of the first-layer alignment series, when recorded.
    pub t_w1_align_half: Option<f64>,
}

/// First time `values` falls to `level` or below, linearly interpolated.
pub fn first_crossing_down(times: &[f64], values: &[f64], level: f64) -> Option<f64> {
    crossing(times, values, |v| v <= level, level)
}

/// First time `values` rises to `level` or above, linearly interpolated.
pub fn first_crossing_up(times: &[f64], values: &[f64], level: f64) -> Option<f64> {
    crossing(times, values, |v| v >= level, level)
}

fn crossing(times: &[f64], values: &[f64], reached: impl Fn(f64) -> bool, level: f64) -> Option<f64> {
    let i = values.iter().position(|&v| v.is_finite() && reached(v))?;
    if i == 0 {
        return Some(times[0]);
    }
    let (t0, t1, v0, v1) = (times[i - 1], times[i], values[i - 1], values[i]);
    if !v0.is_finite() || v1 == v0 {
        return Some(t1);
    }
    Some(t0 + (level - v0) / (v1 - v0) * (t1 - t0))
}

fn half_rise(times: &[f64], series: &[f64]) -> (Option<f64>, Option<f64>) {
    let last = series.iter().rev().find(|v| v.is_finite()).copied();
    let t = last.and_then(|f| first_crossing_up(times, series, f / 2.0));
    (t, last)
}

pub fn phase_markers(log: &TrajectoryLog) -> Result<PhaseMarkers> {
    if log.is_empty() {
        return invalid("empty trajectory log");
    }
    let t_half_loss = first_crossing_down(&log.times, &log.loss, log.loss[0] / 2.0);
    let (t_align_half, final_alignment) = half_rise(&log.times, &log.alignment);
    let t_w1_align_half = log.w1_alignment.as_ref().and_then(|w| half_rise(&log.times, w).0);
    Ok(PhaseMarkers {
        t_half_loss,
        t_align_half,
        final_alignment,
        t_w1_align_half,
    })
}

/// `(|d/dt ∇f(x)| / |∇f(x)|) · (L / |dL/dt|)` at the current parameters, with
/// the time derivative of the probe gradient taken along the flow by an exact
/// Hessian-vector product.
pub fn laziness_ratio(net: &LayerStack, x: &DMatrix<f64>, y: &DMatrix<f64>, probe: &DVector<f64>, eta: f64) -> Result<f64> {
    if probe.len() != net.input_dim() {
        return dims("probe point does not match the network input dimension");
    }
    let (loss, grad) = net.loss_and_grad(x, y);
    let velocity: Vec<DMatrix<f64>> = grad.iter().map(|g| g * -eta).collect();
    let grad_sq: f64 = grad.iter().map(|g| g.norm_squared()).sum();
    let loss_rate = eta * grad_sq;

    let pm = DMatrix::from_column_slice(probe.len(), 1, probe.as_slice());
    let tr = net.trace(&pm);
    let mut e = DMatrix::zeros(net.outputs(), 1);
    e[(0, 0)] = 1.0;
    let probe_grad: f64 = net.vjp(&tr, &e).iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if probe_grad == 0.0 || loss_rate == 0.0 {
        return Err(Error::Numerical("degenerate network: zero gradient".into()));
    }
    let hv: f64 = net
        .hvp(probe, 0, &velocity)
        .iter()
        .map(|g| g.norm_squared())
        .sum::<f64>()
        .sqrt();
    Ok(hv / probe_grad * loss / loss_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_gaussian, whiten_unit};
    use crate::network::Activation;

    fn whitened_teacher(d: usize, p: usize, s: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = whiten_unit(&generate_gaussian(d, p, &DMatrix::identity(d, d), seed).unwrap()).unwrap();
        let mut beta = DMatrix::zeros(1, d);
        beta[(0, 0)] = 1.0;
        let y = beta * &x * s;
        (x, y)
    }

    #[test]
    fn scalar_flow_matches_exponential() {
        // ẇ = η Σ (s − w) with Σ = mean x².
        let x = DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 1.5]);
        let sigma = x.norm_squared() / 4.0;
        let s = 0.7;
        let y = &x * s;
        let net = LayerStack::from_weights(vec![DMatrix::from_element(1, 1, 0.1)], Activation::Linear, 0.0, 0).unwrap();
        let mut errs = Vec::new();
        for dt in [1e-2, 5e-3] {
            let mut cfg = FlowConfig::new(1.0, dt, 1.0, Integrator::Euler);
            cfg.adaptive = false;
            cfg.snapshot_schedule = vec![1.0];
            let log = train(&net, &x, &y, &cfg).unwrap();
            let w = log.final_net.weights[0][(0, 0)];
            let exact = s + (0.1 - s) * (-sigma).exp();
            errs.push((w - exact).abs());
        }
        assert!(errs[0] < 1e-2);
        let ratio = errs[0] / errs[1];
        assert!((ratio - 2.0).abs() < 0.1, "Euler error ratio {ratio}");
    }

    #[test]
    fn zero_residual_is_a_fixed_point() {
        let net = LayerStack::init(&[3, 4, 1], 0.5, Activation::Tanh, 2).unwrap();
        let x = generate_gaussian(3, 6, &DMatrix::identity(3, 3), 1).unwrap();
        let y = net.forward(&x);
        let log = train(&net, &x, &y, &FlowConfig::new(1.0, 0.1, 10.0, Integrator::Rk4)).unwrap();
        assert!(log.loss.iter().all(|&l| l == 0.0));
        assert_eq!(log.final_net, net);
        assert_eq!(log.steps, 0);
    }

    #[test]
    fn linear_fast_path_matches_backprop() {
        let net = LayerStack::init(&[5, 4, 3, 2], 0.7, Activation::Linear, 3).unwrap();
        let x = generate_gaussian(5, 7, &DMatrix::identity(5, 5), 2).unwrap();
        let y = generate_gaussian(2, 7, &DMatrix::identity(2, 2), 4).unwrap();
        let theta = net.params();
        let mut fast = LinearFlow { net: net.clone(), x: &x, y: &y };
        let mut slow = GenericFlow { net: net.clone(), x: &x, y: &y };
        let (l1, g1) = fast.loss_grad(&theta);
        let (l2, g2) = slow.loss_grad(&theta);
        assert!((l1 - l2).abs() < 1e-12 * l2);
        let gd: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gd < 1e-12 * norm(&g2));
        let v = generate_gaussian(2, 7, &DMatrix::identity(2, 2), 5).unwrap();
        let a = fast.kernel_apply(&theta, &v);
        let b = slow.kernel_apply(&theta, &v);
        assert!((a - &b).amax() < 1e-10 * b.amax());
    }

    #[test]
    fn rk4_conserves_balance_and_euler_does_not() {
        let (x, y) = whitened_teacher(6, 20, 1.0, 7);
        let net = LayerStack::init(&[6, 8, 8, 1], 0.3, Activation::Linear, 5).unwrap();
        let mut rk = FlowConfig::new(1.0, 1e-3, 100.0, Integrator::Rk4);
        rk.adaptive = false;
        rk.snapshot_schedule = vec![1.0, 10.0, 50.0, 100.0];
        let log_rk = train(&net, &x, &y, &rk).unwrap();
        assert_eq!(log_rk.steps, 100_000);
        assert!(log_rk.max_conservation_residual < 1e-6, "{}", log_rk.max_conservation_residual);
        assert_eq!(log_rk.monotonicity_violations, 0);

        let mut eu = rk.clone();
        eu.integrator = Integrator::Euler;
        eu.dt = 1e-2;
        let log_eu = train(&net, &x, &y, &eu).unwrap();
        assert!(log_eu.max_conservation_residual >= 10.0 * log_rk.max_conservation_residual);
    }

    #[test]
    fn integrator_orders() {
        let (x, y) = whitened_teacher(4, 10, 1.0, 3);
        let net = LayerStack::init(&[4, 5, 1], 0.5, Activation::Linear, 8).unwrap();
        let end = |integ: Integrator, dt: f64| {
            let mut c = FlowConfig::new(1.0, dt, 2.0, integ);
            c.adaptive = false;
            c.snapshot_schedule = vec![2.0];
            train(&net, &x, &y, &c).unwrap().final_net.params()
        };
        let reference = end(Integrator::Rk4, 1e-3);
        let err = |v: Vec<f64>| norm(&v.iter().zip(&reference).map(|(a, b)| a - b).collect::<Vec<_>>());
        let r = err(end(Integrator::Rk4, 0.1)) / err(end(Integrator::Rk4, 0.05));
        assert!((r - 16.0).abs() < 2.0, "RK4 ratio {r}");
        let e = err(end(Integrator::Euler, 0.01)) / err(end(Integrator::Euler, 0.005));
        assert!((e - 2.0).abs() < 0.15, "Euler ratio {e}");
    }

    #[test]
    fn adaptive_rk4_loss_is_monotone_and_records_schedule() {
        let (x, y) = whitened_teacher(8, 30, 1.0, 9);
        let net = LayerStack::init(&[8, 10, 1], 1e-3, Activation::Linear, 1).unwrap();
        let cfg = FlowConfig::new(1.0, 0.5, 40.0, Integrator::Rk4);
        let log = train(&net, &x, &y, &cfg).unwrap();
        assert_eq!(log.times.len(), cfg.schedule().len() + 1);
        assert_eq!(log.monotonicity_violations, 0);
        assert!(log.loss.last().unwrap() < &1e-6);
        let m = phase_markers(&log).unwrap();
        assert!(m.t_half_loss.unwrap() > 0.0);
    }

    #[test]
    fn divergence_aborts_with_partial_log() {
        let (x, y) = whitened_teacher(3, 5, 1.0, 2);
        let net = LayerStack::init(&[3, 1], 1.0, Activation::Linear, 0).unwrap();
        let mut cfg = FlowConfig::new(1.0, 10.0, 1000.0, Integrator::Euler);
        cfg.adaptive = false;
        match train(&net, &x, &y, &cfg) {
            Err(Error::Diverged { log, .. }) => assert!(!log.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|l| l.steps)),
        }
    }

    #[test]
    fn stop_loss_terminates_early() {
        let (x, y) = whitened_teacher(4, 10, 1.0, 2);
        let net = LayerStack::init(&[4, 1], 0.1, Activation::Linear, 0).unwrap();
        let mut cfg = FlowConfig::new(1.0, 0.01, 1000.0, Integrator::Rk4);
        cfg.stop_loss = 1e-3;
        let log = train(&net, &x, &y, &cfg).unwrap();
        assert!(*log.loss.last().unwrap() <= 1e-3);
        assert!(*log.times.last().unwrap() < 100.0);
    }

    fn log_from(times: &[f64], loss: &[f64], align: &[f64]) -> TrajectoryLog {
        let net = LayerStack::init(&[1, 1], 1.0, Activation::Linear, 0).unwrap();
        let n = times.len();
        TrajectoryLog {
            times: times.to_vec(),
            loss: loss.to_vec(),
            alignment: align.to_vec(),
            kernel_fro_norm: vec![0.0; n],
            conservation_residual: vec![0.0; n],
            u2: vec![0.0; n],
            w1_alignment: None,
            snapshots: Vec::new(),
            nets: Vec::new(),
            initial_net: net.clone(),
            final_net: net,
            config: FlowConfig::new(1.0, 1.0, 2.0, Integrator::Euler),
            steps: 0,
            monotonicity_violations: 0,
            max_conservation_residual: 0.0,
            truncated: false,
        }
    }

    #[test]
    fn marker_interpolation() {
        let log = log_from(&[0.0, 1.0, 2.0], &[1.0, 0.6, 0.4], &[0.0, 0.2, 0.8]);
        let m = phase_markers(&log).unwrap();
        assert!((m.t_half_loss.unwrap() - 1.5).abs() < 1e-14);
        assert_eq!(m.final_alignment, Some(0.8));
        // 0.4 between 0.2 (t=1) and 0.8 (t=2).
        assert!((m.t_align_half.unwrap() - 1.0 / 3.0 - 1.0).abs() < 1e-14);
        let flat = log_from(&[0.0, 1.0], &[1.0, 0.9], &[0.1, 0.1]);
        assert_eq!(phase_markers(&flat).unwrap().t_half_loss, None);
        let empty = log_from(&[], &[], &[]);
        assert!(phase_markers(&empty).is_err());
    }

    fn laziness_slope(depth: usize) -> f64 {
        let (x, y) = whitened_teacher(5, 12, 1.0, 4);
        let probe = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, 0.7]);
        let mut widths = vec![5];
        widths.extend(std::iter::repeat(6).take(depth - 1));
        widths.push(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for sigma in [1e-1, 3e-2, 1e-2, 3e-3, 1e-3] {
            let net = LayerStack::init(&widths, sigma, Activation::Linear, 2).unwrap();
            xs.push(sigma.ln());
            ys.push(laziness_ratio(&net, &x, &y, &probe, 1.0).unwrap().ln());
        }
        linalg::linear_fit(&xs, &ys).0
    }

    #[test]
    fn laziness_scales_as_inverse_power_of_init() {
        let s2 = laziness_slope(2);
        assert!((s2 + 2.0).abs() < 0.3, "depth 2 slope {s2}");
        let s3 = laziness_slope(3);
        assert!((s3 + 3.0).abs() < 0.45, "depth 3 slope {s3}");
    }

    #[test]
    fn lazy_network_has_order_one_ratio() {
        let (x, y) = whitened_teacher(5, 12, 1.0, 4);
        let net = LayerStack::init(&[5, 400, 1], 1.0, Activation::Linear, 2).unwrap();
        let r = laziness_ratio(&net, &x, &y, &x.column(0).into_owned(), 1.0).unwrap();
        assert!(r < 10.0, "ratio {r}");
        let zero = LayerStack::from_weights(vec![DMatrix::zeros(1, 5)], Activation::Linear, 0.0, 0).unwrap();
        let y0 = DMatrix::zeros(1, 12);
        assert!(laziness_ratio(&zero, &x, &y0, &x.column(0).into_owned(), 1.0).is_err());
    }

    #[test]
    fn csv_has_expected_columns() {
        let log = log_from(&[0.0, 1.0], &[1.0, 0.5], &[0.1, 0.2]);
        let csv = log.to_table().to_csv_string();
        assert!(csv.starts_with("t,loss,alignment,kernel_fro,conservation,u2\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
