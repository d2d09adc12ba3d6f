//! Neural tangent kernels, kernel regression and the time-varying-kernel
//! predictor.
//!
//! Multi-output kernels are stored as `CP × CP` matrices in class-major order:
//! row `c·P + μ` belongs to output `c` at sample `μ`. Targets are vectorised
//! the same way (see [`vectorize`]).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{dims, invalid, Error, Result};
use crate::io::{fmt_f64, write_json};
use crate::linalg;
use crate::network::LayerStack;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSnapshot {
    pub time: f64,
    pub gram: DMatrix<f64>,
    pub test_rows: Option<DMatrix<f64>>,
    pub classes: usize,
}

/// Class-major vectorisation of a `C × P` target matrix.
pub fn vectorize(y: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(y.len(), y.transpose().iter().copied())
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &DVector<f64>, classes: usize) -> DMatrix<f64> {
    let p = v.len() / classes;
    DMatrix::from_row_slice(classes, p, v.as_slice())
}

/// Gram of per-sample parameter gradients, assembled layer by layer as
/// `Σ_ℓ (δ_ℓᵀ δ_ℓ') ⊙ (h_ℓᵀ h_ℓ')` instead of materialising Jacobians.
pub fn empirical_ntk(net: &LayerStack, x: &DMatrix<f64>, x_test: Option<&DMatrix<f64>>) -> KernelSnapshot {
    let c_out = net.outputs();
    let tr = net.trace(x);
    let signals = class_signals(net, &tr, x.ncols());
    let p = x.ncols();
    let mut gram = DMatrix::zeros(c_out * p, c_out * p);
    for l in 0..net.depth() {
        let hh = tr.h[l].transpose() * &tr.h[l];
        for c in 0..c_out {
            for c2 in c..c_out {
                let dd = signals[c][l].transpose() * &signals[c2][l];
                let block = dd.component_mul(&hh);
                let mut view = gram.view_mut((c * p, c2 * p), (p, p));
                view += &block;
                if c2 != c {
                    let mut view_t = gram.view_mut((c2 * p, c * p), (p, p));
                    view_t += block.transpose();
                }
            }
        }
    }
    let gram = linalg::symmetrize(&gram);

    let test_rows = x_test.map(|xt| {
        let q = xt.ncols();
        let tt = net.trace(xt);
        let tsig = class_signals(net, &tt, q);
        let mut rows = DMatrix::zeros(c_out * q, c_out * p);
        for l in 0..net.depth() {
            let hh = tt.h[l].transpose() * &tr.h[l];
            for c in 0..c_out {
                for c2 in 0..c_out {
                    let dd = tsig[c][l].transpose() * &signals[c2][l];
                    let mut view = rows.view_mut((c * q, c2 * p), (q, p));
                    view += dd.component_mul(&hh);
                }
            }
        }
        rows
    });
    KernelSnapshot {
        time: 0.0,
        gram,
        test_rows,
        classes: c_out,
    }
}

fn class_signals(net: &LayerStack, tr: &crate::network::Trace, p: usize) -> Vec<Vec<DMatrix<f64>>> {
    (0..net.outputs())
        .map(|c| {
            let mut e = DMatrix::zeros(net.outputs(), p);
            e.row_mut(c).fill(1.0);
            net.backprop_signals(tr, &e)
        })
        .collect()
}

/// `yᵀKy / (‖K‖_F |y|²)`; `None` when either factor vanishes.
pub fn alignment(gram: &DMatrix<f64>, y: &DVector<f64>) -> Option<f64> {
    let kf = gram.norm();
    let y2 = y.norm_squared();
    if kf == 0.0 || y2 == 0.0 {
        return None;
    }
    Some((y.transpose() * gram * y)[(0, 0)] / (kf * y2))
}

#[derive(Clone, Debug)]
pub struct Regression {
    /// Predictions at the test rows (class-major, length `CQ`).
    pub predictions: DVector<f64>,
    /// Dual coefficients `(K + ridge·I)⁻¹ y`.
    pub coefficients: DVector<f64>,
    /// Diagonal jitter added because the system was numerically singular.
    pub jitter: Option<f64>,
}

/// `k_test (K + ridge·I)⁻¹ y` by Cholesky solve. At `ridge = 0` a Gram with
/// condition number above 1e14 receives jitter `1e-10·trace/n`, reported in
/// the result.
pub fn kernel_regression(
    gram: &DMatrix<f64>,
    test_rows: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge: f64,
) -> Result<Regression> {
    let n = gram.nrows();
    if gram.ncols() != n || y.len() != n || test_rows.ncols() != n {
        return dims(format!(
            "gram {}x{}, targets {}, test rows {}x{}",
            gram.nrows(),
            gram.ncols(),
            y.len(),
            test_rows.nrows(),
            test_rows.ncols()
        ));
    }
    if ridge < 0.0 {
        return invalid("ridge must be non-negative");
    }
    let base = linalg::symmetrize(gram);
    let jitter_size = 1e-10 * base.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut jitter = None;
    let mut a = &base + DMatrix::identity(n, n) * ridge;
    if ridge == 0.0 {
        let e = linalg::sym_eigen(&base);
        let lmax = e.values[0];
        let lmin = e.values[n - 1];
        if lmin <= lmax * 1e-14 {
            a += DMatrix::identity(n, n) * jitter_size;
            jitter = Some(jitter_size);
        }
    }
    let chol = match a.clone().cholesky() {
        Some(c) => c,
        None => {
            let j = jitter.unwrap_or(0.0) + jitter_size;
            jitter = Some(j);
            (&base + DMatrix::identity(n, n) * (ridge + j))
                .cholesky()
                .ok_or_else(|| Error::Numerical("kernel matrix is not positive definite".into()))?
        }
    };
    let coefficients = chol.solve(y);
    Ok(Regression {
        predictions: test_rows * &coefficients,
        coefficients,
        jitter,
    })
}

/// Product-integral state for `Δ̇ = −rate·K_t Δ`: `Φ` with `Δ_t = Φ_t Δ_0`, and
/// the accumulated test-point integral `∫ rate·k_t(x) Φ_t Δ_0 dt`.
#[derive(Clone, Debug)]
pub struct TransitionState {
    pub phi: DMatrix<f64>,
    pub accumulated_pred: DVector<f64>,
    pub last_time: f64,
    /// Eigenvalues below `−tolerance` that had to be clamped to zero.
    pub clamped: usize,
}

impl TransitionState {
    pub fn new(n_train: usize, n_test: usize) -> Self {
        Self {
            phi: DMatrix::identity(n_train, n_train),
            accumulated_pred: DVector::zeros(n_test),
            last_time: 0.0,
            clamped: 0,
        }
    }
}

fn clamp_spectrum(gram: &DMatrix<f64>) -> (linalg::SymEigen, usize) {
    let mut e = linalg::sym_eigen(gram);
    let n = e.values.len().max(1) as f64;
    let tol = 1e-8 * e.values.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mut clamped = 0;
    for v in e.values.iter_mut() {
        if *v < 0.0 {
            if *v < -tol {
                clamped += 1;
            }
            *v = 0.0;
        }
    }
    (e, clamped)
}

/// Advance by `dt` with the kernel held constant at (`gram`, `test_rows`).
///
/// `Φ ← exp(−rate·dt·K) Φ`; the test-point integral over the interval is
/// integrated exactly for the frozen kernel, so a run whose kernel only
/// changes in scale telescopes without discretisation error.
pub fn evolve_transition(
    state: &mut TransitionState,
    gram: &DMatrix<f64>,
    test_rows: &DMatrix<f64>,
    dt: f64,
    rate: f64,
    residual0: &DVector<f64>,
) {
    assert!(dt >= 0.0, "negative time step");
    let (e, clamped) = clamp_spectrum(gram);
    state.clamped += clamped;
    let decay: Vec<f64> = e.values.iter().map(|&l| (-rate * dt * l).exp()).collect();
    let weight: Vec<f64> = e
        .values
        .iter()
        .map(|&l| {
            let x = rate * dt * l;
            if x < 1e-12 {
                rate * dt * (1.0 - 0.5 * x)
            } else {
                -(-x).exp_m1() / l
            }
        })
        .collect();
    let v = &e.vectors;
    let current = &state.phi * residual0;
    let coeff = v.transpose() * &current;
    let weighted = DVector::from_fn(coeff.len(), |i, _| coeff[i] * weight[i]);
    state.accumulated_pred += test_rows * (v * weighted);
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * decay[j]);
    state.phi = scaled * (v.transpose() * &state.phi);
    state.last_time += dt;
}

/// Hold the kernel fixed forever: the residual's component in the range of
/// `K` is fully absorbed and `Φ` collapses onto the null space.
pub fn evolve_to_convergence(
    state: &mut TransitionState,
    gram: &DMatrix<f64>,
    test_rows: &DMatrix<f64>,
    residual0: &DVector<f64>,
) {
    let (e, clamped) = clamp_spectrum(gram);
    state.clamped += clamped;
    let lmax = e.values.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = lmax * 1e-12 * e.values.len() as f64;
    let v = &e.vectors;
    let current = &state.phi * residual0;
    let coeff = v.transpose() * &current;
    let weighted = DVector::from_fn(coeff.len(), |i, _| {
        if e.values[i] > tol {
            coeff[i] / e.values[i]
        } else {
            0.0
        }
    });
    state.accumulated_pred += test_rows * (v * weighted);
    let keep = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| {
        if e.values[j] > tol {
            0.0
        } else {
            v[(i, j)]
        }
    });
    state.phi = keep * (v.transpose() * &state.phi);
    state.last_time = f64::INFINITY;
}

#[derive(Clone, Debug)]
pub struct IntegratingFactorPrediction {
    pub predictions: DVector<f64>,
    /// `‖[K_T, ∫K]‖_F / (‖K_T‖_F ‖∫K‖_F)`: zero when the path commutes.
    pub commutator: f64,
    pub clamped: usize,
    pub phi_final: DMatrix<f64>,
}

/// Time-varying-kernel predictor `f(x) = f_0(x) + ∫ rate·k_t(x) Φ_t (y − f_0) dt`
/// chained over snapshot intervals. Each interval uses the mean of its
/// endpoint kernels. With `to_convergence` the last kernel is held until
/// the residual in its range is exhausted.
///
/// `rate` multiplies the kernel in `ḟ = −rate·K (f − y)`; for the `|f − y|²/2P`
/// loss trained at learning rate `η` it is `η/P`.
pub fn integrating_factor_predict(
    snapshots: &[KernelSnapshot],
    y: &DVector<f64>,
    f0_train: &DVector<f64>,
    f0_test: &DVector<f64>,
    rate: f64,
    to_convergence: bool,
) -> Result<IntegratingFactorPrediction> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::Invalid("no kernel snapshots".into()))?;
    let n = first.gram.nrows();
    if y.len() != n || f0_train.len() != n {
        return dims("targets and initial predictions must match the Gram size");
    }
    let rows = |s: &KernelSnapshot| -> Result<DMatrix<f64>> {
        s.test_rows
            .clone()
            .ok_or_else(|| Error::Invalid(format!("snapshot at t={} has no test rows", s.time)))
    };
    let q = rows(first)?.nrows();
    if f0_test.len() != q {
        return dims("initial test predictions must match the test rows");
    }
    if snapshots.windows(2).any(|w| w[1].time < w[0].time) {
        return invalid("snapshots must be time-ordered");
    }

    let residual0 = y - f0_train;
    let mut state = TransitionState::new(n, q);
    let mut integral = DMatrix::zeros(n, n);
    for w in snapshots.windows(2) {
        let dt = w[1].time - w[0].time;
        if dt == 0.0 {
            continue;
        }
        let k = (&w[0].gram + &w[1].gram) * 0.5;
        let kt = (rows(&w[0])? + rows(&w[1])?) * 0.5;
        evolve_transition(&mut state, &k, &kt, dt, rate, &residual0);
        integral += &k * dt;
    }
    let last = snapshots.last().unwrap();
    if to_convergence {
        evolve_to_convergence(&mut state, &last.gram, &rows(last)?, &residual0);
    }
    let comm = &last.gram * &integral - &integral * &last.gram;
    let denom = last.gram.norm() * integral.norm();
    let commutator = if denom > 0.0 { comm.norm() / denom } else { 0.0 };
    Ok(IntegratingFactorPrediction {
        predictions: f0_test + &state.accumulated_pred,
        commutator,
        clamped: state.clamped,
        phi_final: state.phi,
    })
}

/// Linear-network kernel `K_{cc'}(x, x') = xᵀ M_{cc'} x'`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticLinearKernel {
    pub classes: usize,
    pub dim: usize,
    /// `C·C` blocks in row-major `(c, c')` order, each `D × D`.
    pub blocks: Vec<DMatrix<f64>>,
}

impl AnalyticLinearKernel {
    pub fn single(m: DMatrix<f64>) -> Self {
        Self {
            classes: 1,
            dim: m.nrows(),
            blocks: vec![m],
        }
    }

    pub fn block(&self, c: usize, c2: usize) -> &DMatrix<f64> {
        &self.blocks[c * self.classes + c2]
    }

    /// The single-output matrix `M`.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.blocks[0]
    }

    /// Full `CD × CD` matrix with `(c, c')` blocks.
    pub fn dense(&self) -> DMatrix<f64> {
        let (c, d) = (self.classes, self.dim);
        let mut out = DMatrix::zeros(c * d, c * d);
        for a in 0..c {
            for b in 0..c {
                out.view_mut((a * d, b * d), (d, d)).copy_from(self.block(a, b));
            }
        }
        out
    }

    /// Class-major kernel between the columns of `x1` and `x2`.
    pub fn cross(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> DMatrix<f64> {
        let (p1, p2) = (x1.ncols(), x2.ncols());
        let c = self.classes;
        let mut out = DMatrix::zeros(c * p1, c * p2);
        for a in 0..c {
            for b in 0..c {
                let blk = x1.transpose() * self.block(a, b) * x2;
                out.view_mut((a * p1, b * p2), (p1, p2)).copy_from(&blk);
            }
        }
        out
    }

    pub fn gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&self.cross(x, x))
    }

    pub fn snapshot(&self, x: &DMatrix<f64>, x_test: Option<&DMatrix<f64>>) -> KernelSnapshot {
        KernelSnapshot {
            time: 0.0,
            gram: self.gram(x),
            test_rows: x_test.map(|xt| self.cross(xt, x)),
            classes: self.classes,
        }
    }
}

/// Exact kernel of a linear network: a sum over layers of
/// `[B_ℓ B_ℓᵀ]_{cc'} · A_ℓᵀ A_ℓ`, where `A_ℓ` is the product of the layers
/// below `ℓ` and `B_ℓ` the product above it. No balance assumption.
pub fn analytic_linear_ntk(net: &LayerStack) -> Result<AnalyticLinearKernel> {
    if !net.is_linear() {
        return invalid("analytic kernel requires a linear network");
    }
    let l = net.depth();
    let d = net.input_dim();
    let c = net.outputs();
    let mut below = Vec::with_capacity(l);
    below.push(DMatrix::<f64>::identity(d, d));
    for i in 1..l {
        below.push(&net.weights[i - 1] * &below[i - 1]);
    }
    let mut above = vec![DMatrix::zeros(0, 0); l];
    above[l - 1] = DMatrix::<f64>::identity(c, c);
    for i in (0..l - 1).rev() {
        above[i] = &above[i + 1] * &net.weights[i + 1];
    }
    let mut blocks = vec![DMatrix::zeros(d, d); c * c];
    for i in 0..l {
        let left = &above[i] * above[i].transpose();
        let right = below[i].transpose() * &below[i];
        for a in 0..c {
            for b in 0..c {
                blocks[a * c + b] += &right * left[(a, b)];
            }
        }
    }
    for a in 0..c {
        blocks[a * c + a] = linalg::symmetrize(&blocks[a * c + a]);
    }
    Ok(AnalyticLinearKernel {
        classes: c,
        dim: d,
        blocks,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub clamped: usize,
}

/// Symmetrise and clamp eigenvalues below `−1e-8·trace/n` to zero.
pub fn enforce_psd(gram: &DMatrix<f64>) -> (DMatrix<f64>, PsdReport) {
    let sym = linalg::symmetrize(gram);
    let e = linalg::sym_eigen(&sym);
    let n = e.values.len();
    let min_eigenvalue = e.values[n - 1];
    let tol = 1e-8 * sym.trace().abs() / n as f64;
    let clamped = e.values.iter().filter(|&&v| v < -tol).count();
    if clamped == 0 {
        return (sym, PsdReport { min_eigenvalue, clamped });
    }
    let fixed = linalg::sym_fn(&sym, |v| v.max(0.0));
    (fixed, PsdReport { min_eigenvalue, clamped })
}

#[derive(Serialize)]
struct SnapshotIndexEntry {
    time: f64,
    gram_file: String,
    gram_shape: [usize; 2],
    test_file: Option<String>,
    test_shape: Option<[usize; 2]>,
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Write each snapshot as headerless CSV matrices plus an `index.json` with
/// times and shapes.
pub fn write_snapshots(dir: &Path, snapshots: &[KernelSnapshot]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = Vec::new();
    for (i, s) in snapshots.iter().enumerate() {
        let gram_file = format!("gram_{i:04}.csv");
        std::fs::write(dir.join(&gram_file), matrix_csv(&s.gram))?;
        let (test_file, test_shape) = match &s.test_rows {
            Some(t) => {
                let f = format!("test_{i:04}.csv");
                std::fs::write(dir.join(&f), matrix_csv(t))?;
                (Some(f), Some([t.nrows(), t.ncols()]))
            }
            None => (None, None),
        };
        index.push(SnapshotIndexEntry {
            time: s.time,
            gram_file,
            gram_shape: [s.gram.nrows(), s.gram.ncols()],
            test_file,
            test_shape,
        });
    }
    write_json(&dir.join("index.json"), &index)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{}: line {}: bad number {v:?}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{}: ragged matrix", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn read_snapshots(dir: &Path) -> Result<Vec<KernelSnapshot>> {
    let index: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)
        .map_err(|e| Error::Parse(format!("snapshot index: {e}")))?;
    let mut out = Vec::new();
    for entry in index {
        let time = entry["time"]
            .as_f64()
            .ok_or_else(|| Error::Parse("snapshot index entry without time".into()))?;
        let gram_file = entry["gram_file"]
            .as_str()
            .ok_or_else(|| Error::Parse("snapshot index entry without gram_file".into()))?;
        let gram = read_matrix_csv(&dir.join(gram_file))?;
        let test_rows = match entry["test_file"].as_str() {
            Some(f) => Some(read_matrix_csv(&dir.join(f))?),
            None => None,
        };
        out.push(KernelSnapshot {
            time,
            gram,
            test_rows,
            classes: 1,
        });
    }
    Ok(out)
}
