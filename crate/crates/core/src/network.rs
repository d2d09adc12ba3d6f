//! Bias-free fully connected networks `f(x) = W^L φ(… φ(W^1 x))`.
//!
//! Layer `ℓ` (zero-based here) maps width `widths[ℓ]` to `widths[ℓ + 1]`;
//! `widths[0] = D` and the last width is the output count `C`. Parameters
//! flatten layer by layer in column-major order.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::standard_normal_matrix;
use crate::error::{dims, invalid, Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// ReLU has derivative 0 at the kink.
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn second(self, z: f64) -> f64 {
        match self {
            Activation::Linear | Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub weights: Vec<DMatrix<f64>>,
    pub activation: Activation,
    pub sigma: f64,
    pub widths: Vec<usize>,
    pub seed: u64,
}

/// Pre-activations `z[ℓ] = W^ℓ h[ℓ]` and layer inputs `h[ℓ]` (with `h[0] = x`).
pub struct Trace {
    pub z: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.z.last().expect("non-empty network")
    }
}

impl LayerStack {
    /// Entries of layer `ℓ` drawn i.i.d. from `N(0, σ²/widths[ℓ])`.
    pub fn init(widths: &[usize], sigma: f64, activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return invalid("a network needs at least an input and an output width");
        }
        if widths.contains(&0) {
            return invalid(format!("zero width in {widths:?}"));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return invalid(format!("init scale {sigma} must be finite and non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = widths
            .windows(2)
            .map(|w| standard_normal_matrix(w[1], w[0], &mut rng) * (sigma / (w[0] as f64).sqrt()))
            .collect();
        Ok(Self {
            weights,
            activation,
            sigma,
            widths: widths.to_vec(),
            seed,
        })
    }

    pub fn from_weights(weights: Vec<DMatrix<f64>>, activation: Activation, sigma: f64, seed: u64) -> Result<Self> {
        if weights.is_empty() {
            return invalid("no layers");
        }
        let mut widths = vec![weights[0].ncols()];
        for (l, w) in weights.iter().enumerate() {
            if w.ncols() != *widths.last().unwrap() {
                return dims(format!(
                    "layer {} expects {} inputs but previous width is {}",
                    l + 1,
                    w.ncols(),
                    widths.last().unwrap()
                ));
            }
            if w.nrows() == 0 {
                return invalid(format!("layer {} has zero width", l + 1));
            }
            widths.push(w.nrows());
        }
        Ok(Self {
            weights,
            activation,
            sigma,
            widths,
            seed,
        })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn is_linear(&self) -> bool {
        self.activation == Activation::Linear || self.depth() == 1
    }

    pub fn trace(&self, x: &DMatrix<f64>) -> Trace {
        let l = self.depth();
        let mut z = Vec::with_capacity(l);
        let mut h = Vec::with_capacity(l);
        h.push(x.clone());
        for (i, w) in self.weights.iter().enumerate() {
            let zi = w * &h[i];
            if i + 1 < l {
                h.push(zi.map(|v| self.activation.apply(v)));
            }
            z.push(zi);
        }
        Trace { z, h }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.depth();
        let mut a = x.clone();
        for (i, w) in self.weights.iter().enumerate() {
            a = w * a;
            if i + 1 < l {
                a.apply(|v| *v = self.activation.apply(*v));
            }
        }
        a
    }

    /// Backpropagated signals `δ[ℓ] = ∂(Σ_μ eᵀ f(x^μ)) / ∂z[ℓ]` for an output
    /// cotangent `e` (`C × P`).
    pub fn backprop_signals(&self, trace: &Trace, e: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let l = self.depth();
        let mut deltas = vec![DMatrix::zeros(0, 0); l];
        deltas[l - 1] = e.clone();
        for i in (1..l).rev() {
            let mut d = self.weights[i].transpose() * &deltas[i];
            if self.activation != Activation::Linear {
                d.zip_apply(&trace.z[i - 1], |dv, zv| *dv *= self.activation.deriv(zv));
            }
            deltas[i - 1] = d;
        }
        deltas
    }

    /// Vector-Jacobian product: `Σ_μ Σ_c e[c,μ] ∂f_c(x^μ)/∂W`, one matrix per
    /// layer.
    pub fn vjp(&self, trace: &Trace, e: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let deltas = self.backprop_signals(trace, e);
        deltas
            .iter()
            .zip(&trace.h)
            .map(|(d, h)| d * h.transpose())
            .collect()
    }

    /// Jacobian-vector product: directional derivative of the outputs
    /// (`C × P`) along parameter direction `v`.
    pub fn jvp(&self, trace: &Trace, v: &[DMatrix<f64>]) -> DMatrix<f64> {
        let l = self.depth();
        let p = trace.h[0].ncols();
        let mut hdot = DMatrix::zeros(self.widths[0], p);
        let mut zdot = DMatrix::zeros(0, 0);
        for i in 0..l {
            zdot = &v[i] * &trace.h[i] + &self.weights[i] * &hdot;
            if i + 1 < l {
                hdot = zdot.clone();
                if self.activation != Activation::Linear {
                    hdot.zip_apply(&trace.z[i], |hv, zv| *hv *= self.activation.deriv(zv));
                }
            }
        }
        zdot
    }

    /// Loss `|f − y|² / 2P` and its gradient.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<DMatrix<f64>>) {
        let p = x.ncols() as f64;
        let tr = self.trace(x);
        let r = tr.output() - y;
        let loss = r.norm_squared() / (2.0 * p);
        let g = self.vjp(&tr, &(r / p));
        (loss, g)
    }

    pub fn loss(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        (self.forward(x) - y).norm_squared() / (2.0 * x.ncols() as f64)
    }

    /// Per-sample gradients: entry `c` is a `P × n_params` matrix whose row
    /// `μ` is `∂f_c(x^μ)/∂θ`.
    pub fn jacobian(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let tr = self.trace(x);
        let p = x.ncols();
        let c_out = self.outputs();
        let mut out = Vec::with_capacity(c_out);
        for c in 0..c_out {
            let mut e = DMatrix::zeros(c_out, p);
            e.row_mut(c).fill(1.0);
            let deltas = self.backprop_signals(&tr, &e);
            let mut jac = DMatrix::zeros(p, self.n_params());
            let mut offset = 0;
            for (d, h) in deltas.iter().zip(&tr.h) {
                let rows = d.nrows();
                for mu in 0..p {
                    for j in 0..h.nrows() {
                        let hj = h[(j, mu)];
                        for i in 0..rows {
                            jac[(mu, offset + i + j * rows)] = d[(i, mu)] * hj;
                        }
                    }
                }
                offset += d.nrows() * h.nrows();
            }
            out.push(jac);
        }
        out
    }

    /// Hessian-vector product `(∂²f_c(x)/∂θ²) v` for a single input column,
    /// by forward-mode differentiation of the backward pass.
    pub fn hvp(&self, x: &DVector<f64>, c: usize, v: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let tr = self.trace(&xm);
        let l = self.depth();
        let act = self.activation;

        // Tangents of pre-activations and layer inputs.
        let mut zdot: Vec<DMatrix<f64>> = Vec::with_capacity(l);
        let mut hdot: Vec<DMatrix<f64>> = vec![DMatrix::zeros(self.widths[0], 1)];
        for i in 0..l {
            let zd = &v[i] * &tr.h[i] + &self.weights[i] * &hdot[i];
            if i + 1 < l {
                let mut hd = zd.clone();
                hd.zip_apply(&tr.z[i], |a, z| *a *= act.deriv(z));
                hdot.push(hd);
            }
            zdot.push(zd);
        }

        let mut e = DMatrix::zeros(self.outputs(), 1);
        e[(c, 0)] = 1.0;
        let mut g = e;
        let mut gdot = DMatrix::zeros(self.outputs(), 1);
        let mut out = vec![DMatrix::zeros(0, 0); l];
        for i in (0..l).rev() {
            out[i] = &gdot * tr.h[i].transpose() + &g * hdot[i].transpose();
            if i > 0 {
                let back = self.weights[i].transpose() * &g;
                let back_dot = v[i].transpose() * &g + self.weights[i].transpose() * &gdot;
                let z = &tr.z[i - 1];
                let zd = &zdot[i - 1];
                let n = z.nrows();
                let mut ng = DMatrix::zeros(n, 1);
                let mut ngd = DMatrix::zeros(n, 1);
                for k in 0..n {
                    let d1 = act.deriv(z[(k, 0)]);
                    ng[(k, 0)] = d1 * back[(k, 0)];
                    ngd[(k, 0)] = act.second(z[(k, 0)]) * zd[(k, 0)] * back[(k, 0)] + d1 * back_dot[(k, 0)];
                }
                g = ng;
                gdot = ngd;
            }
        }
        out
    }

    /// `W^L ⋯ W^1` as a `C × D` matrix. Only meaningful for linear networks.
    pub fn effective_weights(&self) -> Result<DMatrix<f64>> {
        if !self.is_linear() {
            return invalid("effective weights are defined only for linear networks");
        }
        let mut acc = self.weights[0].clone();
        for w in &self.weights[1..] {
            acc = w * acc;
        }
        Ok(acc)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for w in &self.weights {
            out.extend_from_slice(w.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        let mut offset = 0;
        for w in &mut self.weights {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
    }

    /// Split a flat parameter-shaped vector into per-layer matrices.
    pub fn unflatten(&self, theta: &[f64]) -> Vec<DMatrix<f64>> {
        let mut offset = 0;
        self.weights
            .iter()
            .map(|w| {
                let n = w.len();
                let m = DMatrix::from_column_slice(w.nrows(), w.ncols(), &theta[offset..offset + n]);
                offset += n;
                m
            })
            .collect()
    }

    pub fn flatten(mats: &[DMatrix<f64>]) -> Vec<f64> {
        let mut out = Vec::new();
        for m in mats {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Top-`C` singular factors of every layer and the relative Frobenius
    /// mass left outside them.
    pub fn balance_decompose(&self) -> BalanceDecomposition {
        let k = self.outputs();
        let layers = self
            .weights
            .iter()
            .map(|w| {
                let d = linalg::svd(w);
                let r = k.min(d.s.len());
                let u = d.u.columns(0, r).into_owned();
                let s = d.s.rows(0, r).into_owned();
                let vt = d.v_t.rows(0, r).into_owned();
                let approx = &u * DMatrix::from_diagonal(&s) * &vt;
                let norm = w.norm();
                let residual = if norm == 0.0 { 0.0 } else { (w - approx).norm() / norm };
                LayerFactors {
                    singular_values: s.iter().copied().collect(),
                    left: u,
                    right: vt.transpose(),
                    residual,
                }
            })
            .collect();
        BalanceDecomposition { layers }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            widths: self.widths.clone(),
            activation: self.activation,
            sigma: self.sigma,
            seed: self.seed,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", serde_json::to_string(&header).expect("plain struct"))?;
        for (l, w) in self.weights.iter().enumerate() {
            writeln!(f, "# layer {} {} {}", l + 1, w.nrows(), w.ncols())?;
            for i in 0..w.nrows() {
                let row: Vec<String> = (0..w.ncols()).map(|j| crate::io::fmt_f64(w[(i, j)])).collect();
                writeln!(f, "{}", row.join(","))?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Parse("empty checkpoint".into()))??;
        let header: CheckpointHeader =
            serde_json::from_str(&first).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        let mut weights = Vec::new();
        for w in header.widths.windows(2) {
            let tag = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated checkpoint".into()))??;
            if !tag.starts_with("# layer") {
                return Err(Error::Parse(format!("expected layer block, got {tag:?}")));
            }
            let mut m = DMatrix::zeros(w[1], w[0]);
            for i in 0..w[1] {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Parse("truncated checkpoint".into()))??;
                let vals: Vec<&str> = line.split(',').collect();
                if vals.len() != w[0] {
                    return Err(Error::Parse(format!("row of length {} in a {}-column layer", vals.len(), w[0])));
                }
                for (j, v) in vals.iter().enumerate() {
                    m[(i, j)] = v
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad weight {v:?}")))?;
                }
            }
            weights.push(m);
        }
        let mut net = Self::from_weights(weights, header.activation, header.sigma, header.seed)?;
        net.widths = header.widths;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    widths: Vec<usize>,
    activation: Activation,
    sigma: f64,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct LayerFactors {
    pub singular_values: Vec<f64>,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct BalanceDecomposition {
    pub layers: Vec<LayerFactors>,
}

impl BalanceDecomposition {
    pub fn max_residual(&self) -> f64 {
        self.layers.iter().map(|l| l.residual).fold(0.0, f64::max)
    }
}
