//! Synthetic data, partial whitening and teacher targets.
//!
//! Data matrices are `D × P` (one sample per column); targets are `C × P`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dims, invalid, Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return dims(format!(
                "x has {} samples but y has {}",
                x.ncols(),
                y.ncols()
            ));
        }
        Ok(Self { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn classes(&self) -> usize {
        self.y.nrows()
    }
}

/// Linear teacher `y = scale · beta · x` with `beta` of shape `C × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub beta: DMatrix<f64>,
    pub scale: f64,
}

impl Teacher {
    /// Single-output teacher along `direction`, normalised to unit length.
    pub fn unit(direction: &DVector<f64>, scale: f64) -> Result<Self> {
        let n = direction.norm();
        if n == 0.0 {
            return invalid("teacher direction is zero");
        }
        Ok(Self {
            beta: DMatrix::from_row_slice(1, direction.len(), (direction / n).as_slice()),
            scale,
        })
    }
}

pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Column-major fill keeps the draw order stable across shapes.
    let mut m = DMatrix::zeros(rows, cols);
    for v in m.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    m
}

/// Factor `cov = F Fᵀ`, by Cholesky when possible and otherwise through the
/// eigendecomposition (so singular PSD covariances are accepted).
fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let e = linalg::sym_eigen(cov);
    let lmax = e.values.max().max(0.0);
    let lmin = e.values.min();
    if lmin < -1e-12 * lmax.max(1.0) {
        return Err(Error::NotPsd(lmin));
    }
    Ok(DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        e.vectors[(i, j)] * e.values[j].max(0.0).sqrt()
    }))
}

/// `P` samples of `N(0, cov)` in `D` dimensions.
pub fn generate_gaussian(d: usize, p: usize, cov: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    if cov.nrows() != d || cov.ncols() != d {
        return dims(format!(
            "covariance is {}x{}, expected {d}x{d}",
            cov.nrows(),
            cov.ncols()
        ));
    }
    if (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
        return invalid("covariance is not symmetric");
    }
    let factor = covariance_factor(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal_matrix(d, p, &mut rng);
    Ok(factor * z)
}

/// `U S^γ Vᵀ` from the thin SVD of `x`. γ = 1 is the identity, γ = 0 sets
/// every nonzero singular value to one. Zero singular values stay zero.
pub fn partial_whiten(x: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return invalid(format!("whitening exponent {gamma} outside [0, 1]"));
    }
    if gamma == 1.0 {
        return Ok(x.clone());
    }
    let d = linalg::svd(x);
    let tol = zero_singular_tol(&d.s, x);
    let s = d.s.map(|v| if v > tol { v.powf(gamma) } else { 0.0 });
    Ok(&d.u * DMatrix::from_diagonal(&s) * &d.v_t)
}

fn zero_singular_tol(s: &DVector<f64>, x: &DMatrix<f64>) -> f64 {
    let smax = s.iter().fold(0.0f64, |a, &b| a.max(b));
    smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON
}

/// The linear map behind [`partial_whiten`] for a full-row-rank training
/// matrix, so held-out points can be transformed consistently.
#[derive(Clone, Debug)]
pub struct WhiteningMap {
    pub gamma: f64,
    pub transform: DMatrix<f64>,
}

impl WhiteningMap {
    pub fn fit(x: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return invalid(format!("whitening exponent {gamma} outside [0, 1]"));
        }
        let d = linalg::svd(x);
        let tol = zero_singular_tol(&d.s, x);
        if d.s.len() < x.nrows() || d.s.iter().any(|&v| v <= tol) {
            return invalid("whitening map needs a full-row-rank data matrix");
        }
        let scaled = DMatrix::from_fn(d.u.nrows(), d.u.ncols(), |i, j| {
            d.u[(i, j)] * d.s[j].powf(gamma - 1.0)
        });
        Ok(Self {
            gamma,
            transform: scaled * d.u.transpose(),
        })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.transform * x
    }
}

/// Scale factor `c` such that `c·x` has correlation eigenvalues averaging one
/// over its nonzero spectrum. For a fully whitened matrix this is `√P`.
pub fn unit_spectrum_scale(x: &DMatrix<f64>) -> f64 {
    let d = linalg::svd(x);
    let tol = zero_singular_tol(&d.s, x);
    let rank = d.s.iter().filter(|&&v| v > tol).count().max(1);
    let fro2: f64 = d.s.iter().map(|v| v * v).sum();
    ((x.ncols() * rank) as f64 / fro2).sqrt()
}

/// Whitened copy of `x` whose correlation `XXᵀ/P` is the identity on its
/// column space.
pub fn whiten_unit(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = partial_whiten(x, 0.0)?;
    Ok(&w * (x.ncols() as f64).sqrt())
}

pub fn make_targets(x: &DMatrix<f64>, teacher: &Teacher) -> Result<DMatrix<f64>> {
    if teacher.beta.ncols() != x.nrows() {
        return dims(format!(
            "teacher acts on {} inputs but data has dimension {}",
            teacher.beta.ncols(),
            x.nrows()
        ));
    }
    Ok(&teacher.beta * x * teacher.scale)
}

/// `Σ = X Xᵀ / P`.
pub fn correlation(x: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.ncols().max(1) as f64;
    linalg::symmetrize(&(x * x.transpose())) / p
}

/// Centred one-hot targets: `1 − 1/C` for the true class, `−1/C` elsewhere.
pub fn one_hot_targets(labels: &[usize], classes: usize) -> Result<DMatrix<f64>> {
    if classes == 0 {
        return invalid("zero classes");
    }
    let mut y = DMatrix::from_element(classes, labels.len(), -1.0 / classes as f64);
    for (mu, &l) in labels.iter().enumerate() {
        if l >= classes {
            return invalid(format!("label {l} out of range for {classes} classes"));
        }
        y[(l, mu)] += 1.0;
    }
    Ok(y)
}

/// Write `x1..xD,y1..yC`, one sample per line, 17 significant digits.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (1..=data.dim()).map(|i| format!("x{i}")).collect();
    header.extend((1..=data.classes()).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for mu in 0..data.samples() {
        let row: Vec<String> = data
            .x
            .column(mu)
            .iter()
            .chain(data.y.column(mu).iter())
            .map(|v| crate::io::fmt_f64(*v))
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let c = header.iter().filter(|h| h.starts_with('y')).count();
    if d + c != header.len() || d == 0 || c == 0 {
        return Err(Error::Parse(format!(
            "line 1: header must be x1..xD,y1..yC, got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d + c {
            return Err(Error::Parse(format!(
                "line {line}: expected {} fields, found {}",
                d + c,
                rec.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Parse(format!("line {line}: non-numeric value {cell:?} in column {}", j + 1))
            })?;
            if j < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let p = xs.len() / d;
    if p == 0 {
        return Err(Error::Parse("no samples".into()));
    }
    Dataset::new(
        DMatrix::from_column_slice(d, p, &xs),
        DMatrix::from_column_slice(c, p, &ys),
    )
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}
