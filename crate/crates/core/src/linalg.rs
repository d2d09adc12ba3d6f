//! Dense helpers shared by the numerical modules.
//!
//! Eigen and singular decompositions are returned sorted in descending order
//! with a deterministic sign gauge, so downstream output does not depend on
//! the ordering nalgebra happens to produce.

use nalgebra::{DMatrix, DVector};

/// Thin SVD `m = U diag(s) Vt`, singular values descending, each left
/// singular vector's largest-magnitude entry made positive.
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Svd {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Svd {
            u: DMatrix::zeros(m.nrows(), 0),
            s: DVector::zeros(0),
            v_t: DMatrix::zeros(0, m.ncols()),
        };
    }
    let dec = m.clone().svd(true, true);
    let u = dec.u.expect("requested U");
    let v_t = dec.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));

    let mut out_u = DMatrix::zeros(m.nrows(), k);
    let mut out_s = DVector::zeros(k);
    let mut out_vt = DMatrix::zeros(k, m.ncols());
    for (j, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let sign = gauge_sign(col.iter().copied());
        out_u.set_column(j, &(col * sign));
        out_s[j] = dec.singular_values[src];
        out_vt.set_row(j, &(v_t.row(src) * sign));
    }
    Svd {
        u: out_u,
        s: out_s,
        v_t: out_vt,
    }
}

/// Symmetric eigendecomposition, eigenvalues descending, vectors gauged like
/// [`svd`].
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(m: &DMatrix<f64>) -> SymEigen {
    let n = m.nrows();
    let dec = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dec.eigenvalues[b].total_cmp(&dec.eigenvalues[a]));
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (j, &src) in order.iter().enumerate() {
        let col = dec.eigenvectors.column(src);
        let sign = gauge_sign(col.iter().copied());
        values[j] = dec.eigenvalues[src];
        vectors.set_column(j, &(col * sign));
    }
    SymEigen { values, vectors }
}

fn gauge_sign(it: impl Iterator<Item = f64>) -> f64 {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for v in it {
        if v.abs() > best {
            best = v.abs();
            sign = if v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    sign
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Leading eigenpair of a symmetric matrix.
pub fn top_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let e = sym_eigen(m);
    (e.values[0], e.vectors.column(0).into_owned())
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0f64, |a, &b| a.max(b))
}

/// Frobenius inner product normalised by both norms. Zero input gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = pairwise_sum_iter(a.iter().zip(b).map(|(x, y)| x * y), a.len());
    let na = pairwise_sum_iter(a.iter().map(|x| x * x), a.len()).sqrt();
    let nb = pairwise_sum_iter(b.iter().map(|x| x * x), b.len()).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairwise (cascade) summation; error grows as O(log n) rather than O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

fn pairwise_sum_iter(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    let mut buf = Vec::with_capacity(n);
    buf.extend(it);
    pairwise_sum(&buf)
}

/// Coefficient of determination of `pred` as a predictor of `reference`.
pub fn r_squared(reference: &[f64], pred: &[f64]) -> f64 {
    assert_eq!(reference.len(), pred.len());
    let n = reference.len() as f64;
    let mean = pairwise_sum(reference) / n;
    let ss_tot = pairwise_sum_iter(reference.iter().map(|r| (r - mean).powi(2)), reference.len());
    let ss_res = pairwise_sum_iter(
        reference.iter().zip(pred).map(|(r, p)| (r - p).powi(2)),
        reference.len(),
    );
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = pairwise_sum(a) / n;
    let mb = pairwise_sum(b) / n;
    let da: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let db: Vec<f64> = b.iter().map(|x| x - mb).collect();
    cosine(&da, &db)
}

/// Ordinary least squares line. Returns (slope, intercept, R²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let fitted: Vec<f64> = x.iter().map(|a| slope * a + intercept).collect();
    (slope, intercept, r_squared(y, &fitted))
}

/// Apply `f` to the eigenvalues of a symmetric matrix.
pub fn sym_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let scaled = DMatrix::from_fn(e.vectors.nrows(), e.vectors.ncols(), |i, j| {
        e.vectors[(i, j)] * f(e.values[j])
    });
    &scaled * e.vectors.transpose()
}

/// Relative Frobenius distance ‖a − b‖/‖b‖.
pub fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Log-spaced grid from `lo` to `hi` inclusive with `per_decade` points per
/// factor of ten.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && per_decade > 0);
    let n = ((hi / lo).log10() * per_decade as f64).ceil() as usize;
    let mut out: Vec<f64> = (0..=n)
        .map(|i| lo * 10f64.powf(i as f64 / per_decade as f64))
        .filter(|&t| t < hi * (1.0 - 1e-12))
        .collect();
    out.push(hi);
    out
}
