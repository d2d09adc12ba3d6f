//! Turn a dataset spec into train and test matrices for one whitening level.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ntk_lab_core::dataset::{generate_gaussian, load_csv, partial_whiten, standard_normal_matrix, unit_spectrum_scale, WhiteningMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ntk_lab_core::network::Activation;

use crate::config::{DatasetSpec, SyntheticSpec, TeacherOn};
use crate::error::CliError;

/// Stream ids for the independent draws made from one run seed.
const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const TEACHER_STREAM: u64 = 2;

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x_test: Option<DMatrix<f64>>,
    pub y_test: Option<DMatrix<f64>>,
    /// `C × D` teacher acting on the transformed inputs, when it is known.
    pub teacher: Option<DMatrix<f64>>,
    /// Teacher singular values, in class order.
    pub teacher_values: Vec<f64>,
}

impl Prepared {
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn classes(&self) -> usize {
        self.y.nrows()
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }
}

/// Geometric covariance spectrum from `1` down to `1/condition`, rescaled to
/// mean one.
pub fn geometric_spectrum(dim: usize, condition: f64) -> DVector<f64> {
    let raw = DVector::from_fn(dim, |k, _| {
        if dim == 1 {
            1.0
        } else {
            condition.powf(-(k as f64) / (dim - 1) as f64)
        }
    });
    let mean = raw.sum() / dim as f64;
    raw / mean
}

/// `C × D` teacher `diag(s) Rᵀ` with orthonormal random directions `R`.
pub fn random_teacher(dim: usize, values: &[f64], seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = standard_normal_matrix(dim, values.len(), &mut rng);
    let q = g.qr().q();
    let mut b = q.columns(0, values.len()).transpose();
    for (c, &s) in values.iter().enumerate() {
        b.row_mut(c).scale_mut(s);
    }
    b
}

struct Transform {
    scale: f64,
    map: Option<WhiteningMap>,
}

impl Transform {
    fn fit(x: &DMatrix<f64>, gamma: f64) -> Result<(Self, DMatrix<f64>), CliError> {
        if gamma == 1.0 {
            return Ok((Self { scale: 1.0, map: None }, x.clone()));
        }
        let w = partial_whiten(x, gamma)?;
        let scale = unit_spectrum_scale(&w);
        // Rank-deficient data can be whitened but not extended to new points.
        let map = WhiteningMap::fit(x, gamma).ok();
        Ok((Self { scale, map }, w * scale))
    }

    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, CliError> {
        if self.scale == 1.0 && self.map.is_none() {
            return Ok(x.clone());
        }
        match &self.map {
            Some(m) => Ok(m.apply(x) * self.scale),
            None => Err(CliError::schema(
                "dataset.gamma",
                "test points need full-row-rank training data to be whitened",
            )),
        }
    }
}

pub fn prepare(spec: &DatasetSpec, gamma: f64, seed: u64, base_dir: &Path) -> Result<Prepared, CliError> {
    match (&spec.synthetic, &spec.csv) {
        (Some(s), None) => synthetic(s, gamma, seed),
        (None, Some(path)) => from_csv(&base_dir.join(path), gamma, spec.test_fraction),
        _ => Err(CliError::schema("dataset", "exactly one of synthetic and csv is required")),
    }
}

fn synthetic(s: &SyntheticSpec, gamma: f64, seed: u64) -> Result<Prepared, CliError> {
    let cov = DMatrix::from_diagonal(&geometric_spectrum(s.dim, s.condition));
    let raw = generate_gaussian(s.dim, s.samples, &cov, sub_seed(seed, TRAIN_STREAM))?;
    let raw_test = if s.test_samples > 0 {
        Some(generate_gaussian(s.dim, s.test_samples, &cov, sub_seed(seed, TEST_STREAM))?)
    } else {
        None
    };
    let b = random_teacher(s.dim, &s.teacher, sub_seed(seed, TEACHER_STREAM));
    let (tf, x) = Transform::fit(&raw, gamma)?;
    let x_test = raw_test.as_ref().map(|t| tf.apply(t)).transpose()?;
    let (y, y_test, teacher) = match s.teacher_on {
        TeacherOn::Transformed => (&b * &x, x_test.as_ref().map(|t| &b * t), Some(b)),
        TeacherOn::Raw => (&b * &raw, raw_test.as_ref().map(|t| &b * t), None),
    };
    let (y, y_test, teacher) = if s.teacher_activation == Activation::Linear {
        (y, y_test, teacher)
    } else {
        let g = |m: DMatrix<f64>| m.map(|v| s.teacher_activation.apply(v));
        let (y, y_test) = (g(y), y_test.map(g));
        // Centre every output on its training mean; test rows get the same shift.
        let means: Vec<f64> = y.row_iter().map(|r| r.mean()).collect();
        let centre = |mut m: DMatrix<f64>| {
            for (mut row, mu) in m.row_iter_mut().zip(&means) {
                row.add_scalar_mut(-mu);
            }
            m
        };
        (centre(y), y_test.map(centre), None)
    };
    Ok(Prepared {
        x,
        y,
        x_test,
        y_test,
        teacher,
        teacher_values: s.teacher.clone(),
    })
}

fn from_csv(path: &Path, gamma: f64, test_fraction: f64) -> Result<Prepared, CliError> {
    let data = load_csv(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let p = data.samples();
    let n_test = (test_fraction * p as f64).floor() as usize;
    if n_test >= p {
        return Err(CliError::schema("dataset.test_fraction", "no training rows left"));
    }
    let n_train = p - n_test;
    let raw = data.x.columns(0, n_train).into_owned();
    let (tf, x) = Transform::fit(&raw, gamma)?;
    let (x_test, y_test) = if n_test > 0 {
        (
            Some(tf.apply(&data.x.columns(n_train, n_test).into_owned())?),
            Some(data.y.columns(n_train, n_test).into_owned()),
        )
    } else {
        (None, None)
    };
    Ok(Prepared {
        x,
        y: data.y.columns(0, n_train).into_owned(),
        x_test,
        y_test,
        teacher: None,
        teacher_values: Vec::new(),
    })
}
