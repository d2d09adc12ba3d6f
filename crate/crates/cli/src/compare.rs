//! Four predictors on the held-out points of a finished run: the trained
//! net, kernel regression with the initial and the final NTK, and the
//! time-varying-kernel integrating-factor predictor.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use ntk_lab_core::dataset::{load_csv, write_csv, Dataset};
use ntk_lab_core::io::{write_json, Table};
use ntk_lab_core::kernel::{integrating_factor_predict, kernel_regression, read_snapshots, vectorize, write_snapshots, KernelSnapshot};
use ntk_lab_core::linalg::{pearson, r_squared};
use ntk_lab_core::network::LayerStack;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const PREDICTORS: [&str; 4] = ["net", "ntk_initial", "ntk_final", "integrating_factor"];

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    eta: f64,
}

/// Everything `compare` needs, written next to a cell's trajectory.
pub struct Artifacts<'a> {
    pub train: Dataset,
    pub test: Dataset,
    pub initial: &'a LayerStack,
    pub last: &'a LayerStack,
    pub snapshots: &'a [KernelSnapshot],
    pub eta: f64,
}

pub fn write_artifacts(dir: &Path, a: &Artifacts<'_>) -> Result<(), CliError> {
    write_csv(&dir.join("train.csv"), &a.train)?;
    write_csv(&dir.join("test.csv"), &a.test)?;
    a.initial.save_checkpoint(&dir.join("net_initial.ckpt"))?;
    a.last.save_checkpoint(&dir.join("net_final.ckpt"))?;
    write_snapshots(&dir.join("snapshots"), a.snapshots)?;
    write_json(&dir.join("meta.json"), &Meta { eta: a.eta })?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairStat {
    pub reference: String,
    pub candidate: String,
    pub r2: f64,
    pub pearson: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub points: usize,
    pub pairs: Vec<PairStat>,
    /// Relative commutator of the final kernel with the integrated kernel.
    pub commutator: f64,
}

impl CompareReport {
    pub fn r2(&self, reference: &str, candidate: &str) -> Option<f64> {
        self.pairs
            .iter()
            .find(|p| p.reference == reference && p.candidate == candidate)
            .map(|p| p.r2)
    }
}

fn missing(dir: &Path, what: &str) -> CliError {
    CliError::io(format!("{}: missing artifact {what}", dir.display()))
}

/// The four predictions, class-major over the test points.
pub fn predictions(dir: &Path) -> Result<(Vec<DVector<f64>>, f64), CliError> {
    for f in ["train.csv", "test.csv", "net_initial.ckpt", "net_final.ckpt", "meta.json", "snapshots/index.json"] {
        if !dir.join(f).exists() {
            return Err(missing(dir, f));
        }
    }
    let train = load_csv(&dir.join("train.csv"))?;
    let test = load_csv(&dir.join("test.csv"))?;
    let initial = LayerStack::load_checkpoint(&dir.join("net_initial.ckpt"))?;
    let last = LayerStack::load_checkpoint(&dir.join("net_final.ckpt"))?;
    let snaps = read_snapshots(&dir.join("snapshots"))?;
    let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| CliError::io(format!("meta.json: {e}")))?;
    let (first, final_snap) = match (snaps.first(), snaps.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(missing(dir, "kernel snapshots")),
    };

    let y = vectorize(&train.y);
    let f0_train = vectorize(&initial.forward(&train.x));
    let f0_test = vectorize(&initial.forward(&test.x));
    let residual = &y - &f0_train;
    let rows = |s: &KernelSnapshot| s.test_rows.clone().ok_or_else(|| missing(dir, "kernel test rows"));
    let net = vectorize(&last.forward(&test.x));
    let ntk_initial = &f0_test + kernel_regression(&first.gram, &rows(first)?, &residual, 0.0)?.predictions;
    let ntk_final = &f0_test + kernel_regression(&final_snap.gram, &rows(final_snap)?, &residual, 0.0)?.predictions;
    let rate = meta.eta / train.samples() as f64;
    let ifp = integrating_factor_predict(&snaps, &y, &f0_train, &f0_test, rate, true)?;
    Ok((vec![net, ntk_initial, ntk_final, ifp.predictions], ifp.commutator))
}

/// Compare one cell directory and write `predictions.csv` and `compare.csv`.
pub fn compare_cell(dir: &Path) -> Result<CompareReport, CliError> {
    let (preds, commutator) = predictions(dir)?;
    let mut table = Table::new(&["point", "net", "ntk_initial", "ntk_final", "integrating_factor"]);
    for i in 0..preds[0].len() {
        let mut row = vec![i.into()];
        row.extend(preds.iter().map(|p| p[i].into()));
        table.push(row);
    }
    table.write(&dir.join("predictions.csv"))?;

    let mut pairs = Vec::new();
    let mut stats = Table::new(&["reference", "candidate", "r2", "pearson"]);
    for i in 0..PREDICTORS.len() {
        for j in i + 1..PREDICTORS.len() {
            let (a, b) = (preds[i].as_slice(), preds[j].as_slice());
            let pair = PairStat {
                reference: PREDICTORS[i].into(),
                candidate: PREDICTORS[j].into(),
                r2: r_squared(a, b),
                pearson: pearson(a, b),
            };
            stats.push(vec![
                pair.reference.as_str().into(),
                pair.candidate.as_str().into(),
                pair.r2.into(),
                pair.pearson.into(),
            ]);
            pairs.push(pair);
        }
    }
    stats.write(&dir.join("compare.csv"))?;
    Ok(CompareReport {
        points: preds[0].len(),
        pairs,
        commutator,
    })
}

/// Cell directories under a run: `cells/*` when present, else the directory
/// itself.
pub fn cell_dirs(run: &Path) -> Result<Vec<PathBuf>, CliError> {
    let cells = run.join("cells");
    if !cells.is_dir() {
        return Ok(vec![run.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(&cells)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

pub fn compare_run(run: &Path) -> Result<Vec<(String, CompareReport)>, CliError> {
    let dirs = cell_dirs(run)?;
    let mut out = Vec::new();
    for d in dirs {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, compare_cell(&d)?));
    }
    Ok(out)
}
