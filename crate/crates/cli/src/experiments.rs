//! The experiment kinds. Grid cells are independent: each writes into its
//! own `cells/cellNNN` directory and the summaries are assembled in cell
//! order afterwards, so output does not depend on the worker count.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ntk_lab_core::dataset::{standard_normal_matrix, Dataset};
use ntk_lab_core::generalization::{sweep_table, SweepGrid, SweepRow};
use ntk_lab_core::io::{write_json, Cell as TableCell, Table};
use ntk_lab_core::linalg::{linear_fit, op_norm, rel_fro};
use ntk_lab_core::network::LayerStack;
use ntk_lab_core::theory::{
    balanced_flow_c_curve, deep_c_curve, deep_time_to_reach, min_norm_solution, mode_schedule, model_kernel_run,
    two_layer_half_time, two_layer_qr, write_theory_curves, DeepTheoryParams, KernelPair, ModelKernelSpec,
    TheoryCurve, TwoLayerTheoryParams,
};
use ntk_lab_core::trainer::{first_crossing_up, laziness_ratio, phase_markers, train, train_with, Probe, TrajectoryLog};
use ntk_lab_core::Error as CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::compare::{compare_cell, write_artifacts, Artifacts, CompareReport};
use crate::config::{ExperimentConfig, Kind, Measure, NetworkSpec};
use crate::data::{prepare, sub_seed, Prepared};
use crate::error::CliError;

const NET_STREAM: u64 = 3;
const KERNEL_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub index: usize,
    pub depth: usize,
    pub sigma: f64,
    pub gamma: f64,
}

impl GridCell {
    pub fn name(&self) -> String {
        format!("cell{:03}", self.index)
    }
}

/// Cells in `(γ, depth, σ)` row-major order.
pub fn expand_cells(cfg: &ExperimentConfig) -> Vec<GridCell> {
    let net = cfg.network.as_ref().expect("validated");
    let ds = cfg.dataset.as_ref().expect("validated");
    let or = |v: &Vec<f64>, base: f64| if v.is_empty() { vec![base] } else { v.clone() };
    let gammas = or(&cfg.grid.gamma, ds.gamma);
    let sigmas = or(&cfg.grid.sigma, net.sigma);
    let depths = if cfg.grid.depth.is_empty() {
        vec![net.hidden.len() + 1]
    } else {
        cfg.grid.depth.clone()
    };
    let mut out = Vec::new();
    for &gamma in &gammas {
        for &depth in &depths {
            for &sigma in &sigmas {
                out.push(GridCell {
                    index: out.len(),
                    depth,
                    sigma,
                    gamma,
                });
            }
        }
    }
    out
}

/// `[D, hidden…, C]`, or `[D, hidden[0] × (L − 1), C]` when the depth is a grid axis.
pub fn widths(cfg: &ExperimentConfig, net: &NetworkSpec, depth: usize, dim: usize, classes: usize) -> Vec<usize> {
    let mut w = vec![dim];
    if cfg.grid.depth.is_empty() {
        w.extend(&net.hidden);
    } else {
        w.extend(std::iter::repeat(net.hidden[0]).take(depth - 1));
    }
    w.push(classes);
    w
}

fn net_seed(cfg: &ExperimentConfig) -> u64 {
    let net = cfg.network.as_ref().expect("validated");
    net.seed.unwrap_or_else(|| sub_seed(cfg.seed, NET_STREAM))
}

fn init_net(cfg: &ExperimentConfig, cell: &GridCell, data: &Prepared) -> Result<LayerStack, CliError> {
    let net = cfg.network.as_ref().expect("validated");
    let w = widths(cfg, net, cell.depth, data.dim(), data.classes());
    Ok(LayerStack::init(&w, cell.sigma, net.activation, net_seed(cfg))?)
}

fn opt(v: Option<f64>) -> TableCell {
    v.unwrap_or(f64::NAN).into()
}

#[derive(Clone, Debug, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub depth: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub t_half_loss: Option<f64>,
    pub t_align_half: Option<f64>,
    pub final_alignment: Option<f64>,
    pub t_w1_align_half: Option<f64>,
    pub final_loss: f64,
    pub steps: usize,
    pub max_conservation_residual: f64,
    pub monotonicity_violations: usize,
    pub truncated: bool,
    pub compare: Option<CompareReport>,
    pub theory: Option<Value>,
}

fn summary_table(cells: &[CellSummary]) -> Table {
    let mut t = Table::new(&[
        "cell",
        "depth",
        "sigma",
        "gamma",
        "t_half_loss",
        "t_align_half",
        "final_alignment",
        "t_w1_align_half",
        "final_loss",
        "steps",
        "max_conservation",
        "monotonicity_violations",
        "truncated",
        "r2_ntk_initial",
        "r2_ntk_final",
        "r2_integrating_factor",
    ]);
    for c in cells {
        let r2 = |cand: &str| c.compare.as_ref().and_then(|r| r.r2("net", cand));
        t.push(vec![
            c.cell.as_str().into(),
            c.depth.into(),
            c.sigma.into(),
            c.gamma.into(),
            opt(c.t_half_loss),
            opt(c.t_align_half),
            opt(c.final_alignment),
            opt(c.t_w1_align_half),
            c.final_loss.into(),
            c.steps.into(),
            c.max_conservation_residual.into(),
            c.monotonicity_violations.into(),
            usize::from(c.truncated).into(),
            opt(r2("ntk_initial")),
            opt(r2("ntk_final")),
            opt(r2("integrating_factor")),
        ]);
    }
    t
}

/// Train one cell, writing its trajectory (also on divergence) and markers.
fn train_cell(
    cfg: &ExperimentConfig,
    cell: &GridCell,
    data: &Prepared,
    dir: &Path,
    keep_nets: bool,
) -> Result<(TrajectoryLog, CellSummary), CliError> {
    std::fs::create_dir_all(dir)?;
    let net = init_net(cfg, cell, data)?;
    let flow = cfg.flow.as_ref().expect("validated");
    // The alignment demo exists to compare predictors, so it always keeps them.
    let save = cfg.probe.save_artifacts || cfg.kind == Kind::AlignDemo;
    let probe = Probe {
        x_test: if save { data.x_test.clone() } else { None },
        teacher: if cfg.probe.first_layer_alignment { data.teacher.clone() } else { None },
        keep_nets,
    };
    if save && data.x_test.is_none() {
        return Err(CliError::schema("probe.save_artifacts", "needs held-out test points"));
    }
    let log = match train_with(&net, &data.x, &data.y, flow, &probe) {
        Ok(log) => log,
        Err(CoreError::Diverged { time, loss, log }) => {
            log.write_csv(&dir.join("trajectory.csv"))?;
            return Err(CliError::Numerical(format!("{}: loss diverged at t = {time:e} (loss {loss:e})", cell.name())));
        }
        Err(e) => return Err(e.into()),
    };
    log.write_csv(&dir.join("trajectory.csv"))?;
    let markers = phase_markers(&log)?;
    write_json(&dir.join("markers.json"), &markers)?;
    let compare = if save {
        let test = Dataset::new(data.x_test.clone().expect("checked"), data.y_test.clone().expect("paired with x_test"))?;
        write_artifacts(
            dir,
            &Artifacts {
                train: Dataset::new(data.x.clone(), data.y.clone())?,
                test,
                initial: &log.initial_net,
                last: &log.final_net,
                snapshots: &log.snapshots,
                eta: flow.eta,
            },
        )?;
        Some(compare_cell(dir)?)
    } else {
        None
    };
    let summary = CellSummary {
        cell: cell.name(),
        depth: cell.depth,
        sigma: cell.sigma,
        gamma: cell.gamma,
        t_half_loss: markers.t_half_loss,
        t_align_half: markers.t_align_half,
        final_alignment: markers.final_alignment,
        t_w1_align_half: markers.t_w1_align_half,
        final_loss: *log.loss.last().expect("t = 0 is always recorded"),
        steps: log.steps,
        max_conservation_residual: log.max_conservation_residual,
        monotonicity_violations: log.monotonicity_violations,
        truncated: log.truncated,
        compare,
        theory: None,
    };
    Ok((log, summary))
}

fn prepare_by_gamma(cfg: &ExperimentConfig, cells: &[GridCell], base_dir: &Path) -> Result<Vec<(f64, Prepared)>, CliError> {
    let ds = cfg.dataset.as_ref().expect("validated");
    let mut out: Vec<(f64, Prepared)> = Vec::new();
    for c in cells {
        if !out.iter().any(|(g, _)| *g == c.gamma) {
            out.push((c.gamma, prepare(ds, c.gamma, cfg.seed, base_dir)?));
        }
    }
    Ok(out)
}

fn data_for(prepared: &[(f64, Prepared)], gamma: f64) -> &Prepared {
    &prepared.iter().find(|(g, _)| *g == gamma).expect("prepared for every cell").1
}

/// Run one experiment into `out`. Returns the JSON summary it also writes.
pub fn run(cfg: &ExperimentConfig, out: &Path, base_dir: &Path) -> Result<Value, CliError> {
    let summary = match cfg.kind {
        Kind::Simulate | Kind::TheoryCompare | Kind::AlignDemo => run_training(cfg, out, base_dir)?,
        Kind::Sweep => run_sweep(cfg, out, base_dir)?,
        Kind::GenCurves => run_gen_curves(cfg, out)?,
        Kind::ModelKernel => run_model_kernel(cfg, out)?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run_training(cfg: &ExperimentConfig, out: &Path, base_dir: &Path) -> Result<Value, CliError> {
    let cells = expand_cells(cfg);
    let prepared = prepare_by_gamma(cfg, &cells, base_dir)?;
    let theory = cfg.kind == Kind::TheoryCompare;
    let results: Vec<Result<CellSummary, CliError>> = cells
        .par_iter()
        .map(|cell| {
            let data = data_for(&prepared, cell.gamma);
            let dir = out.join("cells").join(cell.name());
            let (log, mut summary) = train_cell(cfg, cell, data, &dir, theory)?;
            if theory {
                summary.theory = Some(theory_overlay(cell, data, &log, &dir)?);
            }
            Ok(summary)
        })
        .collect();
    let summaries: Vec<CellSummary> = results.into_iter().collect::<Result<_, _>>()?;
    summary_table(&summaries).write(&out.join("summary.csv"))?;
    Ok(json!({ "kind": crate::config::kind_name(cfg.kind), "cells": summaries }))
}

/// Per-mode strengths `e_αᵀ W_eff r_α` at each recorded net.
fn mode_strengths(log: &TrajectoryLog, teacher: &DMatrix<f64>, values: &[f64]) -> Result<Vec<Vec<f64>>, CliError> {
    let mut out = vec![Vec::with_capacity(log.nets.len()); values.len()];
    for net in &log.nets {
        let w = net.effective_weights()?;
        for (a, &s) in values.iter().enumerate() {
            let r = teacher.row(a).transpose() / s;
            out[a].push((&w * r)[a]);
        }
    }
    Ok(out)
}

/// Two-layer `(q_α, r_α)`: `q = ½(|W¹r|² + |a_α|²)`, `r = a_α·W¹r`.
fn two_layer_qr_measured(net: &LayerStack, r: &DVector<f64>, a: usize) -> (f64, f64) {
    let wr = &net.weights[0] * r;
    let row = net.weights[1].row(a).transpose();
    (0.5 * (wr.norm_squared() + row.norm_squared()), row.dot(&wr))
}

/// Initial strength `c₀` for which `ċ = k·c^{2−2/L}(s − c)` reaches `s/2` at
/// `t_half`, by bisection in `ln c₀`.
pub fn calibrate_c0(depth: usize, s: f64, t_half: f64, rate_factor: f64) -> Result<Option<f64>, CliError> {
    let time = |c0: f64| deep_time_to_reach(&DeepTheoryParams { depth, s, c0 }, s / 2.0, rate_factor);
    let (mut lo, mut hi) = ((1e-300f64).ln(), (s / 2.0).ln());
    if time(lo.exp())? < t_half {
        return Ok(None);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if time(mid.exp())? > t_half {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(Some((0.5 * (lo + hi)).exp()))
}

#[derive(Clone, Debug, Serialize)]
struct ModeRow {
    mode: usize,
    s: f64,
    c0_calibrated: Option<f64>,
    t_half_sim: Option<f64>,
    t_half_exact: Option<f64>,
    t_alpha_displayed: Option<f64>,
}

fn theory_overlay(cell: &GridCell, data: &Prepared, log: &TrajectoryLog, dir: &Path) -> Result<Value, CliError> {
    let teacher = data.teacher.as_ref().expect("validated: synthetic teacher");
    let values = &data.teacher_values;
    let strengths = mode_strengths(log, teacher, values)?;
    let times = &log.times;
    let mut curves = Vec::new();
    let mut modes = Vec::new();
    let mut table = Table::new(&["mode", "s", "c0_calibrated", "t_half_sim", "t_half_exact", "t_alpha_displayed"]);
    for (a, &s) in values.iter().enumerate() {
        let m = &strengths[a];
        let t_half_sim = first_crossing_up(times, m, s / 2.0);
        curves.push(TheoryCurve {
            variant: format!("c_sim_m{a}"),
            params: json!({ "mode": a, "s": s }),
            times: times.clone(),
            values: m.clone(),
        });
        let mut row = ModeRow {
            mode: a,
            s,
            c0_calibrated: None,
            t_half_sim,
            t_half_exact: None,
            t_alpha_displayed: None,
        };
        if cell.depth == 2 {
            let r = teacher.row(a).transpose() / s;
            let (q0, r0) = two_layer_qr_measured(&log.nets[0], &r, a);
            // The growing combination q + r starts at q₀ + r₀.
            let q0_cal = q0 + r0;
            // q(t) and the sigmoid u²(t) share a transition when u₀² = q₀/2.
            let u0sq = q0_cal / 2.0;
            let p = TwoLayerTheoryParams { s, q0: q0_cal, r0: 0.0, u0sq };
            let (qs, rs): (Vec<f64>, Vec<f64>) = log.nets.iter().map(|n| two_layer_qr_measured(n, &r, a)).unzip();
            let (qt, rt): (Vec<f64>, Vec<f64>) = times.iter().map(|&t| two_layer_qr(t, &p)).unzip();
            for (name, v) in [("q_sim", qs), ("r_sim", rs), ("q_theory", qt), ("r_theory", rt)] {
                curves.push(TheoryCurve {
                    variant: format!("{name}_m{a}"),
                    params: json!({ "mode": a, "s": s, "q0_calibrated": q0_cal }),
                    times: times.clone(),
                    values: v,
                });
            }
            let sched = mode_schedule(&[s], u0sq)?;
            row.c0_calibrated = Some(q0_cal);
            row.t_half_exact = two_layer_half_time(s, u0sq);
            row.t_alpha_displayed = Some(sched.times[0]);
        } else if let Some(th) = t_half_sim {
            for (variant, k) in [("c_ode", 1.0), ("c_flow", cell.depth as f64)] {
                if let Some(c0) = calibrate_c0(cell.depth, s, th, k)? {
                    let p = DeepTheoryParams { depth: cell.depth, s, c0 };
                    let v = if k == 1.0 { deep_c_curve(times, &p)? } else { balanced_flow_c_curve(times, &p)? };
                    curves.push(TheoryCurve {
                        variant: format!("{variant}_m{a}"),
                        params: json!({ "mode": a, "s": s, "c0_calibrated": c0, "rate_factor": k }),
                        times: times.clone(),
                        values: v,
                    });
                    if k == 1.0 {
                        row.c0_calibrated = Some(c0);
                    }
                }
            }
            row.t_half_exact = Some(th);
        }
        table.push(vec![
            a.into(),
            s.into(),
            opt(row.c0_calibrated),
            opt(row.t_half_sim),
            opt(row.t_half_exact),
            opt(row.t_alpha_displayed),
        ]);
        modes.push(row);
    }
    write_theory_curves(&dir.join("theory.csv"), &dir.join("theory.json"), &curves)?;
    table.write(&dir.join("modes.csv"))?;
    Ok(json!({ "modes": modes }))
}

fn run_sweep(cfg: &ExperimentConfig, out: &Path, base_dir: &Path) -> Result<Value, CliError> {
    let measure = cfg.sweep.as_ref().expect("validated").measure;
    let cells = expand_cells(cfg);
    let prepared = prepare_by_gamma(cfg, &cells, base_dir)?;
    match measure {
        Measure::Laziness => {
            let eta = cfg.flow.as_ref().map(|f| f.eta).unwrap_or(1.0);
            let ratios: Vec<Result<f64, CliError>> = cells
                .par_iter()
                .map(|cell| {
                    let data = data_for(&prepared, cell.gamma);
                    let net = init_net(cfg, cell, data)?;
                    let probe = match &data.x_test {
                        Some(t) => t.column(0).into_owned(),
                        None => data.x.column(0).into_owned(),
                    };
                    Ok(laziness_ratio(&net, &data.x, &data.y, &probe, eta)?)
                })
                .collect();
            let ratios: Vec<f64> = ratios.into_iter().collect::<Result<_, _>>()?;
            let mut table = Table::new(&["depth", "sigma", "gamma", "ratio"]);
            for (c, r) in cells.iter().zip(&ratios) {
                table.push(vec![c.depth.into(), c.sigma.into(), c.gamma.into(), (*r).into()]);
            }
            table.write(&out.join("laziness.csv"))?;
            let mut slopes = Vec::new();
            let mut depths: Vec<usize> = cells.iter().map(|c| c.depth).collect();
            depths.dedup();
            for depth in depths {
                let (xs, ys): (Vec<f64>, Vec<f64>) = cells
                    .iter()
                    .zip(&ratios)
                    .filter(|(c, _)| c.depth == depth)
                    .map(|(c, r)| (c.sigma.ln(), r.ln()))
                    .unzip();
                if xs.len() >= 2 {
                    let (slope, _, r2) = linear_fit(&xs, &ys);
                    slopes.push(json!({ "depth": depth, "slope": slope, "r2": r2 }));
                }
            }
            Ok(json!({ "kind": "sweep", "measure": "laziness", "slopes": slopes }))
        }
        Measure::MinNorm => {
            let flow = cfg.flow.as_ref().expect("validated");
            let rows: Vec<Result<(f64, f64, usize), CliError>> = cells
                .par_iter()
                .map(|cell| {
                    let data = data_for(&prepared, cell.gamma);
                    let net = init_net(cfg, cell, data)?;
                    let log = train(&net, &data.x, &data.y, flow)?;
                    let w = log.final_net.effective_weights()?;
                    let mn = min_norm_solution(&data.x, &data.y)?;
                    Ok((*log.loss.last().expect("recorded"), rel_fro(&w, &mn.weights), log.steps))
                })
                .collect();
            let rows: Vec<(f64, f64, usize)> = rows.into_iter().collect::<Result<_, _>>()?;
            let mut table = Table::new(&["depth", "sigma", "gamma", "final_loss", "rel_error", "steps"]);
            for (c, (loss, err, steps)) in cells.iter().zip(&rows) {
                table.push(vec![c.depth.into(), c.sigma.into(), c.gamma.into(), (*loss).into(), (*err).into(), (*steps).into()]);
            }
            table.write(&out.join("minnorm.csv"))?;
            let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
            Ok(json!({ "kind": "sweep", "measure": "min-norm", "max_rel_error": worst }))
        }
    }
}

fn run_gen_curves(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let lc = cfg.learning_curves.as_ref().expect("validated");
    let grid = SweepGrid {
        a: lc.a.clone(),
        alpha: lc.alpha.clone(),
        p: lc.p.clone(),
        d: lc.dim,
        lambda: lc.lambda,
        trials: lc.trials,
        seed: cfg.seed,
    };
    if grid.cells() == 0 {
        return Err(CliError::schema("learning_curves", "grid is empty"));
    }
    let rows: Vec<_> = (0..grid.cells()).into_par_iter().map(|i| grid.cell(i)).collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    sweep_table(&rows).write(&out.join("transfer.csv"))?;
    let max_z = |theory: fn(&SweepRow) -> f64| {
        rows.iter()
            .filter_map(|r| r.mc.map(|m| ((theory(r) - m.mean) / m.stderr).abs()))
            .fold(0.0, f64::max)
    };
    Ok(json!({
        "kind": "gen-curves",
        "cells": rows.len(),
        "max_abs_z_kappa2": max_z(|r| r.eg_kappa2),
        "max_abs_z_literal": max_z(|r| r.eg_literal),
    }))
}

/// Random PSD kernel over `n + q` points from Gaussian features, scaled to
/// unit operator norm on the training block.
fn random_kernel(n: usize, q: usize, rng: &mut ChaCha8Rng) -> KernelPair {
    let m = 2 * (n + q);
    let f = standard_normal_matrix(m, n + q, rng);
    let k = f.transpose() * f / m as f64;
    let gram = k.view((0, 0), (n, n)).into_owned();
    let scale = op_norm(&gram);
    KernelPair {
        gram: gram / scale,
        test: k.view((n, 0), (q, n)).into_owned() / scale,
    }
}

fn run_model_kernel(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let mk = cfg.model_kernel.as_ref().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, KERNEL_STREAM));
    let k0_path: Vec<KernelPair> = (0..mk.knots).map(|_| random_kernel(mk.n_train, mk.n_test, &mut rng)).collect();
    let k_inf = random_kernel(mk.n_train, mk.n_test, &mut rng);
    let y = standard_normal_matrix(mk.n_train, 1, &mut rng).column(0).into_owned();
    let f0_train = DVector::zeros(mk.n_train);
    let f0_test = DVector::zeros(mk.n_test);
    let results: Vec<_> = mk
        .epsilon
        .par_iter()
        .map(|&epsilon| {
            let spec = ModelKernelSpec {
                epsilon,
                tau: mk.tau,
                k0_path: k0_path.clone(),
                k_inf: k_inf.clone(),
                growth_rate: mk.growth_rate,
                steps: mk.steps,
            };
            model_kernel_run(&spec, &y, &f0_train, &f0_test)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut table = Table::new(&["epsilon", "gap", "phi_tau_deviation", "bound", "max_phi_norm"]);
    for (e, r) in mk.epsilon.iter().zip(&results) {
        table.push(vec![(*e).into(), r.gap.into(), r.phi_tau_deviation.into(), r.bound.into(), r.max_phi_norm.into()]);
    }
    table.write(&out.join("model_kernel.csv"))?;
    let slope = if results.len() >= 2 {
        let xs: Vec<f64> = mk.epsilon.iter().map(|e| e.ln()).collect();
        let ys: Vec<f64> = results.iter().map(|r| r.gap.ln()).collect();
        Some(linear_fit(&xs, &ys).0)
    } else {
        None
    };
    let bound_holds = results.iter().all(|r| r.phi_tau_deviation <= r.bound);
    Ok(json!({ "kind": "model-kernel", "gap_slope": slope, "bound_holds": bound_holds }))
}
