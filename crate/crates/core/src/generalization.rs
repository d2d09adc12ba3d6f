//! Learning curves for kernel regression with the spiked linear kernel
//! `K(x, x') = xᵀ(Aββᵀ + I)x'` on isotropic Gaussian inputs, against a
//! Monte-Carlo regression oracle.
//!
//! In the eigenbasis of the input distribution the kernel has one mode at
//! `1 + A` (along `β`) and `D − 1` modes at `1`. A target `w·x` with
//! `w = αβ + √(1−α²) w_⊥` puts weight `α²` on the spike and `1 − α²` on the
//! bulk.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::standard_normal_matrix;
use crate::error::{invalid, Error, Result};
use crate::io::Table;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpikedKernelTask {
    pub a: f64,
    pub alpha: f64,
    pub d: usize,
    pub lambda: f64,
}

impl SpikedKernelTask {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) || !(self.alpha.abs() <= 1.0) || self.d < 2 || !(self.lambda >= 0.0) {
            return invalid("spiked task needs A ≥ 0, |α| ≤ 1, D ≥ 2 and λ ≥ 0");
        }
        Ok(())
    }

    /// `Σ_k λ_k / (λ_k P + κ)` over the spike and the bulk.
    fn mode_sum(&self, p: f64, kappa: f64) -> f64 {
        let spike = 1.0 + self.a;
        spike / (spike * p + kappa) + (self.d as f64 - 1.0) / (p + kappa)
    }

    fn gamma(&self, p: f64, kappa: f64) -> f64 {
        let spike = 1.0 + self.a;
        p * (spike * spike / (spike * p + kappa).powi(2) + (self.d as f64 - 1.0) / (p + kappa).powi(2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KappaSolution {
    pub kappa: f64,
    pub gamma_eff: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Positive root of `κ = λ + κ Σ_k λ_k/(λ_k P + κ)`.
///
/// `h(κ) = κ − λ − κ Σ_k λ_k/(λ_k P + κ)` is negative at `κ = λ` (or just
/// above zero when ridgeless and `P < D`) and non-negative at `λ + D + A`,
/// so geometric bisection on that bracket finds the unique root.
pub fn solve_kappa(p: usize, task: &SpikedKernelTask) -> Result<KappaSolution> {
    task.validate()?;
    let pf = p as f64;
    let h = |k: f64| k - task.lambda - k * task.mode_sum(pf, k);
    let mut lo = task.lambda.max(1e-300);
    let mut hi = task.lambda + task.d as f64 + task.a;
    if p == 0 {
        return Ok(KappaSolution {
            kappa: hi,
            gamma_eff: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    let mut iterations = 0;
    let mut converged = false;
    if h(lo) >= 0.0 {
        // Ridgeless with P ≥ D: the root is at the lower edge.
        hi = lo;
        converged = true;
    }
    while !converged && iterations < 200 {
        iterations += 1;
        let mid = (lo * hi).sqrt();
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            converged = true;
        }
    }
    let kappa = 0.5 * (lo + hi);
    if !converged {
        return Err(Error::Numerical(format!("κ bisection did not converge (bracket [{lo:e}, {hi:e}])")));
    }
    Ok(KappaSolution {
        kappa,
        gamma_eff: task.gamma(pf, kappa),
        converged,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GenErrorTheory {
    /// `1/(1−γ) [α²/((1+A)P+κ)² + (1−α²)/(P+κ)²]`.
    pub literal: f64,
    /// The same bracket weighted by `κ²`; equals 1 at `P = 0`.
    pub kappa2: f64,
    pub kappa: KappaSolution,
}

pub fn gen_error_theory(p: usize, task: &SpikedKernelTask) -> Result<GenErrorTheory> {
    let k = solve_kappa(p, task)?;
    if k.gamma_eff >= 1.0 {
        return Err(Error::Numerical(format!("γ = {} ≥ 1 at P = {p}", k.gamma_eff)));
    }
    let pf = p as f64;
    let a2 = task.alpha * task.alpha;
    let bracket = a2 / ((1.0 + task.a) * pf + k.kappa).powi(2) + (1.0 - a2) / (pf + k.kappa).powi(2);
    let literal = bracket / (1.0 - k.gamma_eff);
    Ok(GenErrorTheory {
        literal,
        kappa2: literal * k.kappa * k.kappa,
        kappa: k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Per-cell random stream: seeded by `base`, with the cell index as the
/// ChaCha stream id so cells are independent and order-free.
pub fn cell_rng(base: u64, cell: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(cell);
    rng
}

/// Monte-Carlo generalization error. Each trial draws `P` samples and a
/// fresh `w_⊥`, fits ridge regression with the spiked kernel, and takes the
/// exact test error `|ŵ − w|²` over isotropic test inputs.
pub fn mc_gen_error(p: usize, task: &SpikedKernelTask, trials: usize, seed: u64) -> Result<McEstimate> {
    mc_gen_error_with(p, task, trials, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn mc_gen_error_with(p: usize, task: &SpikedKernelTask, trials: usize, rng: &mut ChaCha8Rng) -> Result<McEstimate> {
    task.validate()?;
    if trials == 0 {
        return invalid("need at least one trial");
    }
    let d = task.d;
    let mut beta = DVector::zeros(d);
    beta[0] = 1.0;
    let m = &beta * beta.transpose() * task.a + DMatrix::identity(d, d);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut perp = standard_normal_matrix(d, 1, rng).column(0).into_owned();
        perp[0] = 0.0;
        let perp = perp.normalize();
        let w = &beta * task.alpha + perp * (1.0 - task.alpha * task.alpha).max(0.0).sqrt();
        if p == 0 {
            errors.push(w.norm_squared());
            continue;
        }
        let x = standard_normal_matrix(d, p, rng);
        let y = x.transpose() * &w;
        let gram = x.transpose() * &m * &x + DMatrix::identity(p, p) * task.lambda;
        let coef = match gram.clone().cholesky() {
            Some(c) => c.solve(&y),
            None => gram
                .lu()
                .solve(&y)
                .ok_or_else(|| Error::Numerical("singular kernel system in Monte-Carlo trial".into()))?,
        };
        let w_hat = &m * (&x * coef);
        errors.push((w_hat - &w).norm_squared());
    }
    let n = trials as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = if trials > 1 {
        errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        stderr: (var / n).sqrt(),
        trials,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepGrid {
    pub a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub p: Vec<usize>,
    pub d: usize,
    pub lambda: f64,
    /// Zero skips the Monte-Carlo columns.
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub a: f64,
    pub alpha: f64,
    pub p: usize,
    pub lambda: f64,
    pub eg_literal: f64,
    pub eg_kappa2: f64,
    pub mc: Option<McEstimate>,
    pub kappa: f64,
    pub gamma: f64,
}

impl SweepGrid {
    pub fn cells(&self) -> usize {
        self.a.len() * self.alpha.len() * self.p.len()
    }

    /// Cell `index` in `(A, α, P)` row-major order.
    pub fn cell(&self, index: usize) -> Result<SweepRow> {
        let np = self.p.len();
        let nal = self.alpha.len();
        let (ia, rest) = (index / (nal * np), index % (nal * np));
        let (ial, ip) = (rest / np, rest % np);
        let task = SpikedKernelTask {
            a: self.a[ia],
            alpha: self.alpha[ial],
            d: self.d,
            lambda: self.lambda,
        };
        let p = self.p[ip];
        let th = gen_error_theory(p, &task)?;
        let mc = if self.trials > 0 {
            Some(mc_gen_error_with(p, &task, self.trials, &mut cell_rng(self.seed, index as u64))?)
        } else {
            None
        };
        Ok(SweepRow {
            a: task.a,
            alpha: task.alpha,
            p,
            lambda: task.lambda,
            eg_literal: th.literal,
            eg_kappa2: th.kappa2,
            mc,
            kappa: th.kappa.kappa,
            gamma: th.kappa.gamma_eff,
        })
    }
}

pub fn transfer_sweep(grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    if grid.cells() == 0 {
        return invalid("sweep grid is empty");
    }
    (0..grid.cells()).map(|i| grid.cell(i)).collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&[
        "A",
        "alpha",
        "P",
        "lambda",
        "Eg_theory_literal",
        "Eg_theory_kappa2",
        "Eg_mc_mean",
        "Eg_mc_stderr",
        "kappa",
        "gamma",
    ]);
    for r in rows {
        let (m, s) = r.mc.map(|m| (m.mean, m.stderr)).unwrap_or((f64::NAN, f64::NAN));
        t.push(vec![
            r.a.into(),
            r.alpha.into(),
            r.p.into(),
            r.lambda.into(),
            r.eg_literal.into(),
            r.eg_kappa2.into(),
            m.into(),
            s.into(),
            r.kappa.into(),
            r.gamma.into(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(a: f64, alpha: f64, d: usize, lambda: f64) -> SpikedKernelTask {
        SpikedKernelTask { a, alpha, d, lambda }
    }

    #[test]
    fn kappa_at_zero_samples() {
        let t = task(2.0, 0.5, 10, 1e-3);
        assert!((solve_kappa(0, &t).unwrap().kappa - (1e-3 + 12.0)).abs() < 1e-12);
    }

    #[test]
    fn kappa_ridge_dominated() {
        let t = task(1.0, 0.5, 5, 1e6);
        let k = solve_kappa(10, &t).unwrap().kappa;
        assert!((k / 1e6 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn kappa_matches_quadratic_root() {
        // A = 0, D = 2, P = 1, λ = 0: κ = 2κ/(1+κ) → κ = 1.
        let t = task(0.0, 0.0, 2, 0.0);
        let k = solve_kappa(1, &t).unwrap();
        assert!((k.kappa - 1.0).abs() < 1e-10);
        // λ > 0: κ² + (1 − λ − 2)κ − λ = 0 → κ = ((1+λ) + √((1+λ)² + 4λ))/2.
        let lam: f64 = 0.3;
        let t = task(0.0, 0.0, 2, lam);
        let want = ((1.0 + lam) + ((1.0 + lam).powi(2) + 4.0 * lam).sqrt()) / 2.0;
        assert!((solve_kappa(1, &t).unwrap().kappa - want).abs() < 1e-10);
    }

    #[test]
    fn kappa_residual_and_comparative_statics() {
        let mut prev = f64::INFINITY;
        for p in 1..40 {
            let t = task(1.5, 0.3, 20, 1e-6);
            let k = solve_kappa(p, &t).unwrap();
            let resid = (k.kappa - t.lambda - k.kappa * t.mode_sum(p as f64, k.kappa)).abs() / k.kappa;
            assert!(resid < 1e-10, "P={p} resid {resid}");
            assert!(k.kappa < prev);
            prev = k.kappa;
        }
        let k1 = solve_kappa(5, &task(1.0, 0.0, 10, 1e-3)).unwrap().kappa;
        let k2 = solve_kappa(5, &task(1.0, 0.0, 10, 1e-2)).unwrap().kappa;
        assert!(k2 > k1);
    }

    #[test]
    fn weighted_variant_is_one_at_zero_samples() {
        let g = gen_error_theory(0, &task(3.0, 0.4, 10, 1e-6)).unwrap();
        assert!((g.kappa2 - 1.0).abs() < 1e-12);
        assert!((g.literal * (1e-6 + 13.0f64).powi(2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn error_ordering_in_alpha_and_a() {
        for p in [5usize, 10, 20] {
            let e = |a: f64, al: f64| gen_error_theory(p, &task(a, al, 30, 1e-6)).unwrap().kappa2;
            assert!(e(1.0, 1.0) < e(1.0, 0.5) && e(1.0, 0.5) < e(1.0, 0.0));
            assert!((e(1.0, -1.0) - e(1.0, 1.0)).abs() < 1e-15);
            assert!(e(2.0, 1.0) < e(1.0, 1.0) && e(1.0, 1.0) < e(0.5, 1.0));
        }
    }

    #[test]
    fn monte_carlo_limits() {
        let zero = mc_gen_error(0, &task(1.0, 0.6, 10, 1e-6), 50, 1).unwrap();
        assert!((zero.mean - 1.0).abs() < 1e-12);
        let spiked = mc_gen_error(2, &task(1e4, 1.0, 10, 1e-6), 200, 2).unwrap();
        assert!(spiked.mean < 0.01, "{}", spiked.mean);
        let small = mc_gen_error(5, &task(1.0, 0.5, 10, 1e-6), 400, 3).unwrap();
        let large = mc_gen_error(5, &task(1.0, 0.5, 10, 1e-6), 1600, 3).unwrap();
        let r = (small.stderr / large.stderr).powi(2);
        assert!((r - 4.0).abs() < 1.0, "stderr² ratio {r}");
    }

    #[test]
    fn weighted_theory_matches_monte_carlo() {
        for p in [5usize, 10, 20] {
            let t = task(5.0, 0.75, 40, 1e-6);
            let th = gen_error_theory(p, &t).unwrap().kappa2;
            let mc = mc_gen_error(p, &t, 4000, 10 + p as u64).unwrap();
            assert!((th - mc.mean).abs() < 0.05 * mc.mean, "P={p} theory {th} mc {}", mc.mean);
        }
    }

    #[test]
    fn sweep_rows_and_table() {
        let grid = SweepGrid {
            a: vec![1.0],
            alpha: vec![0.5],
            p: vec![4],
            d: 10,
            lambda: 1e-6,
            trials: 0,
            seed: 0,
        };
        let rows = transfer_sweep(&grid).unwrap();
        assert_eq!(rows.len(), 1);
        let th = gen_error_theory(4, &task(1.0, 0.5, 10, 1e-6)).unwrap();
        assert_eq!(rows[0].eg_kappa2, th.kappa2);
        let csv = sweep_table(&rows).to_csv_string();
        assert!(csv.starts_with("A,alpha,P,lambda,Eg_theory_literal,Eg_theory_kappa2,Eg_mc_mean,Eg_mc_stderr,kappa,gamma\n"));
        let empty = SweepGrid { a: vec![], ..grid };
        assert!(transfer_sweep(&empty).is_err());
    }

    #[test]
    fn fig_structure_minimum_at_large_a_and_alpha() {
        let grid = SweepGrid {
            a: vec![0.0, 1.0, 4.0],
            alpha: vec![0.0, 0.5, 1.0],
            p: vec![10],
            d: 30,
            lambda: 1e-6,
            trials: 0,
            seed: 0,
        };
        let rows = transfer_sweep(&grid).unwrap();
        let best = rows.iter().min_by(|x, y| x.eg_kappa2.total_cmp(&y.eg_kappa2)).unwrap();
        assert_eq!((best.a, best.alpha), (4.0, 1.0));
    }
}
