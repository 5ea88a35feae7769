//! Hyperparameter selection: candidate grids, contiguous folds, local CV
//! for the initial lasso, CV for nodewise regressions, distributed CV for
//! the surrogate steps, and the closed-form rate and round-count calculators.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, DataBlock, LossFamily};
use crate::nodewise::column_problem;
use crate::numeric::{dot, log_spaced_desc, mean_vectors, Matrix};
use crate::solver::{lambda_max, solve_from, PenalizedProblem, QuadraticForm, SolverConfig};

pub const DEFAULT_GRID_LEN: usize = 50;
/// Smallest grid value as a fraction of the largest.
pub const DEFAULT_GRID_RATIO: f64 = 0.01;

/// Strictly descending positive candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("lambda grid is empty"));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("lambda grid values must be positive and finite"));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("lambda grid must be strictly descending"));
        }
        Ok(Self { values })
    }

    /// `count` log-spaced values from `max` down to `max·ratio`. A
    /// non-positive `max` (nothing to penalise) collapses to a tiny grid.
    pub fn log_spaced(max: f64, ratio: f64, count: usize) -> Result<Self> {
        if count == 0 || !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid("grid needs count ≥ 1 and ratio in (0,1)"));
        }
        let top = if max > 0.0 && max.is_finite() { max } else { 1e-12 };
        Self::new(log_spaced_desc(top, ratio, count))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Outcome of a CV search over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSelection {
    pub lambda: f64,
    pub index: usize,
    /// Fold-averaged validation loss per grid value.
    pub scores: Vec<f64>,
}

/// `k` contiguous blocks covering `0..n`, sizes differing by at most one,
/// larger blocks first.
pub fn fold_partition(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} items cannot fill {k} folds")));
    }
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    Ok((0..k)
        .map(|q| {
            let len = base + usize::from(q < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// First index of the minimum; on a descending grid this prefers the larger λ.
fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

fn select(grid: &LambdaGrid, per_fold: Vec<Vec<f64>>) -> CvSelection {
    let scores = mean_vectors(&per_fold);
    let index = argmin_first(&scores);
    CvSelection {
        lambda: grid.values()[index],
        index,
        scores,
    }
}

/// Sufficient statistics of a block of linear rows.
struct LinearStats {
    gram: Matrix,
    xty: Vec<f64>,
    yty: f64,
    rows: usize,
}

impl LinearStats {
    fn of(x: &Matrix, y: &[f64]) -> Self {
        Self {
            gram: x.gram(),
            xty: x.t_matvec(y),
            yty: dot(y, y),
            rows: y.len(),
        }
    }

    fn minus(&self, other: &Self) -> Self {
        let xty = self.xty.iter().zip(&other.xty).map(|(a, b)| a - b).collect();
        Self {
            gram: self.gram.sub(&other.gram),
            xty,
            yty: self.yty - other.yty,
            rows: self.rows - other.rows,
        }
    }

    /// Averaged squared-error loss as a quadratic form.
    fn averaged(&self) -> QuadraticForm {
        let inv = 1.0 / self.rows as f64;
        QuadraticForm {
            q: self.gram.scaled(inv),
            b: self.xty.iter().map(|v| v * inv).collect(),
            offset: 0.5 * self.yty * inv,
        }
    }
}

/// Training and held-out versions of the master loss for one fold.
enum FoldLoss {
    Quadratic { train: QuadraticForm, test: QuadraticForm },
    Glm { family: LossFamily, train: DataBlock, test: DataBlock },
}

impl FoldLoss {
    fn build(block: &DataBlock, family: LossFamily, folds: &[Range<usize>]) -> Vec<FoldLoss> {
        match family {
            LossFamily::Linear => {
                let parts: Vec<LinearStats> = folds
                    .par_iter()
                    .map(|r| LinearStats::of(&block.x.row_block(r.start, r.end), &block.y[r.clone()]))
                    .collect();
                let total = LinearStats::of(&block.x, &block.y);
                parts
                    .into_iter()
                    .map(|test| FoldLoss::Quadratic {
                        train: total.minus(&test).averaged(),
                        test: test.averaged(),
                    })
                    .collect()
            }
            LossFamily::Logistic => folds
                .iter()
                .map(|r| {
                    let keep: Vec<usize> = (0..block.n_rows()).filter(|i| !r.contains(i)).collect();
                    FoldLoss::Glm {
                        family,
                        train: block.rows(&keep),
                        test: block.row_range(r.start, r.end),
                    }
                })
                .collect(),
        }
    }

    fn train_problem(&self, lambda: f64) -> PenalizedProblem<'_> {
        match self {
            FoldLoss::Quadratic { train, .. } => PenalizedProblem::quadratic(train, lambda),
            FoldLoss::Glm { family, train, .. } => PenalizedProblem::glm(*family, train, lambda),
        }
    }

    fn test_value(&self, theta: &[f64]) -> f64 {
        match self {
            FoldLoss::Quadratic { test, .. } => test.value(theta),
            FoldLoss::Glm { family, test, .. } => {
                glm::loss_value(*family, test, theta).expect("fold dimensions agree")
            }
        }
    }
}

/// Solves along a descending grid with warm starts and scores each fit.
fn score_path(
    base: PenalizedProblem,
    grid: &LambdaGrid,
    config: &SolverConfig,
    score: impl Fn(&[f64]) -> f64,
) -> Result<Vec<f64>> {
    let mut start = vec![0.0; base.dim()];
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid.values() {
        let problem = base.clone().with_lambda(lambda);
        let report = solve_from(&problem, config, &start)?;
        out.push(score(&report.theta_hat));
        start = report.theta_hat;
    }
    Ok(out)
}

fn full_mask(d: usize, mask: Option<&[bool]>) -> Result<Vec<bool>> {
    match mask {
        None => Ok(vec![true; d]),
        Some(m) if m.len() == d => Ok(m.to_vec()),
        Some(m) => Err(Error::DimensionMismatch {
            expected: d,
            got: m.len(),
        }),
    }
}

/// Default grid for the plain lasso on `block`.
pub fn local_grid(block: &DataBlock, family: LossFamily, mask: Option<&[bool]>) -> Result<LambdaGrid> {
    let problem = PenalizedProblem::glm(family, block, 0.0).with_mask(full_mask(block.dim(), mask)?);
    LambdaGrid::log_spaced(lambda_max(&problem)?, DEFAULT_GRID_RATIO, DEFAULT_GRID_LEN)
}

/// K-fold CV of the plain lasso on one machine's data, scored by the
/// unpenalised held-out loss.
pub fn local_cv(
    block: &DataBlock,
    family: LossFamily,
    grid: &LambdaGrid,
    folds: usize,
    mask: Option<&[bool]>,
    config: &SolverConfig,
) -> Result<CvSelection> {
    let mask = full_mask(block.dim(), mask)?;
    let ranges = fold_partition(block.n_rows(), folds)?;
    let losses = FoldLoss::build(block, family, &ranges);
    let per_fold = losses
        .par_iter()
        .map(|fl| {
            let base = fl.train_problem(0.0).with_mask(mask.clone());
            score_path(base, grid, config, |th| fl.test_value(th))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select(grid, per_fold))
}

/// How nodewise penalties are chosen from per-column CV picks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodewiseMode {
    /// Cross-validate the first `columns` regressions and give every column
    /// the mean of their picks.
    Average { columns: usize },
    /// Cross-validate every column separately.
    PerColumn,
}

/// Grid for nodewise column `l`: `max_{j≠l} |M_lj|` down by [`DEFAULT_GRID_RATIO`].
fn nodewise_grid(m_hat: &Matrix, l: usize, count: usize) -> Result<LambdaGrid> {
    let top = (0..m_hat.cols())
        .filter(|&j| j != l)
        .fold(0.0_f64, |m, j| m.max(m_hat.get(l, j).abs()));
    LambdaGrid::log_spaced(top, DEFAULT_GRID_RATIO, count)
}

/// CV for the nodewise regressions on the weighted design `xw` (rows of
/// `√g''·x`, so that `xwᵀxw/n` is the Hessian). Returns one λ per column.
pub fn nodewise_cv(
    xw: &Matrix,
    folds: usize,
    grid_len: usize,
    mode: NodewiseMode,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    let (n, d) = (xw.rows(), xw.cols());
    if d < 2 {
        return Ok(vec![0.0; d]);
    }
    let ranges = fold_partition(n, folds)?;
    let total = xw.gram();
    let fold_grams: Vec<Matrix> = ranges
        .par_iter()
        .map(|r| xw.row_block(r.start, r.end).gram())
        .collect();
    let m_hat = total.scaled(1.0 / n as f64);
    let splits: Vec<(Matrix, Matrix)> = ranges
        .iter()
        .zip(&fold_grams)
        .map(|(r, g)| {
            let train = total.sub(g).scaled(1.0 / (n - r.len()) as f64);
            (train, g.scaled(1.0 / r.len() as f64))
        })
        .collect();

    let columns: Vec<usize> = match mode {
        NodewiseMode::Average { columns } => (0..columns.clamp(1, d)).collect(),
        NodewiseMode::PerColumn => (0..d).collect(),
    };
    let picks = columns
        .par_iter()
        .map(|&l| {
            let grid = nodewise_grid(&m_hat, l, grid_len)?;
            let per_fold = splits
                .iter()
                .map(|(train, test)| {
                    let tr = column_problem(train, l);
                    let te = column_problem(test, l);
                    score_path(PenalizedProblem::quadratic(&tr, 0.0), &grid, config, |g| te.value(g))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(select(&grid, per_fold).lambda)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(match mode {
        NodewiseMode::Average { .. } => {
            let mean = picks.iter().sum::<f64>() / picks.len() as f64;
            vec![mean; d]
        }
        NodewiseMode::PerColumn => picks,
    })
}

/// Grid for a surrogate step: from the λ that zeroes the tilted problem.
pub fn surrogate_grid(
    master: &DataBlock,
    family: LossFamily,
    tilt: &[f64],
    mask: Option<&[bool]>,
) -> Result<LambdaGrid> {
    let problem = PenalizedProblem::glm(family, master, 0.0)
        .with_tilt(tilt.to_vec())
        .with_mask(full_mask(master.dim(), mask)?);
    LambdaGrid::log_spaced(lambda_max(&problem)?, DEFAULT_GRID_RATIO, DEFAULT_GRID_LEN)
}

/// Distributed K-fold CV for the surrogate step at `theta_prev`. Master rows
/// and the `k − 1` worker gradients are both split into contiguous folds;
/// only data already on the master is touched.
#[allow(clippy::too_many_arguments)]
pub fn distributed_cv(
    master: &DataBlock,
    family: LossFamily,
    worker_grads: &[Vec<f64>],
    theta_prev: &[f64],
    grid: &LambdaGrid,
    folds: usize,
    mask: Option<&[bool]>,
    config: &SolverConfig,
) -> Result<CvSelection> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if worker_grads.len() < folds {
        return Err(Error::TooFewWorkerGradients {
            available: worker_grads.len(),
            folds,
        });
    }
    let d = master.dim();
    let mask = full_mask(d, mask)?;
    let row_folds = fold_partition(master.n_rows(), folds)?;
    let grad_folds = fold_partition(worker_grads.len(), folds)?;
    let samples = glm::per_sample_grads(family, master, theta_prev)?;
    let losses = FoldLoss::build(master, family, &row_folds);

    let row_mean = |rows: &mut dyn Iterator<Item = usize>| {
        let mut acc = vec![0.0; d];
        let mut count = 0usize;
        for i in rows {
            crate::numeric::axpy(1.0, samples.row(i), &mut acc);
            count += 1;
        }
        acc.iter_mut().for_each(|v| *v /= count as f64);
        acc
    };
    // g₁ − Avg({g₁} ∪ G)
    let tilt_of = |g1: Vec<f64>, others: Vec<&Vec<f64>>| {
        let mut all = vec![g1.clone()];
        all.extend(others.into_iter().cloned());
        let gbar = mean_vectors(&all);
        g1.iter().zip(&gbar).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };

    let per_fold = (0..folds)
        .into_par_iter()
        .map(|q| {
            let rows = &row_folds[q];
            let grads = &grad_folds[q];
            let n = master.n_rows();
            let g1_train = row_mean(&mut (0..n).filter(|i| !rows.contains(i)));
            let g1_test = row_mean(&mut rows.clone());
            let train_tilt = tilt_of(
                g1_train,
                (0..worker_grads.len()).filter(|j| !grads.contains(j)).map(|j| &worker_grads[j]).collect(),
            );
            let test_tilt = tilt_of(g1_test, grads.clone().map(|j| &worker_grads[j]).collect());
            let fl = &losses[q];
            let base = fl.train_problem(0.0).with_tilt(train_tilt).with_mask(mask.clone());
            score_path(base, grid, config, |beta| fl.test_value(beta) - dot(beta, &test_tilt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select(grid, per_fold))
}

/// `n = d^γn`, `k = d^γk`, `s̄ = d^γs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeExponents {
    pub gamma_n: f64,
    pub gamma_k: f64,
    pub gamma_s: f64,
}

impl RegimeExponents {
    pub fn new(gamma_n: f64, gamma_k: f64, gamma_s: f64) -> Result<Self> {
        for (name, g) in [("gamma_n", gamma_n), ("gamma_k", gamma_k), ("gamma_s", gamma_s)] {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {g}")));
            }
        }
        Ok(Self {
            gamma_n,
            gamma_k,
            gamma_s,
        })
    }

    /// Exponents implied by concrete sizes.
    pub fn from_sizes(n: usize, k: usize, d: usize, s: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid("exponents need d ≥ 2"));
        }
        let ld = (d as f64).ln();
        Self::new(
            (n as f64).ln() / ld,
            (k as f64).ln() / ld,
            (s as f64).ln() / ld,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem {
    LinKGrad,
    LinNK1,
    GlmKGrad,
    GlmNK1,
}

impl Theorem {
    pub const ALL: [Theorem; 4] = [
        Theorem::LinKGrad,
        Theorem::LinNK1,
        Theorem::GlmKGrad,
        Theorem::GlmNK1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Theorem::LinKGrad => "lin-kgrad",
            Theorem::LinNK1 => "lin-nk1",
            Theorem::GlmKGrad => "glm-kgrad",
            Theorem::GlmNK1 => "glm-nk1",
        }
    }
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Theorem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Theorem::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown theorem '{s}'")))
    }
}

/// Floor that absorbs representation error just below an integer.
fn floor_guarded(x: f64) -> i64 {
    (x + 1e-9).floor() as i64
}

fn require(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidRegime(what.to_string()))
    }
}

/// Preliminary rounds of the quadratic phase for GLMs.
pub fn tau0(e: &RegimeExponents) -> Result<i64> {
    let (gn, gs) = (e.gamma_n, e.gamma_s);
    require(gn > 4.0 * gs, "gamma_n > 4 gamma_s")?;
    Ok(1 + floor_guarded(((gn - 2.0 * gs) / (gn - 4.0 * gs)).log2()))
}

pub fn nu0(e: &RegimeExponents) -> Result<f64> {
    let t0 = tau0(e)?;
    let (gn, gs) = (e.gamma_n, e.gamma_s);
    Ok(2.0 - 2f64.powi(t0 as i32) * (gn - 4.0 * gs) / (gn - 2.0 * gs))
}

/// Minimum number of communication rounds of the chosen result.
pub fn tau_min(theorem: Theorem, e: &RegimeExponents) -> Result<i64> {
    let (gn, gk, gs) = (e.gamma_n, e.gamma_k, e.gamma_s);
    let denom = gn - 2.0 * gs;
    match theorem {
        Theorem::LinKGrad => {
            require(gn > 3.0 * gs, "gamma_n > 3 gamma_s")?;
            require(gk > 3.0 * gs, "gamma_k > 3 gamma_s")?;
            let x = ((gk + gs) / denom).max(1.0 + 3.0 * gs / denom);
            Ok(1 + floor_guarded(x))
        }
        Theorem::LinNK1 => {
            require(gn > 3.0 * gs, "gamma_n > 3 gamma_s")?;
            require(gn + gk > 4.0 * gs, "gamma_n + gamma_k > 4 gamma_s")?;
            Ok(1 + floor_guarded((gk.max(gs) + gs) / denom))
        }
        Theorem::GlmKGrad => {
            require(gn > 5.0 * gs, "gamma_n > 5 gamma_s")?;
            require(gk > 3.0 * gs, "gamma_k > 3 gamma_s")?;
            let t0 = tau0(e)?;
            let v0 = nu0(e)?;
            let a = t0 + floor_guarded((gk + gs) / denom + v0);
            let b = 2 + floor_guarded(((gn - gs) / (gn - 4.0 * gs)).log2());
            Ok(a.max(b))
        }
        Theorem::GlmNK1 => {
            require(gn > 5.0 * gs, "gamma_n > 5 gamma_s")?;
            if gk <= gn - 3.0 * gs {
                Ok((2 + floor_guarded(((gk + gs) / (gn - 4.0 * gs)).log2())).max(1))
            } else {
                Ok(tau0(e)? + floor_guarded((gk + gs) / denom + nu0(e)?))
            }
        }
    }
}

/// Rate for `λ^(t)` in the linear model (natural log), scaled by `c`.
pub fn theory_lambda_linear(t: usize, n: usize, k: usize, d: usize, s0: usize, c: f64) -> f64 {
    let ld = (d as f64).ln();
    let (n, k, s0) = (n as f64, k as f64, s0 as f64);
    let base = (ld / n).sqrt();
    c * ((ld / (n * k)).sqrt() + base * (s0 * base).powi(t as i32))
}

/// Two-phase rate for `λ^(t)` in GLMs: quadratic contraction while
/// `t ≤ τ0`, linear afterwards. The linear branch is also used at `t = τ0 + 1`.
pub fn theory_lambda_glm(
    t: usize,
    n: usize,
    k: usize,
    d: usize,
    s0: usize,
    exponents: &RegimeExponents,
    c: f64,
) -> Result<f64> {
    let t0 = tau0(exponents)?.max(0) as usize;
    let ld = (d as f64).ln();
    let (nf, kf, sf) = (n as f64, k as f64, s0 as f64);
    let base = (ld / nf).sqrt();
    let quad = |p: usize| (sf * sf * base).powf(2f64.powi(p as i32)) / (sf * sf);
    let tail = if t <= t0 {
        quad(t)
    } else {
        quad(t0) * (sf * base).powi((t - t0) as i32)
    };
    Ok(c * ((ld / (nf * kf)).sqrt() + tail))
}

/// Rate for the nodewise penalties, `c·√(log d / n)`.
pub fn theory_lambda_nodewise(n: usize, d: usize, c: f64) -> f64 {
    c * ((d as f64).ln() / n as f64).sqrt()
}
