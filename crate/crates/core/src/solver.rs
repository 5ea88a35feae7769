//! Weighted, tilted ℓ1-penalized minimisation:
//!
//! ```text
//! minimise  f(θ) − aᵀθ + λ Σ_l Ψ_l |θ_l|     (l ranges over penalised coordinates)
//! ```
//!
//! `f` is either an averaged GLM loss over a [`DataBlock`] or an explicit
//! quadratic `½θᵀQθ − bᵀθ + c`. Every lasso-type problem in the crate
//! (local lasso, surrogate steps, nodewise regressions, cross-validation
//! fits, the heteroscedastic weighted step) goes through [`solve`].
//!
//! Three algorithms are available. Accelerated proximal gradient with
//! backtracking and monotone restart handles every loss. Cyclic coordinate
//! descent handles quadratic losses (including the linear GLM, via its Gram
//! form). Proximal Newton with a coordinate-descent inner solve and an
//! Armijo line search handles the logistic loss. All stop on the same rule
//! and report the same KKT certificate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{grad_from_eta, value_from_eta, DataBlock, LossFamily};
use crate::numeric::{axpy, dot, soft_threshold, Matrix};

/// `½θᵀQθ − bᵀθ + offset`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub q: Matrix,
    pub b: Vec<f64>,
    pub offset: f64,
}

impl QuadraticForm {
    pub fn new(q: Matrix, b: Vec<f64>, offset: f64) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(Error::DimensionMismatch {
                expected: q.rows(),
                got: q.cols(),
            });
        }
        if b.len() != q.rows() {
            return Err(Error::DimensionMismatch {
                expected: q.rows(),
                got: b.len(),
            });
        }
        let scale = q.as_slice().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let asym = q.max_asymmetry();
        if asym > 1e-8 * scale {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self { q, b, offset })
    }

    /// Gram form of the averaged squared-error loss on `block`.
    pub fn from_linear_block(block: &DataBlock) -> Self {
        let n = block.n_rows() as f64;
        let q = block.x.gram().scaled(1.0 / n);
        let mut b = block.x.t_matvec(&block.y);
        b.iter_mut().for_each(|v| *v /= n);
        let offset = 0.5 * dot(&block.y, &block.y) / n;
        Self { q, b, offset }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let qt = self.q.matvec(theta);
        0.5 * dot(theta, &qt) - dot(&self.b, theta) + self.offset
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = self.q.matvec(theta);
        g.iter_mut().zip(&self.b).for_each(|(gi, bi)| *gi -= bi);
        g
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SmoothLoss<'a> {
    Glm {
        family: LossFamily,
        block: &'a DataBlock,
    },
    Quadratic(&'a QuadraticForm),
}

impl SmoothLoss<'_> {
    pub fn dim(&self) -> usize {
        match self {
            SmoothLoss::Glm { block, .. } => block.dim(),
            SmoothLoss::Quadratic(qf) => qf.dim(),
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            SmoothLoss::Glm { family, block } => {
                value_from_eta(*family, &block.y, &block.linear_predictor(theta))
            }
            SmoothLoss::Quadratic(qf) => qf.value(theta),
        }
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            SmoothLoss::Glm { family, block } => {
                grad_from_eta(*family, block, &block.linear_predictor(theta))
            }
            SmoothLoss::Quadratic(qf) => qf.grad(theta),
        }
    }

    /// Largest diagonal Hessian entry bound, used as the initial step scale.
    fn initial_lipschitz(&self) -> f64 {
        let l0 = match self {
            SmoothLoss::Glm { family, block } => {
                let n = block.n_rows() as f64;
                let mut best: f64 = 0.0;
                for j in 0..block.dim() {
                    let s: f64 = (0..block.n_rows()).map(|i| block.x.get(i, j).powi(2)).sum();
                    best = best.max(s / n);
                }
                family.d2_bound() * best
            }
            SmoothLoss::Quadratic(qf) => qf.q.diag().into_iter().fold(0.0, f64::max),
        };
        if l0 > 0.0 && l0.is_finite() {
            l0
        } else {
            1.0
        }
    }
}

/// The unit consumed by [`solve`].
#[derive(Debug, Clone)]
pub struct PenalizedProblem<'a> {
    pub loss: SmoothLoss<'a>,
    /// Linear tilt `a`; the objective contains `−aᵀθ`.
    pub tilt: Vec<f64>,
    pub lambda: f64,
    /// Penalty loadings `Ψ`, all strictly positive.
    pub loadings: Vec<f64>,
    /// `false` leaves the coordinate unpenalised.
    pub penalty_mask: Vec<bool>,
}

impl<'a> PenalizedProblem<'a> {
    pub fn new(loss: SmoothLoss<'a>, lambda: f64) -> Self {
        let d = loss.dim();
        Self {
            loss,
            tilt: vec![0.0; d],
            lambda,
            loadings: vec![1.0; d],
            penalty_mask: vec![true; d],
        }
    }

    pub fn glm(family: LossFamily, block: &'a DataBlock, lambda: f64) -> Self {
        Self::new(SmoothLoss::Glm { family, block }, lambda)
    }

    pub fn quadratic(qf: &'a QuadraticForm, lambda: f64) -> Self {
        Self::new(SmoothLoss::Quadratic(qf), lambda)
    }

    pub fn with_tilt(mut self, tilt: Vec<f64>) -> Self {
        self.tilt = tilt;
        self
    }

    pub fn with_loadings(mut self, loadings: Vec<f64>) -> Self {
        self.loadings = loadings;
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.penalty_mask = mask;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn dim(&self) -> usize {
        self.loss.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for len in [self.tilt.len(), self.loadings.len(), self.penalty_mask.len()] {
            if len != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: len,
                });
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.loadings.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::invalid("penalty loadings must be positive and finite"));
        }
        if self.tilt.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tilt must be finite"));
        }
        Ok(())
    }

    fn weight(&self, l: usize) -> f64 {
        if self.penalty_mask[l] {
            self.lambda * self.loadings[l]
        } else {
            0.0
        }
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .enumerate()
            .map(|(l, v)| self.weight(l) * v.abs())
            .sum()
    }

    /// Full objective `f(θ) − aᵀθ + λ‖Ψθ‖₁` over penalised coordinates.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        self.loss.value(theta) - dot(&self.tilt, theta) + self.penalty(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Coordinate descent for quadratic losses, proximal Newton otherwise.
    Auto,
    ProximalGradient,
    CoordinateDescent,
    ProximalNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Step shrink factor in `(0, 1)` applied on failed sufficient-decrease checks.
    pub backtrack: f64,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 10_000,
            backtrack: 0.5,
            algorithm: Algorithm::Auto,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn with_algorithm(self, algorithm: Algorithm) -> Self {
        Self { algorithm, ..self }
    }

    pub fn with_tol(self, tol: f64) -> Self {
        Self { tol, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::invalid("solver config needs tol > 0, max_iter ≥ 1, backtrack in (0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub theta_hat: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_violation: f64,
    pub objective: f64,
    /// Objective after every accepted iterate (only with `record_trace`).
    pub objective_trace: Vec<f64>,
}

/// Largest excess of the subgradient optimality conditions over a `10·tol`
/// slack, zero when the certificate holds.
pub fn kkt_violation(problem: &PenalizedProblem, theta: &[f64], tol: f64) -> f64 {
    let mut r = problem.loss.grad(theta);
    axpy(-1.0, &problem.tilt, &mut r);
    kkt_from_residual(problem, theta, &r, tol)
}

fn kkt_from_residual(problem: &PenalizedProblem, theta: &[f64], r: &[f64], tol: f64) -> f64 {
    let slack = 10.0 * tol;
    let mut worst: f64 = 0.0;
    for l in 0..theta.len() {
        let w = problem.weight(l);
        let excess = if !problem.penalty_mask[l] {
            r[l].abs() - slack
        } else if theta[l] != 0.0 {
            (r[l] + w * theta[l].signum()).abs() - slack
        } else {
            r[l].abs() - w - slack
        };
        worst = worst.max(excess);
    }
    worst.max(0.0)
}

/// Smallest `λ` at which the origin satisfies the KKT conditions:
/// `max_l |(∇f(0) − a)_l| / Ψ_l` over penalised coordinates.
pub fn lambda_max(problem: &PenalizedProblem) -> Result<f64> {
    problem.validate()?;
    let d = problem.dim();
    let mut r = problem.loss.grad(&vec![0.0; d]);
    axpy(-1.0, &problem.tilt, &mut r);
    let mut best: Option<f64> = None;
    for l in (0..d).filter(|&l| problem.penalty_mask[l]) {
        let v = r[l].abs() / problem.loadings[l];
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    best.ok_or(Error::NoPenalizedCoordinates)
}

/// Solves from the origin.
pub fn solve(problem: &PenalizedProblem, config: &SolverConfig) -> Result<SolveReport> {
    solve_from(problem, config, &vec![0.0; problem.dim()])
}

/// Solves from a warm start.
pub fn solve_from(
    problem: &PenalizedProblem,
    config: &SolverConfig,
    start: &[f64],
) -> Result<SolveReport> {
    problem.validate()?;
    config.validate()?;
    if start.len() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: start.len(),
        });
    }
    let use_cd = match (config.algorithm, problem.loss) {
        (Algorithm::ProximalGradient, _) => false,
        (_, SmoothLoss::Quadratic(_)) => true,
        (_, SmoothLoss::Glm { family, block }) => {
            if family != LossFamily::Linear {
                return proximal_newton(problem, family, block, config, start);
            }
            true
        }
    };
    if !use_cd {
        return proximal_gradient(problem, config, start);
    }
    match problem.loss {
        SmoothLoss::Quadratic(qf) => coordinate_descent(problem, qf, config, start),
        SmoothLoss::Glm { block, .. } => {
            let qf = QuadraticForm::from_linear_block(block);
            let gram_problem = PenalizedProblem {
                loss: SmoothLoss::Quadratic(&qf),
                ..problem.clone()
            };
            coordinate_descent(&gram_problem, &qf, config, start)
        }
    }
}

/// Linear image used to update values and gradients without extra products:
/// `Xθ` for GLM losses, `Qθ` for quadratics.
fn image(loss: &SmoothLoss, theta: &[f64]) -> Vec<f64> {
    match loss {
        SmoothLoss::Glm { block, .. } => block.linear_predictor(theta),
        SmoothLoss::Quadratic(qf) => qf.q.matvec(theta),
    }
}

fn value_at(loss: &SmoothLoss, theta: &[f64], img: &[f64]) -> f64 {
    match loss {
        SmoothLoss::Glm { family, block } => value_from_eta(*family, &block.y, img),
        SmoothLoss::Quadratic(qf) => 0.5 * dot(theta, img) - dot(&qf.b, theta) + qf.offset,
    }
}

fn grad_at(loss: &SmoothLoss, img: &[f64]) -> Vec<f64> {
    match loss {
        SmoothLoss::Glm { family, block } => grad_from_eta(*family, block, img),
        SmoothLoss::Quadratic(qf) => img.iter().zip(&qf.b).map(|(a, b)| a - b).collect(),
    }
}

fn extrapolate(cur: &[f64], prev: &[f64], beta: f64) -> Vec<f64> {
    cur.iter().zip(prev).map(|(c, p)| c + beta * (c - p)).collect()
}

fn proximal_gradient(
    problem: &PenalizedProblem,
    config: &SolverConfig,
    start: &[f64],
) -> Result<SolveReport> {
    let loss = &problem.loss;
    let d = problem.dim();
    let tilt = &problem.tilt;
    let weights: Vec<f64> = (0..d).map(|l| problem.weight(l)).collect();
    let smooth = |theta: &[f64], img: &[f64]| value_at(loss, theta, img) - dot(tilt, theta);

    let mut x = start.to_vec();
    let mut ax = image(loss, &x);
    let mut fx = smooth(&x, &ax) + problem.penalty(&x);
    if !fx.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut y = x.clone();
    let mut ay = ax.clone();
    let mut momentum = false;
    let mut t = 1.0_f64;
    let mut lip = loss.initial_lipschitz();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;

    let mut z = vec![0.0; d];
    while iterations < config.max_iter {
        iterations += 1;
        let mut gy = grad_at(loss, &ay);
        axpy(-1.0, tilt, &mut gy);
        let hy = smooth(&y, &ay);
        let (az, hz) = loop {
            for l in 0..d {
                let step = y[l] - gy[l] / lip;
                z[l] = soft_threshold(step, weights[l] / lip);
            }
            let az = image(loss, &z);
            let hz = smooth(&z, &az);
            if !hz.is_finite() {
                return Err(Error::Divergence { iteration: iterations });
            }
            let mut lin = 0.0;
            let mut sq = 0.0;
            for l in 0..d {
                let diff = z[l] - y[l];
                lin += gy[l] * diff;
                sq += diff * diff;
            }
            let bound = hy + lin + 0.5 * lip * sq;
            if hz <= bound + 1e-12 * hy.abs().max(1.0) {
                break (az, hz);
            }
            lip /= config.backtrack;
            if !lip.is_finite() || lip > 1e300 {
                return Err(Error::Divergence { iteration: iterations });
            }
        };
        let fz = hz + problem.penalty(&z);
        if fz > fx {
            if momentum {
                // Monotone restart: drop momentum and retry from the last accepted point.
                momentum = false;
                t = 1.0;
                y.clone_from(&x);
                ay.clone_from(&ax);
                continue;
            }
            // A plain prox step failed to decrease: only rounding remains.
            kkt = kkt_violation(problem, &x, config.tol);
            converged = kkt == 0.0;
            break;
        }
        let change = z
            .iter()
            .zip(&x)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let x_prev = std::mem::replace(&mut x, z.clone());
        let ax_prev = std::mem::replace(&mut ax, az);
        fx = fz;
        if config.record_trace {
            trace.push(fx);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        t = t_next;
        y = extrapolate(&x, &x_prev, beta);
        ay = extrapolate(&ax, &ax_prev, beta);
        momentum = beta > 0.0;

        if change < config.tol {
            let mut r = grad_at(loss, &ax);
            axpy(-1.0, tilt, &mut r);
            kkt = kkt_from_residual(problem, &x, &r, config.tol);
            if kkt == 0.0 {
                converged = true;
                break;
            }
        }
    }
    if !converged && kkt.is_infinite() {
        kkt = kkt_violation(problem, &x, config.tol);
    }
    Ok(SolveReport {
        objective: fx,
        theta_hat: x,
        iterations,
        converged,
        kkt_violation: kkt,
        objective_trace: trace,
    })
}

/// Coordinate sweeps allowed per Newton subproblem.
const INNER_SWEEPS: usize = 2000;
/// Iterates beyond this size mean the objective is unbounded below; the
/// solve stops and reports no certificate.
const ESCAPE_BOUND: f64 = 1e8;

fn proximal_newton(
    problem: &PenalizedProblem,
    family: LossFamily,
    block: &DataBlock,
    config: &SolverConfig,
    start: &[f64],
) -> Result<SolveReport> {
    let d = problem.dim();
    let n = block.n_rows();
    let inv_n = 1.0 / n as f64;
    let xt = block.x.transpose();
    let weights: Vec<f64> = (0..d).map(|l| problem.weight(l)).collect();
    let tilt = &problem.tilt;
    let full = |x: &[f64], eta: &[f64]| {
        value_from_eta(family, &block.y, eta) - dot(tilt, x) + problem.penalty(x)
    };

    let mut x = start.to_vec();
    let mut eta = block.linear_predictor(&x);
    let mut fx = full(&x, &eta);
    if !fx.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let inner_tol = 0.1 * config.tol;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut w = vec![0.0; n];
    let mut h = vec![0.0; d];
    let mut r = vec![0.0; n];

    while iterations < config.max_iter {
        iterations += 1;
        let mut g = grad_from_eta(family, block, &eta);
        axpy(-1.0, tilt, &mut g);
        for i in 0..n {
            w[i] = family.d2(block.y[i], eta[i]) * inv_n;
        }
        for l in 0..d {
            h[l] = xt.row(l).iter().zip(&w).map(|(v, wi)| wi * v * v).sum();
        }

        // Coordinate descent on the local quadratic model; `r = X(z − x)`.
        let mut z = x.clone();
        r.iter_mut().for_each(|v| *v = 0.0);
        let sweep = |z: &mut [f64], r: &mut [f64], coords: &mut dyn Iterator<Item = usize>| {
            let mut max_change: f64 = 0.0;
            for l in coords {
                if h[l] <= 1e-300 {
                    continue;
                }
                let col = xt.row(l);
                let curv: f64 = col.iter().zip(&w).zip(r.iter()).map(|((v, wi), ri)| v * wi * ri).sum();
                let gl = g[l] + curv;
                let new = soft_threshold(z[l] - gl / h[l], weights[l] / h[l]);
                let delta = new - z[l];
                if delta != 0.0 {
                    z[l] = new;
                    axpy(delta, col, r);
                    max_change = max_change.max(delta.abs() * h[l].sqrt());
                }
            }
            max_change
        };
        let mut budget = INNER_SWEEPS;
        while budget > 0 {
            budget -= 1;
            if sweep(&mut z, &mut r, &mut (0..d)) < inner_tol {
                break;
            }
            let active: Vec<usize> = (0..d).filter(|&l| z[l] != 0.0).collect();
            while budget > 0 {
                budget -= 1;
                if sweep(&mut z, &mut r, &mut active.iter().copied()) < inner_tol {
                    break;
                }
            }
        }

        let step: Vec<f64> = z.iter().zip(&x).map(|(a, b)| a - b).collect();
        let step_size = step.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if step_size < config.tol {
            break;
        }
        let decrease = dot(&g, &step) + problem.penalty(&z) - problem.penalty(&x);
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xs: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + s * b).collect();
            let es: Vec<f64> = eta.iter().zip(&r).map(|(a, b)| a + s * b).collect();
            let fs = full(&xs, &es);
            if fs.is_finite() && fs <= fx + 1e-4 * s * decrease.min(0.0) + 1e-13 * fx.abs().max(1.0) {
                accepted = Some((xs, es, fs));
                break;
            }
            s *= 0.5;
        }
        let Some((xs, es, fs)) = accepted else {
            break;
        };
        let moved = s * step_size;
        x = xs;
        eta = es;
        fx = fs;
        if config.record_trace {
            trace.push(fx);
        }
        if moved < config.tol || x.iter().any(|v| v.abs() > ESCAPE_BOUND) {
            break;
        }
    }
    let mut g = grad_from_eta(family, block, &eta);
    axpy(-1.0, tilt, &mut g);
    let kkt = kkt_from_residual(problem, &x, &g, config.tol);
    converged |= kkt == 0.0;
    Ok(SolveReport {
        theta_hat: x,
        iterations,
        converged,
        kkt_violation: kkt,
        objective: fx,
        objective_trace: trace,
    })
}

fn coordinate_descent(
    problem: &PenalizedProblem,
    qf: &QuadraticForm,
    config: &SolverConfig,
    start: &[f64],
) -> Result<SolveReport> {
    let d = problem.dim();
    let q = &qf.q;
    let residual = |x: &[f64]| {
        let mut r = qf.grad(x);
        axpy(-1.0, &problem.tilt, &mut r);
        r
    };
    let weights: Vec<f64> = (0..d).map(|l| problem.weight(l)).collect();
    let mut x = start.to_vec();
    let mut r = residual(&x);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        let mut stuck = false;
        for l in 0..d {
            let qll = q.get(l, l);
            if qll <= 0.0 {
                // Flat coordinate: the objective is linear in θ_l.
                if r[l].abs() > weights[l] {
                    stuck = true;
                }
                continue;
            }
            let old = x[l];
            let z = old - r[l] / qll;
            let new = soft_threshold(z, weights[l] / qll);
            let delta = new - old;
            if delta != 0.0 {
                x[l] = new;
                axpy(delta, q.row(l), &mut r);
                max_change = max_change.max(delta.abs());
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: iterations });
        }
        if config.record_trace {
            trace.push(problem.objective(&x));
        }
        if stuck {
            break;
        }
        if max_change < config.tol {
            r = residual(&x);
            kkt = kkt_from_residual(problem, &x, &r, config.tol);
            if kkt == 0.0 {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        kkt = kkt_violation(problem, &x, config.tol);
    }
    let objective = problem.objective(&x);
    if !objective.is_finite() {
        return Err(Error::Divergence { iteration: iterations });
    }
    Ok(SolveReport {
        theta_hat: x,
        iterations,
        converged,
        kkt_violation: kkt,
        objective,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm;
    use crate::rng::{derive_stream, Purpose, RngKey};

    fn block(n: usize, d: usize, seed: u64) -> DataBlock {
        let mut s = derive_stream(RngKey::new(seed, Purpose::Misc));
        let x = Matrix::from_fn(n, d, |_, _| s.standard_normal());
        let y = (0..n).map(|i| x.get(i, 0) + s.standard_normal()).collect();
        DataBlock::new(x, y).unwrap()
    }

    /// `n = d·m` rows made of `m` stacked scaled identities, so `XᵀX/n = I`.
    fn orthonormal_block(d: usize, m: usize, seed: u64) -> DataBlock {
        let n = d * m;
        let scale = (d as f64).sqrt();
        let x = Matrix::from_fn(n, d, |i, j| if i % d == j { scale } else { 0.0 });
        let mut s = derive_stream(RngKey::new(seed, Purpose::Misc));
        let y = (0..n).map(|_| s.standard_normal() * 2.0).collect();
        DataBlock::new(x, y).unwrap()
    }

    #[test]
    fn orthonormal_design_is_identity_gram() {
        let b = orthonormal_block(4, 3, 1);
        let q = QuadraticForm::from_linear_block(&b);
        assert!(q.q.max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    #[test]
    fn large_lambda_gives_zero() {
        let b = block(60, 8, 3);
        let p = PenalizedProblem::glm(LossFamily::Linear, &b, 0.0);
        let lmax = lambda_max(&p).unwrap();
        for alg in [Algorithm::ProximalGradient, Algorithm::CoordinateDescent] {
            let rep = solve(&p.clone().with_lambda(lmax * 1.0001), &SolverConfig::default().with_algorithm(alg)).unwrap();
            assert!(rep.theta_hat.iter().all(|&v| v == 0.0));
            assert!(rep.converged);
        }
    }

    #[test]
    fn orthonormal_closed_form() {
        let b = orthonormal_block(5, 4, 7);
        let xty: Vec<f64> = b.x.t_matvec(&b.y).iter().map(|v| v / b.n_rows() as f64).collect();
        let lam = 0.3;
        for alg in [Algorithm::ProximalGradient, Algorithm::CoordinateDescent] {
            let p = PenalizedProblem::glm(LossFamily::Linear, &b, lam);
            let rep = solve(&p, &SolverConfig::default().with_algorithm(alg)).unwrap();
            for (t, z) in rep.theta_hat.iter().zip(&xty) {
                assert!((t - soft_threshold(*z, lam)).abs() < 1e-7, "{alg:?}");
            }
        }
        let p = PenalizedProblem::glm(LossFamily::Linear, &b, 0.0);
        let lmax = lambda_max(&p).unwrap();
        let linf = xty.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!((lmax - linf).abs() < 1e-12);
    }

    #[test]
    fn lambda_max_scaling_and_tilt() {
        let mut b = block(40, 6, 5);
        b.y.iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
        let p = PenalizedProblem::glm(LossFamily::Logistic, &b, 0.0);
        let g0 = glm::grad(LossFamily::Logistic, &b, &[0.0; 6]).unwrap();
        // a = ∇L(0) cancels the gradient at the origin
        let tilted = p.clone().with_tilt(g0);
        assert!(lambda_max(&tilted).unwrap().abs() < 1e-15);
        let base = lambda_max(&p).unwrap();
        let halved = lambda_max(&p.clone().with_loadings(vec![2.0; 6])).unwrap();
        assert!((halved - base / 2.0).abs() < 1e-15);
        assert!(matches!(
            lambda_max(&p.with_mask(vec![false; 6])),
            Err(Error::NoPenalizedCoordinates)
        ));
    }

    #[test]
    fn monotone_trace() {
        let mut b = block(80, 12, 9);
        b.y.iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
        let p = PenalizedProblem::glm(LossFamily::Logistic, &b, 0.01)
            .with_tilt((0..12).map(|i| 0.002 * i as f64).collect());
        let cfg = SolverConfig {
            record_trace: true,
            ..SolverConfig::default()
        };
        for alg in [Algorithm::ProximalGradient, Algorithm::ProximalNewton] {
            let rep = solve(&p, &cfg.with_algorithm(alg)).unwrap();
            assert!(rep.converged, "{alg:?} {} {}", rep.iterations, rep.kkt_violation);
            assert!(rep.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn logistic_algorithms_agree() {
        let mut b = block(120, 10, 21);
        b.y.iter_mut().for_each(|v| *v = if *v > 0.3 { 1.0 } else { 0.0 });
        let p = PenalizedProblem::glm(LossFamily::Logistic, &b, 0.02)
            .with_mask((0..10).map(|l| l != 0).collect());
        let cfg = SolverConfig::default().with_tol(1e-9);
        let apg = solve(&p, &cfg.with_algorithm(Algorithm::ProximalGradient)).unwrap();
        let newton = solve(&p, &cfg.with_algorithm(Algorithm::ProximalNewton)).unwrap();
        assert!(apg.converged && newton.converged);
        for (a, b) in apg.theta_hat.iter().zip(&newton.theta_hat) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(newton.iterations < 50);
        let lmax = lambda_max(&p).unwrap();
        let zero = solve(&p.clone().with_lambda(lmax * 1.0001).with_mask(vec![true; 10]), &cfg).unwrap();
        assert!(zero.converged);
    }

    #[test]
    fn rank_deficient_unpenalized_returns_unconverged() {
        // n < d with a tilt outside the column space: unbounded below.
        let b = block(3, 6, 2);
        let p = PenalizedProblem::glm(LossFamily::Linear, &b, 0.0).with_tilt(vec![1.0; 6]);
        let cfg = SolverConfig {
            max_iter: 200,
            ..SolverConfig::default()
        };
        let rep = solve(&p, &cfg).unwrap();
        assert!(!rep.converged);
    }

    #[test]
    fn unbounded_logistic_stops_without_certificate() {
        // Separable labels and a tilt larger than the penalty.
        let mut b = block(20, 4, 5);
        b.y = (0..20).map(|i| if b.x.get(i, 0) > 0.0 { 1.0 } else { 0.0 }).collect();
        let p = PenalizedProblem::glm(LossFamily::Logistic, &b, 0.01).with_tilt(vec![0.2, 0.0, 0.0, 0.0]);
        let rep = solve(&p, &SolverConfig::default()).unwrap();
        assert!(!rep.converged);
        assert!(rep.iterations < SolverConfig::default().max_iter);
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let b = block(10, 3, 2);
        let p = PenalizedProblem::glm(LossFamily::Linear, &b, -1.0);
        assert!(solve(&p, &SolverConfig::default()).is_err());
        let p = PenalizedProblem::glm(LossFamily::Linear, &b, 1.0).with_loadings(vec![1.0, 0.0, 1.0]);
        assert!(solve(&p, &SolverConfig::default()).is_err());
        let q = QuadraticForm::new(Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap(), vec![0.0; 2], 0.0);
        assert!(matches!(q, Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn unpenalized_coordinate_is_free() {
        let b = block(100, 4, 12);
        let p = PenalizedProblem::glm(LossFamily::Linear, &b, 10.0).with_mask(vec![true, false, true, true]);
        let rep = solve(&p, &SolverConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.theta_hat[0], 0.0);
        assert!(rep.theta_hat[1] != 0.0);
    }
}
