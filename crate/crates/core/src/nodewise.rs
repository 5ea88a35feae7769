//! Nodewise lasso: a sparse approximate inverse of a sample Hessian built
//! from `d` penalised regressions of each coordinate on the others.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix};
use crate::solver::{solve, PenalizedProblem, QuadraticForm, SolverConfig};

/// Floor applied to `τ̂²_l` when the residual variance collapses.
pub const TAU_SQ_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NodewiseResult {
    /// Approximate inverse; row `l` is `(1/τ̂²_l)·(e_l − γ̂_l)`.
    pub theta_inv: Matrix,
    pub tau_sq: Vec<f64>,
    /// `γ̂_l` indexed over the `d − 1` coordinates other than `l`.
    pub gammas: Vec<Vec<f64>>,
    /// Columns whose `τ̂²` hit [`TAU_SQ_FLOOR`].
    pub clamped: Vec<bool>,
}

impl NodewiseResult {
    pub fn dim(&self) -> usize {
        self.tau_sq.len()
    }
}

/// Regression problem for column `l`: `½γᵀM₋ₗ,₋ₗγ − M₋ₗ,ₗᵀγ + λ_l‖γ‖₁`, i.e. the
/// nodewise objective divided by two.
pub fn column_problem(m_hat: &Matrix, l: usize) -> QuadraticForm {
    let q = m_hat.without_index(l);
    let b: Vec<f64> = (0..m_hat.cols())
        .filter(|&j| j != l)
        .map(|j| m_hat.get(l, j))
        .collect();
    QuadraticForm {
        q,
        b,
        offset: 0.5 * m_hat.get(l, l),
    }
}

/// Runs the `d` nodewise regressions on `m_hat` and assembles the inverse.
pub fn node(m_hat: &Matrix, lambdas: &[f64], config: &SolverConfig) -> Result<NodewiseResult> {
    let d = m_hat.rows();
    if m_hat.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m_hat.cols(),
        });
    }
    if lambdas.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: lambdas.len(),
        });
    }
    if !m_hat.is_finite() {
        return Err(Error::invalid("Hessian has non-finite entries"));
    }
    let asym = m_hat.max_asymmetry();
    if asym > 1e-8 {
        return Err(Error::NotSymmetric(asym));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid("nodewise lambdas must be finite and ≥ 0"));
    }

    let columns: Vec<Result<(Vec<f64>, f64)>> = (0..d)
        .into_par_iter()
        .map(|l| {
            if d == 1 {
                return Ok((Vec::new(), m_hat.get(0, 0)));
            }
            let qf = column_problem(m_hat, l);
            let report = solve(&PenalizedProblem::quadratic(&qf, lambdas[l]), config)?;
            let gamma = report.theta_hat;
            let tau_sq = m_hat.get(l, l) - dot(&qf.b, &gamma);
            Ok((gamma, tau_sq))
        })
        .collect();

    let mut theta_inv = Matrix::zeros(d, d);
    let mut tau_sq = Vec::with_capacity(d);
    let mut gammas = Vec::with_capacity(d);
    let mut clamped = Vec::with_capacity(d);
    for (l, col) in columns.into_iter().enumerate() {
        let (gamma, raw) = col?;
        let hit_floor = !(raw > TAU_SQ_FLOOR);
        let t2 = if hit_floor { TAU_SQ_FLOOR } else { raw };
        let inv = 1.0 / t2;
        let row = theta_inv.row_mut(l);
        let mut others = gamma.iter();
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if j == l {
                inv
            } else {
                -others.next().copied().unwrap_or(0.0) * inv
            };
        }
        tau_sq.push(t2);
        gammas.push(gamma);
        clamped.push(hit_floor);
    }
    Ok(NodewiseResult {
        theta_inv,
        tau_sq,
        gammas,
        clamped,
    })
}
