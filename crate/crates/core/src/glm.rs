//! GLM losses of the form `g(y, xᵀθ)`, averaged over rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    /// `g(a, b) = (a − b)²/2`
    Linear,
    /// `g(a, b) = −ab + log(1 + eᵇ)`
    Logistic,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Linear => "linear",
            LossFamily::Logistic => "logistic",
        }
    }

    /// `g(y, b)`
    #[inline]
    pub fn value(self, y: f64, b: f64) -> f64 {
        match self {
            LossFamily::Linear => 0.5 * (y - b) * (y - b),
            LossFamily::Logistic => softplus(b) - y * b,
        }
    }

    /// `∂g/∂b`
    #[inline]
    pub fn d1(self, y: f64, b: f64) -> f64 {
        match self {
            LossFamily::Linear => b - y,
            LossFamily::Logistic => sigmoid(b) - y,
        }
    }

    /// `∂²g/∂b²`
    #[inline]
    pub fn d2(self, _y: f64, b: f64) -> f64 {
        match self {
            LossFamily::Linear => 1.0,
            LossFamily::Logistic => {
                let s = sigmoid(b);
                s * (1.0 - s)
            }
        }
    }

    /// Upper bound on `g''` used to seed step sizes.
    pub fn d2_bound(self) -> f64 {
        match self {
            LossFamily::Linear => 1.0,
            LossFamily::Logistic => 0.25,
        }
    }
}

/// `log(1 + eᵇ)` without overflow.
#[inline]
pub fn softplus(b: f64) -> f64 {
    b.max(0.0) + (-b.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(b: f64) -> f64 {
    if b >= 0.0 {
        1.0 / (1.0 + (-b).exp())
    } else {
        let e = b.exp();
        e / (1.0 + e)
    }
}

/// Rows of covariates with their responses.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl DataBlock {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::invalid("data block needs at least one row"));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("data block contains non-finite values"));
        }
        Ok(Self { x, y })
    }

    /// Validates responses against the family (logistic needs `y ∈ {0, 1}`).
    pub fn check_family(&self, family: LossFamily) -> Result<()> {
        if family == LossFamily::Logistic && self.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("logistic responses must be 0 or 1"));
        }
        Ok(())
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn rows(&self, idx: &[usize]) -> DataBlock {
        DataBlock {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn row_range(&self, start: usize, end: usize) -> DataBlock {
        DataBlock {
            x: self.x.row_block(start, end),
            y: self.y[start..end].to_vec(),
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Linear predictor `Xθ`.
    pub fn linear_predictor(&self, theta: &[f64]) -> Vec<f64> {
        self.x.matvec(theta)
    }
}

pub fn loss_value(family: LossFamily, block: &DataBlock, theta: &[f64]) -> Result<f64> {
    block.check_theta(theta)?;
    let eta = block.linear_predictor(theta);
    Ok(value_from_eta(family, &block.y, &eta))
}

pub(crate) fn value_from_eta(family: LossFamily, y: &[f64], eta: &[f64]) -> f64 {
    let s: f64 = y.iter().zip(eta).map(|(&yi, &e)| family.value(yi, e)).sum();
    s / y.len() as f64
}

pub(crate) fn grad_from_eta(family: LossFamily, block: &DataBlock, eta: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = block
        .y
        .iter()
        .zip(eta)
        .map(|(&yi, &e)| family.d1(yi, e))
        .collect();
    let mut g = block.x.t_matvec(&w);
    let inv = 1.0 / block.n_rows() as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    g
}

/// Average gradient `(1/n) Σ g'(yᵢ, xᵢᵀθ) xᵢ`.
pub fn grad(family: LossFamily, block: &DataBlock, theta: &[f64]) -> Result<Vec<f64>> {
    block.check_theta(theta)?;
    let eta = block.linear_predictor(theta);
    Ok(grad_from_eta(family, block, &eta))
}

/// One gradient per row, `n_rows × d`.
pub fn per_sample_grads(family: LossFamily, block: &DataBlock, theta: &[f64]) -> Result<Matrix> {
    block.check_theta(theta)?;
    let d = block.dim();
    let mut out = Matrix::zeros(block.n_rows(), d);
    for i in 0..block.n_rows() {
        let xi = block.x.row(i);
        let w = family.d1(block.y[i], dot(xi, theta));
        axpy(w, xi, out.row_mut(i));
    }
    Ok(out)
}

/// Row weights `g''(yᵢ, xᵢᵀθ)` of the Hessian.
pub fn hessian_weights(family: LossFamily, block: &DataBlock, theta: &[f64]) -> Result<Vec<f64>> {
    block.check_theta(theta)?;
    let eta = block.linear_predictor(theta);
    Ok(block
        .y
        .iter()
        .zip(&eta)
        .map(|(&yi, &e)| family.d2(yi, e))
        .collect())
}

/// Design rows scaled by `√g''`, so that its Gram over `n` is the Hessian.
pub fn weighted_design(family: LossFamily, block: &DataBlock, theta: &[f64]) -> Result<Matrix> {
    let w = hessian_weights(family, block, theta)?;
    let mut x = block.x.clone();
    if family == LossFamily::Linear {
        return Ok(x);
    }
    for (i, wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        x.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    Ok(x)
}

/// `(1/n) Σ g''(yᵢ, xᵢᵀθ) xᵢ xᵢᵀ`
pub fn hessian(family: LossFamily, block: &DataBlock, theta: &[f64]) -> Result<Matrix> {
    let xw = weighted_design(family, block, theta)?;
    let mut h = xw.gram();
    h.scale(1.0 / block.n_rows() as f64);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, Purpose, RngKey};

    fn random_block(family: LossFamily, n: usize, d: usize, seed: u64) -> DataBlock {
        let mut s = derive_stream(RngKey::new(seed, Purpose::Misc));
        let x = Matrix::from_fn(n, d, |_, _| s.standard_normal());
        let y = (0..n)
            .map(|_| match family {
                LossFamily::Linear => s.standard_normal(),
                LossFamily::Logistic => f64::from(u8::from(s.bernoulli(0.5))),
            })
            .collect();
        DataBlock::new(x, y).unwrap()
    }

    #[test]
    fn linear_exact_fit_has_zero_loss() {
        let theta = vec![1.0, -2.0, 0.5];
        let x = Matrix::from_fn(6, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.0) + 0.3 * i as f64);
        let y = x.matvec(&theta);
        let b = DataBlock::new(x, y).unwrap();
        assert!(loss_value(LossFamily::Linear, &b, &theta).unwrap().abs() < 1e-24);
    }

    #[test]
    fn logistic_at_origin_is_log2() {
        let b = random_block(LossFamily::Logistic, 20, 4, 3);
        let v = loss_value(LossFamily::Logistic, &b, &[0.0; 4]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_examples() {
        let b = DataBlock::new(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![2.0]).unwrap();
        assert_eq!(loss_value(LossFamily::Linear, &b, &[0.0]).unwrap(), 2.0);

        let b = DataBlock::new(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![1.0]).unwrap();
        assert_eq!(grad(LossFamily::Logistic, &b, &[0.0]).unwrap(), vec![-0.5]);
        let h = hessian(LossFamily::Logistic, &b, &[0.0]).unwrap();
        assert_eq!(h.as_slice(), &[0.25]);
    }

    #[test]
    fn linear_grad_at_origin_is_minus_xty() {
        let b = random_block(LossFamily::Linear, 30, 5, 11);
        let g = grad(LossFamily::Linear, &b, &[0.0; 5]).unwrap();
        let xty = b.x.t_matvec(&b.y);
        for (gi, v) in g.iter().zip(&xty) {
            assert!((gi + v / 30.0).abs() < 1e-14);
        }
    }

    #[test]
    fn per_sample_rows_average_to_grad() {
        for family in [LossFamily::Linear, LossFamily::Logistic] {
            let b = random_block(family, 25, 4, 5);
            let theta = [0.3, -0.2, 0.1, 0.7];
            let ps = per_sample_grads(family, &b, &theta).unwrap();
            let g = grad(family, &b, &theta).unwrap();
            for l in 0..4 {
                let m: f64 = (0..25).map(|i| ps.get(i, l)).sum::<f64>() / 25.0;
                assert!((m - g[l]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_sample_identity_design() {
        let x = Matrix::identity(3);
        let b = DataBlock::new(x, vec![0.0; 3]).unwrap();
        let ps = per_sample_grads(LossFamily::Linear, &b, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ps.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(ps.row(1), &[0.0, 0.0, 0.0]);

        let single = b.row_range(0, 1);
        let ps = per_sample_grads(LossFamily::Linear, &single, &[1.0, 2.0, 0.0]).unwrap();
        let g = grad(LossFamily::Linear, &single, &[1.0, 2.0, 0.0]).unwrap();
        assert_eq!(ps.row(0), g.as_slice());
    }

    #[test]
    fn linear_hessian_is_theta_free_and_symmetric() {
        let b = random_block(LossFamily::Linear, 40, 6, 9);
        let h1 = hessian(LossFamily::Linear, &b, &[0.0; 6]).unwrap();
        let h2 = hessian(LossFamily::Linear, &b, &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        assert_eq!(h1, h2);
        assert!(h1.max_asymmetry() < 1e-12);
        let hl = hessian(LossFamily::Logistic, &random_block(LossFamily::Logistic, 40, 6, 9), &[0.2; 6]).unwrap();
        assert!(hl.max_asymmetry() < 1e-12);
    }

    #[test]
    fn second_derivative_bounds() {
        for b in [-800.0, -30.0, -1.0, 0.0, 2.0, 40.0, 750.0] {
            let d2 = LossFamily::Logistic.d2(1.0, b);
            assert!(d2 >= 0.0 && d2 <= 0.25);
            assert_eq!(LossFamily::Linear.d2(0.0, b), 1.0);
        }
        assert!(LossFamily::Logistic.d2(0.0, 3.0) > 0.0);
    }

    #[test]
    fn logistic_is_stable_for_large_margins() {
        assert!(softplus(800.0).is_finite());
        assert_eq!(softplus(-800.0), 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let b = random_block(LossFamily::Linear, 5, 3, 1);
        assert!(matches!(
            grad(LossFamily::Linear, &b, &[0.0; 2]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }
}
