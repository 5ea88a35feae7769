//! Synthetic designs: Gaussian covariates with Toeplitz or equi-correlated
//! covariance, sparse linear or logistic responses, machine-level
//! heteroscedastic noise, and a semi-synthetic screening design.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{sigmoid, LossFamily};
use crate::numeric::{dot, Matrix};
use crate::rng::{derive_stream, Purpose, RngKey, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DesignKind {
    /// `Σ_ll' = ρ^|l−l'|`
    Toeplitz { rho: f64 },
    /// `Σ_ll' = ρ` off the diagonal.
    #[serde(rename = "equicorr", alias = "equi-corr")]
    EquiCorr { rho: f64 },
}

impl DesignKind {
    pub fn name(&self) -> &'static str {
        match self {
            DesignKind::Toeplitz { .. } => "toeplitz",
            DesignKind::EquiCorr { .. } => "equicorr",
        }
    }

    pub fn rho(&self) -> f64 {
        match *self {
            DesignKind::Toeplitz { rho } | DesignKind::EquiCorr { rho } => rho,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(flatten)]
    pub kind: DesignKind,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Noise {
    #[default]
    Homoscedastic,
    /// Master rows `N(0,1)`; worker `j` rows `N(0, σ_j² + ω_ij)` with
    /// `σ_j² ~ U(2,3)` and `ω_ij ~ U(−0.2, 0.2)`.
    MachineHetero,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: LossFamily,
    pub d: usize,
    pub s0: usize,
    pub n_total: usize,
    pub k: usize,
    #[serde(default)]
    pub noise: Noise,
    /// Multiplies the linear noise; zero gives noiseless responses.
    #[serde(default = "one")]
    pub noise_scale: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.s0 > self.d {
            return Err(Error::invalid(format!("need 0 < d and s0 ≤ d (d = {}, s0 = {})", self.d, self.s0)));
        }
        if self.k == 0 || self.n_total == 0 || self.n_total % self.k != 0 {
            return Err(Error::NotDivisible {
                rows: self.n_total,
                k: self.k,
            });
        }
        if self.noise == Noise::MachineHetero && self.family != LossFamily::Linear {
            return Err(Error::invalid("heteroscedastic noise is only defined for the linear model"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Exact population covariance of the design.
pub fn build_sigma(spec: &DesignSpec) -> Result<Matrix> {
    let rho = spec.kind.rho();
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0,1), got {rho}")));
    }
    Ok(match spec.kind {
        DesignKind::Toeplitz { rho } => {
            Matrix::from_fn(spec.d, spec.d, |i, j| rho.powi((i as i64 - j as i64).unsigned_abs() as i32))
        }
        DesignKind::EquiCorr { rho } => Matrix::from_fn(spec.d, spec.d, |i, j| if i == j { 1.0 } else { rho }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub theta_star: Vec<f64>,
}

/// `rows` draws of `N(0, LLᵀ)` given the lower Cholesky factor `chol`.
pub fn gaussian_rows(chol: &Matrix, rows: usize, stream: &mut Stream) -> Matrix {
    let d = chol.rows();
    let mut z = vec![0.0; d];
    let mut out = Matrix::zeros(rows, d);
    for i in 0..rows {
        stream.fill_normal(&mut z);
        let row = out.row_mut(i);
        for (l, slot) in row.iter_mut().enumerate() {
            *slot = dot(&chol.row(l)[..=l], &z[..=l]);
        }
    }
    out
}

/// `θ* = (1, …, 1, 0, …, 0)` with `s0` ones.
pub fn theta_star(d: usize, s0: usize) -> Vec<f64> {
    (0..d).map(|l| if l < s0 { 1.0 } else { 0.0 }).collect()
}

/// Per-row noise variance of the linear model, before `noise_scale`.
/// Machine variances come from stream index 2 of `key` (purpose `Data`).
pub fn noise_variances(model: &ModelSpec, key: RngKey) -> Vec<f64> {
    match model.noise {
        Noise::Homoscedastic => vec![1.0; model.n_total],
        Noise::MachineHetero => {
            let n = model.n_total / model.k;
            let mut vs = derive_stream(key.purpose(Purpose::Data).index(2));
            let machine_var: Vec<f64> = (0..model.k).map(|_| vs.uniform(2.0, 3.0)).collect();
            (0..model.n_total)
                .map(|i| match i / n {
                    0 => 1.0,
                    j => machine_var[j] + vs.uniform(-0.2, 0.2),
                })
                .collect()
        }
    }
}

/// Generates one dataset. Streams are keyed by `key` with purpose `Data`:
/// index 0 drives covariates, index 1 responses, index 2 machine variances.
pub fn gen_dataset(model: &ModelSpec, design: &DesignSpec, key: RngKey) -> Result<Dataset> {
    model.validate()?;
    if design.d != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            got: design.d,
        });
    }
    let key = key.purpose(Purpose::Data);
    let chol = build_sigma(design)?.cholesky()?;
    let x = gaussian_rows(&chol, model.n_total, &mut derive_stream(key.index(0)));
    let theta = theta_star(model.d, model.s0);
    let eta = x.matvec(&theta);
    let mut ys = derive_stream(key.index(1));
    let y = match model.family {
        LossFamily::Logistic => eta
            .iter()
            .map(|&e| if ys.bernoulli(sigmoid(e)) { 1.0 } else { 0.0 })
            .collect(),
        LossFamily::Linear => noise_variances(model, key)
            .into_iter()
            .zip(&eta)
            .map(|(var, &e)| e + model.noise_scale * var.sqrt() * ys.standard_normal())
            .collect(),
    };
    Ok(Dataset { x, y, theta_star: theta })
}

/// Column layout of the screening design.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningData {
    pub x: Matrix,
    pub y: Vec<f64>,
    /// True coefficients, intercept first.
    pub coefficients: Vec<f64>,
    pub intercept: usize,
    pub relevant: Vec<usize>,
    pub spurious: Vec<usize>,
}

pub const SCREENING_RELEVANT: usize = 4;
const SCREENING_COEF: f64 = -1.0;
const SCREENING_INTERCEPT: f64 = -1.0;

/// Screening design with `d` columns: an intercept, four dummies of one
/// five-level categorical variable (the relevant set, coefficients −1), and
/// `d − 5` spurious columns drawn from `N(0, Toeplitz(0.5))` whose first
/// half is binarised (`≥ 0 → 1`). Responses are logistic with intercept −1.
pub fn gen_screening_design(d: usize, n_rows: usize, key: RngKey) -> Result<ScreeningData> {
    if d < 6 {
        return Err(Error::invalid(format!("screening design needs d ≥ 6, got {d}")));
    }
    let key = key.purpose(Purpose::Data);
    let m = d - 1 - SCREENING_RELEVANT;
    let spurious_block = if m == 1 {
        let mut s = derive_stream(key.index(0));
        Matrix::from_fn(n_rows, 1, |_, _| s.standard_normal())
    } else {
        let chol = build_sigma(&DesignSpec {
            kind: DesignKind::Toeplitz { rho: 0.5 },
            d: m,
        })?
        .cholesky()?;
        gaussian_rows(&chol, n_rows, &mut derive_stream(key.index(0)))
    };
    let binarised = m / 2;
    let mut cat = derive_stream(key.index(1));
    let mut x = Matrix::zeros(n_rows, d);
    for i in 0..n_rows {
        let level = cat.below(SCREENING_RELEVANT + 1);
        let row = x.row_mut(i);
        row[0] = 1.0;
        if level > 0 {
            row[level] = 1.0;
        }
        for (c, &v) in spurious_block.row(i).iter().enumerate() {
            row[1 + SCREENING_RELEVANT + c] = if c < binarised {
                if v >= 0.0 { 1.0 } else { 0.0 }
            } else {
                v
            };
        }
    }
    let mut coefficients = vec![0.0; d];
    coefficients[0] = SCREENING_INTERCEPT;
    for c in coefficients.iter_mut().skip(1).take(SCREENING_RELEVANT) {
        *c = SCREENING_COEF;
    }
    let mut ys = derive_stream(key.index(2));
    let y = x
        .matvec(&coefficients)
        .into_iter()
        .map(|e| if ys.bernoulli(sigmoid(e)) { 1.0 } else { 0.0 })
        .collect();
    Ok(ScreeningData {
        x,
        y,
        coefficients,
        intercept: 0,
        relevant: (1..=SCREENING_RELEVANT).collect(),
        spurious: (1 + SCREENING_RELEVANT..d).collect(),
    })
}
