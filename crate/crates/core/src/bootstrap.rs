//! Master-only multiplier bootstrap for the sup-norm quantile and the
//! simultaneous confidence band `θ̃_l ± c/√N`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csl::CslState;
use crate::error::{Error, Result};
use crate::numeric::{axpy, empirical_quantile, linf_norm, mean_vectors, Matrix};
use crate::rng::{derive_stream, Purpose, RngKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BootMethod {
    /// One multiplier per machine gradient.
    #[serde(rename = "k-grad")]
    KGrad,
    /// One multiplier per master sample plus one per worker gradient.
    #[serde(rename = "n+k-1-grad")]
    NK1Grad,
}

impl BootMethod {
    pub const ALL: [BootMethod; 2] = [BootMethod::KGrad, BootMethod::NK1Grad];

    pub fn name(self) -> &'static str {
        match self {
            BootMethod::KGrad => "k-grad",
            BootMethod::NK1Grad => "n+k-1-grad",
        }
    }
}

impl fmt::Display for BootMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BootMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k-grad" | "kgrad" => Ok(BootMethod::KGrad),
            "n+k-1-grad" | "nk1grad" | "nk1" => Ok(BootMethod::NK1Grad),
            _ => Err(Error::invalid(format!("unknown bootstrap method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapSpec {
    pub method: BootMethod,
    pub b: usize,
    pub alpha: f64,
    /// Draw `b` uses `key.index(b)`.
    pub key: RngKey,
}

impl BootstrapSpec {
    pub fn new(method: BootMethod, key: RngKey) -> Self {
        Self {
            method,
            b: 500,
            alpha: 0.95,
            key: key.purpose(Purpose::Multiplier),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::invalid("bootstrap needs B ≥ 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha {} outside (0,1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub center: Vec<f64>,
    pub c_alpha: f64,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub draws: Vec<f64>,
    pub total_n: usize,
}

impl InferenceResult {
    fn from_draws(center: Vec<f64>, draws: Vec<f64>, alpha: f64, total_n: usize) -> Result<Self> {
        let c_alpha = empirical_quantile(&draws, alpha)?;
        let half = c_alpha / (total_n as f64).sqrt();
        Ok(Self {
            ci_lower: center.iter().map(|c| c - half).collect(),
            ci_upper: center.iter().map(|c| c + half).collect(),
            center,
            c_alpha,
            draws,
            total_n,
        })
    }

    /// Common width `2c/√N` of every interval.
    pub fn width(&self) -> f64 {
        2.0 * self.c_alpha / (self.total_n as f64).sqrt()
    }

    /// `‖√N(θ̃ − θ)‖∞`
    pub fn sup_statistic(&self, theta: &[f64]) -> Result<f64> {
        let root = (self.total_n as f64).sqrt();
        let diff: Vec<f64> = self.center.iter().zip(theta).map(|(a, b)| root * (a - b)).collect();
        linf_norm(&diff)
    }

    /// Whether every interval contains the matching entry of `theta`.
    pub fn covers(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .enumerate()
            .all(|(l, &v)| self.ci_lower[l] <= v && v <= self.ci_upper[l])
    }

    /// Coordinates whose interval excludes zero.
    pub fn significant(&self) -> Vec<bool> {
        self.ci_lower
            .iter()
            .zip(&self.ci_upper)
            .map(|(lo, hi)| *lo > 0.0 || *hi < 0.0)
            .collect()
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_grads(theta_inv: &Matrix, grads: &[Vec<f64>], g_bar: &[f64]) -> Result<usize> {
    let d = g_bar.len();
    check_len(d, theta_inv.rows())?;
    check_len(d, theta_inv.cols())?;
    for g in grads {
        check_len(d, g.len())?;
    }
    Ok(d)
}

/// `−Θ̃·k^{−1/2}·Σ_j ε_j √n (g_j − ḡ)`
pub fn kgrad_vector(
    theta_inv: &Matrix,
    grads: &[Vec<f64>],
    g_bar: &[f64],
    eps: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    let d = check_grads(theta_inv, grads, g_bar)?;
    check_len(grads.len(), eps.len())?;
    let root_n = (n as f64).sqrt();
    let mut acc = vec![0.0; d];
    for (g, &e) in grads.iter().zip(eps) {
        for l in 0..d {
            acc[l] += e * root_n * (g[l] - g_bar[l]);
        }
    }
    let scale = -1.0 / (grads.len() as f64).sqrt();
    let mut out = theta_inv.matvec(&acc);
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

pub fn kgrad_draw(theta_inv: &Matrix, grads: &[Vec<f64>], g_bar: &[f64], eps: &[f64], n: usize) -> Result<f64> {
    linf_norm(&kgrad_vector(theta_inv, grads, g_bar, eps, n)?)
}

/// `−Θ̃·(n+k−1)^{−1/2}·(Σ_i ε_i (g_i1 − ḡ) + Σ_{j≥2} ε_j √n (g_j − ḡ))`;
/// `eps` holds the `n` master multipliers followed by the `k − 1` worker ones.
pub fn nk1grad_vector(
    theta_inv: &Matrix,
    master_samples: &Matrix,
    workers: &[Vec<f64>],
    g_bar: &[f64],
    eps: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    let d = check_grads(theta_inv, workers, g_bar)?;
    check_len(d, master_samples.cols())?;
    check_len(n, master_samples.rows())?;
    check_len(n + workers.len(), eps.len())?;
    let root_n = (n as f64).sqrt();
    let mut acc = vec![0.0; d];
    for i in 0..n {
        let e = eps[i];
        for (l, v) in master_samples.row(i).iter().enumerate() {
            acc[l] += e * (v - g_bar[l]);
        }
    }
    for (g, &e) in workers.iter().zip(&eps[n..]) {
        for l in 0..d {
            acc[l] += e * root_n * (g[l] - g_bar[l]);
        }
    }
    let scale = -1.0 / ((n + workers.len()) as f64).sqrt();
    let mut out = theta_inv.matvec(&acc);
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

pub fn nk1grad_draw(
    theta_inv: &Matrix,
    master_samples: &Matrix,
    workers: &[Vec<f64>],
    g_bar: &[f64],
    eps: &[f64],
    n: usize,
) -> Result<f64> {
    linf_norm(&nk1grad_vector(theta_inv, master_samples, workers, g_bar, eps, n)?)
}

/// Centered summands `u_m` such that a draw is `‖Θ̃ Σ_m ε_m u_m‖∞` up to the
/// overall sign, with the method's normalisation folded in.
fn summands(method: BootMethod, state: &CslState) -> Matrix {
    let d = state.dim();
    let n = state.n;
    let g_bar = mean_vectors(&state.worker_grads);
    let root_n = (n as f64).sqrt();
    match method {
        BootMethod::KGrad => {
            let scale = root_n / (state.k as f64).sqrt();
            Matrix::from_fn(state.k, d, |j, l| scale * (state.worker_grads[j][l] - g_bar[l]))
        }
        BootMethod::NK1Grad => {
            let m = n + state.k - 1;
            let scale = 1.0 / (m as f64).sqrt();
            Matrix::from_fn(m, d, |i, l| {
                if i < n {
                    scale * (state.master_sample_grads.get(i, l) - g_bar[l])
                } else {
                    scale * root_n * (state.worker_grads[i - n + 1][l] - g_bar[l])
                }
            })
        }
    }
}

/// Multipliers of draw `b`.
pub fn multipliers(key: RngKey, b: usize, count: usize) -> Vec<f64> {
    let mut s = derive_stream(key.index(b as u64));
    let mut eps = vec![0.0; count];
    s.fill_normal(&mut eps);
    eps
}

/// Runs `B` draws on the master and forms the band around `θ̃^(τ)`.
pub fn dist_boots(spec: &BootstrapSpec, state: &CslState) -> Result<InferenceResult> {
    spec.validate()?;
    let u = summands(spec.method, state);
    let theta_inv = &state.theta_inv.theta_inv;
    let draws = (0..spec.b)
        .into_par_iter()
        .map(|b| {
            let eps = multipliers(spec.key, b, u.rows());
            let mut acc = vec![0.0; u.cols()];
            for (m, &e) in eps.iter().enumerate() {
                axpy(e, u.row(m), &mut acc);
            }
            linf_norm(&theta_inv.matvec(&acc))
        })
        .collect::<Result<Vec<f64>>>()?;
    InferenceResult::from_draws(state.theta_tau.clone(), draws, spec.alpha, state.total())
}
