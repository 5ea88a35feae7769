//! Variant for machine-level heteroscedastic noise in the linear model.
//!
//! Distributed CV is replaced by a multiplier-quantile choice of `λ^(t)`,
//! and each surrogate step penalises coordinate `l` with loading `Ψ_l`, the
//! root of the cross-machine mean of squared per-sample gradients. De-biasing
//! and the bootstrap are unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{dist_boots, BootstrapSpec, InferenceResult};
use crate::cluster::ShardedDataset;
use crate::csl::{run_engine, CslState, EngineOptions, LambdaContext, RoundInput, StepPenalty, TuningPolicy};
use crate::error::{Error, Result};
use crate::glm::LossFamily;
use crate::numeric::{empirical_quantile, linf_norm};
use crate::rng::{derive_stream, Purpose, RngKey};
use crate::solver::SolverConfig;

/// Loadings below this value are raised to it.
pub const PSI_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeteroConfig {
    pub c: f64,
    pub b_lambda: usize,
    pub quantile_level: f64,
}

impl Default for HeteroConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            b_lambda: 500,
            quantile_level: 0.90,
        }
    }
}

impl HeteroConfig {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid(format!("c must be positive, got {}", self.c)));
        }
        if self.b_lambda == 0 {
            return Err(Error::invalid("b_lambda must be at least 1"));
        }
        if !(self.quantile_level > 0.0 && self.quantile_level < 1.0) {
            return Err(Error::invalid("quantile_level must lie in (0,1)"));
        }
        Ok(())
    }
}

/// `quantile_level` quantile of `Λ_b = c·k⁻¹‖Σ_j ε_jb g_j‖∞`. Gradients are
/// tagged with their machine id; `ε_jb` is drawn from
/// `key.machine(id).index(key.index + b)`, so the result does not depend on
/// the order of `grads`.
pub fn hetero_lambda(grads: &[(u64, Vec<f64>)], config: &HeteroConfig, key: RngKey) -> Result<f64> {
    config.validate()?;
    if grads.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut sorted: Vec<&(u64, Vec<f64>)> = grads.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let d = sorted[0].1.len();
    let k = sorted.len() as f64;
    let key = key.purpose(Purpose::Hetero);
    let draws = (0..config.b_lambda)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; d];
            for (id, g) in &sorted {
                let eps = derive_stream(key.machine(*id).index(key.index.wrapping_add(b as u64))).standard_normal();
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += eps * v;
                }
            }
            Ok(config.c * linf_norm(&acc)? / k)
        })
        .collect::<Result<Vec<f64>>>()?;
    empirical_quantile(&draws, config.quantile_level)
}

/// `Ψ_l = √(k⁻¹ Σ_j (ψ_j)_l)`; no floor is applied here.
pub fn hetero_loadings(psis: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = psis.first().ok_or(Error::EmptySample)?;
    let d = first.len();
    let mut sum = vec![0.0; d];
    for psi in psis {
        if psi.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: psi.len(),
            });
        }
        for (l, &v) in psi.iter().enumerate() {
            if v < 0.0 || v.is_nan() {
                return Err(Error::NegativeMoment { index: l, value: v });
            }
            sum[l] += v;
        }
    }
    let k = psis.len() as f64;
    Ok(sum.into_iter().map(|s| (s / k).sqrt()).collect())
}

/// Loadings used in the surrogate step: [`hetero_loadings`] raised to
/// [`PSI_FLOOR`].
pub fn penalty_loadings(psis: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(hetero_loadings(psis)?.into_iter().map(|v| v.max(PSI_FLOOR)).collect())
}

/// Runs the variant for every `τ ∈ 1..=tau_max`. `policy` supplies `λ^(0)`
/// and the nodewise penalties; round penalties come from [`hetero_lambda`].
/// Round `t` draws its multipliers from indices `t·2³² + b`.
pub fn run_algorithm5_path(
    data: &ShardedDataset,
    tau_max: usize,
    hetero: &HeteroConfig,
    policy: &dyn TuningPolicy,
    key: RngKey,
    config: &SolverConfig,
) -> Result<Vec<CslState>> {
    hetero.validate()?;
    let mut rule = |_: &LambdaContext, input: &RoundInput, moments: Option<&[Vec<f64>]>| {
        let tagged: Vec<(u64, Vec<f64>)> = input
            .gathered
            .local
            .iter()
            .enumerate()
            .map(|(j, g)| (j as u64, g.clone()))
            .collect();
        let round_key = key.index((input.t as u64) << 32);
        let lambda = hetero_lambda(&tagged, hetero, round_key)?;
        let psis = moments.ok_or_else(|| Error::invalid("second moments were not gathered"))?;
        let loadings = penalty_loadings(psis)?;
        Ok(StepPenalty {
            lambda,
            loadings: Some(loadings),
        })
    };
    let options = EngineOptions {
        mask: None,
        with_moments: true,
        strict: true,
    };
    run_engine(data, LossFamily::Linear, tau_max, policy, config, options, &mut rule).map_err(|e| match e {
        Error::Round { round, source } if round > 0 && matches!(*source, Error::Divergence { .. }) => {
            Error::HeteroSolve {
                c: hetero.c,
                source: Box::new(Error::Round { round, source }),
            }
        }
        other => other,
    })
}

/// Full variant for one `τ`, followed by the bootstrap.
pub fn run_algorithm5(
    data: &ShardedDataset,
    tau: usize,
    hetero: &HeteroConfig,
    policy: &dyn TuningPolicy,
    spec: &BootstrapSpec,
    config: &SolverConfig,
) -> Result<InferenceResult> {
    let mut path = run_algorithm5_path(data, tau, hetero, policy, spec.key, config)?;
    let state = path.pop().expect("path has tau ≥ 1 entries");
    dist_boots(spec, &state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_give_zero_lambda() {
        let g = vec![(0, vec![0.0; 3]), (1, vec![0.0; 3])];
        assert_eq!(hetero_lambda(&g, &HeteroConfig::default(), RngKey::new(1, Purpose::Hetero)).unwrap(), 0.0);
    }

    #[test]
    fn half_normal_quantile() {
        let cfg = HeteroConfig {
            b_lambda: 20_000,
            ..HeteroConfig::default()
        };
        let lam = hetero_lambda(&[(0, vec![2.0, 0.0])], &cfg, RngKey::new(5, Purpose::Hetero)).unwrap();
        assert!((lam - 2.0 * 1.6449).abs() < 0.05, "{lam}");
    }

    #[test]
    fn linear_in_c_and_order_free() {
        let g = vec![(0, vec![1.0, -0.5]), (1, vec![0.2, 0.3]), (2, vec![-0.7, 0.1])];
        let key = RngKey::new(9, Purpose::Hetero);
        let base = hetero_lambda(&g, &HeteroConfig::default(), key).unwrap();
        let twice = hetero_lambda(&g, &HeteroConfig { c: 2.0, ..HeteroConfig::default() }, key).unwrap();
        assert_eq!(twice, 2.0 * base);
        let mut rev = g.clone();
        rev.reverse();
        assert_eq!(hetero_lambda(&rev, &HeteroConfig::default(), key).unwrap(), base);
    }

    #[test]
    fn loadings_examples() {
        let psi = hetero_loadings(&[vec![1.0, 4.0], vec![3.0, 4.0]]).unwrap();
        assert!((psi[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(psi[1], 2.0);
        assert_eq!(hetero_loadings(&[vec![0.0; 2]]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(penalty_loadings(&[vec![0.0, 4.0]]).unwrap(), vec![PSI_FLOOR, 2.0]);
        assert!(matches!(
            hetero_loadings(&[vec![1.0, -1.0]]),
            Err(Error::NegativeMoment { index: 1, .. })
        ));
    }
}
