//! Monte-Carlo experiments: simultaneous coverage and width of the bootstrap
//! bands, the centralized oracle width, and the screening study.
//!
//! Every replication draws its data and multipliers from keyed streams, so
//! results do not depend on the thread count or scheduling order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{dist_boots, BootMethod, BootstrapSpec, InferenceResult};
use crate::cluster::shard;
use crate::csl::{run_algorithm1_path, CrossValidation, CslState, FixedLambdas, TheoryRates, TuningPolicy};
use crate::datagen::{gen_dataset, gen_screening_design, Dataset, DesignKind, DesignSpec, ModelSpec, Noise};
use crate::error::{Error, Result};
use crate::glm::LossFamily;
use crate::hetero::{run_algorithm5_path, HeteroConfig};
use crate::numeric::{empirical_quantile, linf_norm};
use crate::rng::{Purpose, RngKey};
use crate::solver::SolverConfig;
use crate::tuning::NodewiseMode;

/// Header of the coverage CSV.
pub const COVERAGE_HEADER: [&str; 14] = [
    "model", "design", "d", "N", "s0", "k", "tau", "method", "coverage", "avg_width", "width_ratio", "reps", "B",
    "seed",
];

/// Header of the screening CSV.
pub const SCREENING_HEADER: [&str; 5] = ["d", "tau", "relevant_detected", "spurious_detected", "seed"];

/// Oracle replications use data replications from this offset on, so they
/// never share streams with the coverage replications.
const ORACLE_REPLICATION_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TuningMode {
    Cv(CrossValidation),
    Theory(TheoryRates),
    Fixed(FixedLambdas),
}

impl Default for TuningMode {
    fn default() -> Self {
        TuningMode::Cv(CrossValidation::default())
    }
}

impl TuningMode {
    pub fn policy(&self) -> &dyn TuningPolicy {
        match self {
            TuningMode::Cv(p) => p,
            TuningMode::Theory(p) => p,
            TuningMode::Fixed(p) => p,
        }
    }
}

/// Denominator of the width ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    /// A precomputed width; when set nothing is simulated.
    pub width: Option<f64>,
    /// Replications of the centralized estimator; 0 disables the oracle and
    /// the width ratio is reported as NaN.
    pub reps: usize,
    /// Simulate the oracle separately for every `k` (only matters for
    /// machine-level noise).
    pub fix_k: bool,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            width: None,
            reps: 500,
            fix_k: false,
        }
    }
}

fn default_methods() -> Vec<BootMethod> {
    BootMethod::ALL.to_vec()
}

fn default_b() -> usize {
    500
}

fn default_alpha() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: LossFamily,
    pub design: DesignKind,
    pub d: usize,
    pub n_total: usize,
    pub s0: usize,
    #[serde(default)]
    pub noise: Noise,
    pub ks: Vec<usize>,
    pub taus: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<BootMethod>,
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tuning: TuningMode,
    /// Runs the heteroscedastic variant instead of distributed CV rounds.
    #[serde(default)]
    pub hetero: Option<HeteroConfig>,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub plot_script: Option<String>,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn design_spec(&self) -> DesignSpec {
        DesignSpec {
            kind: self.design,
            d: self.d,
        }
    }

    pub fn model_spec(&self, k: usize) -> ModelSpec {
        ModelSpec {
            family: self.family,
            d: self.d,
            s0: self.s0,
            n_total: self.n_total,
            k,
            noise: self.noise,
            noise_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::invalid("reps must be at least 1"));
        }
        if self.ks.is_empty() || self.taus.is_empty() || self.methods.is_empty() {
            return Err(Error::invalid("ks, taus and methods must be non-empty"));
        }
        if self.taus.contains(&0) {
            return Err(Error::invalid("every tau must be at least 1"));
        }
        for &k in &self.ks {
            self.model_spec(k).validate()?;
        }
        crate::datagen::build_sigma(&self.design_spec())?;
        if self.b == 0 || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("need B ≥ 1 and alpha in (0,1)"));
        }
        if self.hetero.is_some() && self.family != LossFamily::Linear {
            return Err(Error::invalid("the heteroscedastic variant is linear only"));
        }
        if let Some(w) = self.oracle.width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("oracle width must be positive, got {w}")));
            }
        }
        Ok(())
    }

    fn tau_max(&self) -> usize {
        self.taus.iter().copied().max().unwrap_or(1)
    }
}

/// One aggregated `(k, τ, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub model: String,
    pub design: String,
    pub d: usize,
    #[serde(rename = "N")]
    pub n_total: usize,
    pub s0: usize,
    pub k: usize,
    pub tau: usize,
    pub method: BootMethod,
    pub coverage: f64,
    pub avg_width: f64,
    pub width_ratio: f64,
    pub reps: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
    /// Oracle width used for each entry of `ks`.
    pub oracle_widths: Vec<f64>,
    /// One message per failed cell block; its rows hold NaN.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    covered: bool,
    width: f64,
}

/// Simultaneous coverage, computed both from the sup statistic and from
/// per-coordinate containment; the two must agree.
pub fn simultaneous_coverage(result: &InferenceResult, theta_star: &[f64]) -> Result<bool> {
    let by_norm = result.sup_statistic(theta_star)? <= result.c_alpha;
    let by_coordinates = result.covers(theta_star);
    if by_norm != by_coordinates {
        return Err(Error::invalid(format!(
            "sup-norm and per-coordinate coverage disagree (statistic {}, c {})",
            result.sup_statistic(theta_star)?,
            result.c_alpha
        )));
    }
    Ok(by_norm)
}

fn run_path(
    cfg: &ExperimentConfig,
    data: &Dataset,
    k: usize,
    rep: u64,
    solver: &SolverConfig,
) -> Result<Vec<CslState>> {
    let sharded = shard(&data.x, &data.y, k)?;
    let policy = cfg.tuning.policy();
    match &cfg.hetero {
        Some(h) => {
            let key = RngKey::new(cfg.seed, Purpose::Hetero).replication(rep).machine(k as u64);
            run_algorithm5_path(&sharded, cfg.tau_max(), h, policy, key, solver)
        }
        None => run_algorithm1_path(&sharded, cfg.family, cfg.tau_max(), policy, None, solver),
    }
}

fn cell_block(cfg: &ExperimentConfig, data: &Dataset, k: usize, rep: u64, solver: &SolverConfig) -> Result<Vec<Outcome>> {
    let path = run_path(cfg, data, k, rep, solver)?;
    let mut out = Vec::with_capacity(cfg.taus.len() * cfg.methods.len());
    for &tau in &cfg.taus {
        let state = &path[tau - 1];
        for &method in &cfg.methods {
            let spec = BootstrapSpec {
                b: cfg.b,
                alpha: cfg.alpha,
                ..BootstrapSpec::new(method, RngKey::new(cfg.seed, Purpose::Multiplier).replication(rep))
            };
            let result = dist_boots(&spec, state)?;
            out.push(Outcome {
                covered: simultaneous_coverage(&result, &data.theta_star)?,
                width: result.width(),
            });
        }
    }
    Ok(out)
}

/// All cell blocks of one replication, one entry per `k`.
fn replicate(cfg: &ExperimentConfig, rep: u64, solver: &SolverConfig) -> Vec<Result<Vec<Outcome>>> {
    let key = RngKey::new(cfg.seed, Purpose::Data).replication(rep);
    let design = cfg.design_spec();
    // Homoscedastic data does not depend on k, so it is drawn once.
    let shared = match cfg.noise {
        Noise::Homoscedastic => Some(gen_dataset(&cfg.model_spec(1), &design, key)),
        Noise::MachineHetero => None,
    };
    cfg.ks
        .iter()
        .map(|&k| match &shared {
            Some(Ok(data)) => cell_block(cfg, data, k, rep, solver),
            Some(Err(e)) => Err(Error::invalid(e.to_string())),
            None => gen_dataset(&cfg.model_spec(k), &design, key).and_then(|data| cell_block(cfg, &data, k, rep, solver)),
        })
        .collect()
}

/// Settings of the centralized oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    pub family: LossFamily,
    pub design: DesignSpec,
    pub n_total: usize,
    pub s0: usize,
    pub noise: Noise,
    /// Machines used only to generate machine-level noise; the estimator
    /// always sees the pooled data.
    pub k: usize,
    pub reps: usize,
    pub seed: u64,
}

/// `2 × q₀.₉₅(‖θ̂ − θ*‖∞)` over `reps` datasets, where `θ̂` is the de-biased
/// lasso fitted on all `N` rows with the penalties chosen by `policy`.
pub fn oracle_width(spec: &OracleSpec, policy: &dyn TuningPolicy, solver: &SolverConfig) -> Result<f64> {
    if spec.reps == 0 {
        return Err(Error::invalid("oracle needs at least one replication"));
    }
    let model = ModelSpec {
        family: spec.family,
        d: spec.design.d,
        s0: spec.s0,
        n_total: spec.n_total,
        k: spec.k,
        noise: spec.noise,
        noise_scale: 1.0,
    };
    let errors = (0..spec.reps as u64)
        .into_par_iter()
        .map(|r| {
            let key = RngKey::new(spec.seed, Purpose::Data).replication(ORACLE_REPLICATION_OFFSET + r);
            let data = gen_dataset(&model, &spec.design, key)?;
            let pooled = shard(&data.x, &data.y, 1)?;
            let state = run_algorithm1_path(&pooled, spec.family, 1, policy, None, solver)?
                .pop()
                .expect("one state for tau = 1");
            let diff: Vec<f64> = state.theta_tau.iter().zip(&data.theta_star).map(|(a, b)| a - b).collect();
            linf_norm(&diff)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(2.0 * empirical_quantile(&errors, 0.95)?)
}

fn oracle_widths(cfg: &ExperimentConfig, solver: &SolverConfig) -> Result<Vec<f64>> {
    if let Some(w) = cfg.oracle.width {
        return Ok(vec![w; cfg.ks.len()]);
    }
    if cfg.oracle.reps == 0 {
        return Ok(vec![f64::NAN; cfg.ks.len()]);
    }
    let spec = |k: usize| OracleSpec {
        family: cfg.family,
        design: cfg.design_spec(),
        n_total: cfg.n_total,
        s0: cfg.s0,
        noise: if cfg.oracle.fix_k { cfg.noise } else { Noise::Homoscedastic },
        k,
        reps: cfg.oracle.reps,
        seed: cfg.seed,
    };
    let policy = cfg.tuning.policy();
    if cfg.oracle.fix_k {
        cfg.ks.iter().map(|&k| oracle_width(&spec(k), policy, solver)).collect()
    } else {
        let w = oracle_width(&spec(1), policy, solver)?;
        Ok(vec![w; cfg.ks.len()])
    }
}

/// Runs every `(k, τ, method)` cell over `cfg.reps` replications. Rows are
/// ordered by `k`, then `τ`, then method, as listed in the config. A failing
/// replication marks its whole `k` block with NaN and a message in
/// `failures`.
pub fn run_coverage(cfg: &ExperimentConfig, solver: &SolverConfig) -> Result<CoverageReport> {
    cfg.validate()?;
    let oracle = oracle_widths(cfg, solver)?;
    let per_rep: Vec<Vec<Result<Vec<Outcome>>>> =
        (0..cfg.reps as u64).into_par_iter().map(|rep| replicate(cfg, rep, solver)).collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let cells = cfg.taus.len() * cfg.methods.len();
    for (ki, &k) in cfg.ks.iter().enumerate() {
        let mut covered = vec![0usize; cells];
        let mut width_sum = vec![0.0; cells];
        let mut failed = false;
        for (rep, blocks) in per_rep.iter().enumerate() {
            match &blocks[ki] {
                Ok(outcomes) => {
                    for (c, o) in outcomes.iter().enumerate() {
                        covered[c] += o.covered as usize;
                        width_sum[c] += o.width;
                    }
                }
                Err(e) => {
                    failures.push(format!("k={k}, replication {rep}: {e}"));
                    failed = true;
                    break;
                }
            }
        }
        let reps = cfg.reps as f64;
        for (ti, &tau) in cfg.taus.iter().enumerate() {
            for (mi, &method) in cfg.methods.iter().enumerate() {
                let c = ti * cfg.methods.len() + mi;
                let (coverage, avg_width) = if failed {
                    (f64::NAN, f64::NAN)
                } else {
                    (covered[c] as f64 / reps, width_sum[c] / reps)
                };
                rows.push(CoverageRow {
                    model: cfg.family.name().to_string(),
                    design: cfg.design.name().to_string(),
                    d: cfg.d,
                    n_total: cfg.n_total,
                    s0: cfg.s0,
                    k,
                    tau,
                    method,
                    coverage,
                    avg_width,
                    width_ratio: avg_width / oracle[ki],
                    reps: cfg.reps,
                    b: cfg.b,
                    seed: cfg.seed,
                });
            }
        }
    }
    Ok(CoverageReport {
        rows,
        oracle_widths: oracle,
        failures,
    })
}

fn default_screening_ds() -> Vec<usize> {
    vec![200, 500, 1000]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    pub ds: Vec<usize>,
    pub taus: Vec<usize>,
    /// Rows per machine.
    pub n: usize,
    pub k: usize,
    pub b: usize,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub method: BootMethod,
    pub local_folds: usize,
    pub distributed_folds: usize,
    pub nodewise_folds: usize,
    pub output: Option<String>,
    pub plot_script: Option<String>,
    pub threads: Option<usize>,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            ds: default_screening_ds(),
            taus: vec![1, 2, 3],
            n: 500,
            k: 50,
            b: 500,
            alpha: 0.95,
            seeds: vec![0],
            method: BootMethod::NK1Grad,
            local_folds: 10,
            distributed_folds: 10,
            nodewise_folds: 10,
            output: None,
            plot_script: None,
            threads: None,
        }
    }
}

impl ScreeningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ds.is_empty() || self.taus.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("ds, taus and seeds must be non-empty"));
        }
        if self.taus.contains(&0) || self.n == 0 || self.k == 0 || self.b == 0 {
            return Err(Error::invalid("taus, n, k and B must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0,1)"));
        }
        Ok(())
    }

    /// Local, nodewise (per column) and distributed cross-validation.
    pub fn policy(&self) -> CrossValidation {
        CrossValidation {
            local_folds: Some(self.local_folds),
            max_distributed_folds: self.distributed_folds,
            nodewise_folds: Some(self.nodewise_folds),
            nodewise_mode: NodewiseMode::PerColumn,
            ..CrossValidation::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScreeningRow {
    pub d: usize,
    pub tau: usize,
    pub relevant_detected: usize,
    pub spurious_detected: usize,
    pub seed: u64,
}

/// Counts significant relevant and spurious columns; the intercept is left
/// unpenalized and not counted. Rows are ordered by seed, `d`, then `τ`.
pub fn run_screening(cfg: &ScreeningConfig, solver: &SolverConfig) -> Result<Vec<ScreeningRow>> {
    cfg.validate()?;
    let tau_max = cfg.taus.iter().copied().max().unwrap_or(1);
    let policy = cfg.policy();
    let jobs: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| cfg.ds.iter().map(move |&d| (s, d))).collect();
    let blocks = jobs
        .par_iter()
        .map(|&(seed, d)| {
            let data = gen_screening_design(d, cfg.n * cfg.k, RngKey::new(seed, Purpose::Data))?;
            let sharded = shard(&data.x, &data.y, cfg.k)?;
            let mut mask = vec![true; d];
            mask[data.intercept] = false;
            let path = run_algorithm1_path(&sharded, LossFamily::Logistic, tau_max, &policy, Some(&mask), solver)?;
            let key = RngKey::new(seed, Purpose::Multiplier).replication(d as u64);
            cfg.taus
                .iter()
                .map(|&tau| {
                    let spec = BootstrapSpec {
                        b: cfg.b,
                        alpha: cfg.alpha,
                        ..BootstrapSpec::new(cfg.method, key)
                    };
                    let sig = dist_boots(&spec, &path[tau - 1])?.significant();
                    Ok(ScreeningRow {
                        d,
                        tau,
                        relevant_detected: data.relevant.iter().filter(|&&l| sig[l]).count(),
                        spurious_detected: data.spurious.iter().filter(|&&l| sig[l]).count(),
                        seed,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            family: LossFamily::Linear,
            design: DesignKind::Toeplitz { rho: 0.5 },
            d: 6,
            n_total: 120,
            s0: 2,
            noise: Noise::Homoscedastic,
            ks: vec![2],
            taus: vec![1],
            methods: vec![BootMethod::KGrad],
            b: 50,
            alpha: 0.95,
            reps: 1,
            seed: 3,
            tuning: TuningMode::default(),
            hetero: None,
            oracle: OracleSettings {
                width: Some(1.0),
                ..OracleSettings::default()
            },
            output: None,
            plot_script: None,
            threads: None,
        }
    }

    #[test]
    fn smoke_single_cell() {
        let report = run_coverage(&tiny(), &SolverConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert!(row.coverage == 0.0 || row.coverage == 1.0);
        assert!(row.avg_width > 0.0);
        assert_eq!(row.width_ratio, row.avg_width);
        assert!(report.failures.is_empty());
    }

    #[test]
    fn row_count_matches_grid() {
        let cfg = ExperimentConfig {
            ks: vec![2, 4],
            taus: vec![1, 2],
            methods: BootMethod::ALL.to_vec(),
            reps: 2,
            ..tiny()
        };
        let report = run_coverage(&cfg, &SolverConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 8);
        let order: Vec<(usize, usize, BootMethod)> = report.rows.iter().map(|r| (r.k, r.tau, r.method)).collect();
        assert_eq!(order[0], (2, 1, BootMethod::KGrad));
        assert_eq!(order[3], (2, 2, BootMethod::NK1Grad));
        assert_eq!(order[4], (4, 1, BootMethod::KGrad));
        for r in &report.rows {
            assert!((0.0..=1.0).contains(&r.coverage));
        }
    }

    #[test]
    fn failing_block_yields_nan_rows() {
        // One-row machines make local cross-validation impossible.
        let cfg = ExperimentConfig {
            ks: vec![120, 2],
            ..tiny()
        };
        let report = run_coverage(&cfg, &SolverConfig::default()).unwrap();
        assert!(report.rows[0].coverage.is_nan());
        assert!(report.rows[1].coverage.is_finite());
        assert_eq!(report.failures.len(), 1);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig { reps: 0, ..tiny() }.validate().is_err());
        assert!(ExperimentConfig { ks: vec![7], ..tiny() }.validate().is_err());
        assert!(ExperimentConfig { taus: vec![0], ..tiny() }.validate().is_err());
        assert!(ExperimentConfig {
            family: LossFamily::Logistic,
            hetero: Some(HeteroConfig::default()),
            ..tiny()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"family":"linear","design":{"kind":"toeplitz","rho":0.9},"d":8,"n_total":64,"s0":2,
                "ks":[2],"taus":[1],"reps":1}"#,
        )
        .unwrap();
        assert_eq!(cfg.methods, BootMethod::ALL.to_vec());
        assert_eq!(cfg.b, 500);
        assert_eq!(cfg.tuning, TuningMode::default());
        assert_eq!(cfg.oracle.reps, 500);
    }
}
