//! The de-biased ℓ1-CSL estimator.
//!
//! A local lasso on the master gives `θ̃⁽⁰⁾`; a nodewise inverse `Θ̃` of the
//! master Hessian at `θ̃⁽⁰⁾` is computed once and frozen. Each of the `τ`
//! rounds gathers gradients at the current iterate. Rounds `t < τ` solve the
//! gradient-tilted surrogate lasso on the master; round `τ` applies one
//! de-biasing step. The last iterate before de-biasing and its gradients are
//! kept for the bootstrap.

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, CommLedger, Gathered, ShardedDataset};
use crate::error::{Error, Result};
use crate::glm::{self, DataBlock, LossFamily};
use crate::nodewise::{node, NodewiseResult};
use crate::numeric::Matrix;
use crate::solver::{solve_from, PenalizedProblem, QuadraticForm, SolveReport, SolverConfig};
use crate::tuning::{
    self, distributed_cv, local_cv, nodewise_cv, surrogate_grid, theory_lambda_glm,
    theory_lambda_linear, theory_lambda_nodewise, NodewiseMode, RegimeExponents,
};

/// Master loss `L₁`, with the Gram form cached for the linear model.
#[derive(Debug, Clone)]
pub enum MasterLoss<'a> {
    Quadratic(QuadraticForm),
    Glm { family: LossFamily, block: &'a DataBlock },
}

impl<'a> MasterLoss<'a> {
    pub fn new(family: LossFamily, block: &'a DataBlock) -> Self {
        match family {
            LossFamily::Linear => MasterLoss::Quadratic(QuadraticForm::from_linear_block(block)),
            _ => MasterLoss::Glm { family, block },
        }
    }

    pub fn problem(&self, lambda: f64) -> PenalizedProblem<'_> {
        match self {
            MasterLoss::Quadratic(qf) => PenalizedProblem::quadratic(qf, lambda),
            MasterLoss::Glm { family, block } => PenalizedProblem::glm(*family, block, lambda),
        }
    }
}

/// Tilt of the surrogate loss: `∇L₁(θ) − ∇L_N(θ)`.
pub fn surrogate_tilt(master_grad: &[f64], grad_n: &[f64]) -> Vec<f64> {
    master_grad.iter().zip(grad_n).map(|(a, b)| a - b).collect()
}

/// Penalty of one surrogate step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPenalty {
    pub lambda: f64,
    /// Per-coordinate loadings; `None` means all ones.
    pub loadings: Option<Vec<f64>>,
}

/// Solves `L₁(θ) − θᵀa + λ‖Ψθ‖₁` on the master, warm-started at `start`.
pub fn csl_step(
    master: &MasterLoss,
    tilt: &[f64],
    penalty: &StepPenalty,
    mask: Option<&[bool]>,
    start: &[f64],
    config: &SolverConfig,
) -> Result<SolveReport> {
    let mut problem = master.problem(penalty.lambda).with_tilt(tilt.to_vec());
    if let Some(l) = &penalty.loadings {
        problem = problem.with_loadings(l.clone());
    }
    if let Some(m) = mask {
        problem = problem.with_mask(m.to_vec());
    }
    solve_from(&problem, config, start)
}

/// `θ − Θ̃·∇L_N(θ)`.
pub fn debias(theta_prev: &[f64], theta_inv: &Matrix, grad_n: &[f64]) -> Result<Vec<f64>> {
    let d = theta_prev.len();
    if theta_inv.rows() != d || theta_inv.cols() != d || grad_n.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if grad_n.len() != d { grad_n.len() } else { theta_inv.rows() },
        });
    }
    let step = theta_inv.matvec(grad_n);
    Ok(theta_prev.iter().zip(&step).map(|(t, s)| t - s).collect())
}

/// Everything the master needs to choose a penalty.
#[derive(Debug, Clone, Copy)]
pub struct LambdaContext<'a> {
    pub family: LossFamily,
    pub master: &'a DataBlock,
    pub k: usize,
    pub mask: Option<&'a [bool]>,
}

/// State visible when choosing `λ^(t)`.
#[derive(Debug, Clone, Copy)]
pub struct RoundInput<'a> {
    pub t: usize,
    pub theta_prev: &'a [f64],
    pub gathered: &'a Gathered,
    pub tilt: &'a [f64],
    pub previous_lambda: f64,
}

/// Source of `λ^(0)`, the nodewise penalties, and `λ^(t)`.
pub trait TuningPolicy: Sync {
    fn initial_lambda(&self, ctx: &LambdaContext, config: &SolverConfig) -> Result<f64>;

    /// `xw` is the weighted master design at `θ̃⁽⁰⁾`.
    fn nodewise_lambdas(&self, ctx: &LambdaContext, xw: &Matrix, config: &SolverConfig) -> Result<Vec<f64>>;

    fn round_lambda(&self, ctx: &LambdaContext, input: &RoundInput, config: &SolverConfig) -> Result<f64>;
}

/// Fixed penalties. Round `t` uses `rounds[t − 1]`, repeating the last
/// entry (or `initial` when empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedLambdas {
    pub initial: f64,
    pub nodewise: f64,
    #[serde(default)]
    pub rounds: Vec<f64>,
}

impl TuningPolicy for FixedLambdas {
    fn initial_lambda(&self, _: &LambdaContext, _: &SolverConfig) -> Result<f64> {
        Ok(self.initial)
    }

    fn nodewise_lambdas(&self, _: &LambdaContext, xw: &Matrix, _: &SolverConfig) -> Result<Vec<f64>> {
        Ok(vec![self.nodewise; xw.cols()])
    }

    fn round_lambda(&self, _: &LambdaContext, input: &RoundInput, _: &SolverConfig) -> Result<f64> {
        Ok(match self.rounds.len() {
            0 => self.initial,
            len => self.rounds[(input.t - 1).min(len - 1)],
        })
    }
}

/// Closed-form rates with constant `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRates {
    pub s0: usize,
    pub c: f64,
}

impl TheoryRates {
    fn rate(&self, ctx: &LambdaContext, t: usize) -> Result<f64> {
        let (n, d) = (ctx.master.n_rows(), ctx.master.dim());
        match ctx.family {
            LossFamily::Linear => Ok(theory_lambda_linear(t, n, ctx.k, d, self.s0, self.c)),
            LossFamily::Logistic => {
                let e = RegimeExponents::from_sizes(n, ctx.k.max(2), d, self.s0.max(2))?;
                theory_lambda_glm(t, n, ctx.k, d, self.s0, &e, self.c)
            }
        }
    }
}

impl TuningPolicy for TheoryRates {
    fn initial_lambda(&self, ctx: &LambdaContext, _: &SolverConfig) -> Result<f64> {
        self.rate(ctx, 0)
    }

    fn nodewise_lambdas(&self, ctx: &LambdaContext, xw: &Matrix, _: &SolverConfig) -> Result<Vec<f64>> {
        Ok(vec![theory_lambda_nodewise(ctx.master.n_rows(), xw.cols(), self.c); xw.cols()])
    }

    fn round_lambda(&self, ctx: &LambdaContext, input: &RoundInput, _: &SolverConfig) -> Result<f64> {
        self.rate(ctx, input.t)
    }
}

/// Cross-validation throughout: local CV for `λ^(0)`, nodewise CV, and
/// distributed CV with `min(k − 1, max_distributed_folds)` folds for `λ^(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossValidation {
    /// Local folds; `None` picks 10 for linear and 5 for logistic.
    pub local_folds: Option<usize>,
    pub max_distributed_folds: usize,
    pub nodewise_folds: Option<usize>,
    pub nodewise_mode: NodewiseMode,
    pub grid_len: usize,
}

impl Default for CrossValidation {
    fn default() -> Self {
        Self {
            local_folds: None,
            max_distributed_folds: 5,
            nodewise_folds: None,
            nodewise_mode: NodewiseMode::Average { columns: 10 },
            grid_len: tuning::DEFAULT_GRID_LEN,
        }
    }
}

impl CrossValidation {
    fn folds(&self, family: LossFamily) -> usize {
        self.local_folds.unwrap_or(match family {
            LossFamily::Linear => 10,
            LossFamily::Logistic => 5,
        })
    }
}

impl TuningPolicy for CrossValidation {
    fn initial_lambda(&self, ctx: &LambdaContext, config: &SolverConfig) -> Result<f64> {
        let grid = tuning::local_grid(ctx.master, ctx.family, ctx.mask)?;
        Ok(local_cv(ctx.master, ctx.family, &grid, self.folds(ctx.family), ctx.mask, config)?.lambda)
    }

    fn nodewise_lambdas(&self, ctx: &LambdaContext, xw: &Matrix, config: &SolverConfig) -> Result<Vec<f64>> {
        let folds = self.nodewise_folds.unwrap_or_else(|| self.folds(ctx.family));
        nodewise_cv(xw, folds, self.grid_len, self.nodewise_mode, config)
    }

    fn round_lambda(&self, ctx: &LambdaContext, input: &RoundInput, config: &SolverConfig) -> Result<f64> {
        let folds = (ctx.k - 1).min(self.max_distributed_folds);
        if folds < 2 {
            // Too few workers to hold out gradients: keep the last penalty.
            return Ok(input.previous_lambda);
        }
        let grid = surrogate_grid(ctx.master, ctx.family, input.tilt, ctx.mask)?;
        let sel = distributed_cv(
            ctx.master,
            ctx.family,
            &input.gathered.local[1..],
            input.theta_prev,
            &grid,
            folds,
            ctx.mask,
            config,
        )?;
        Ok(sel.lambda)
    }
}

/// Result of `τ` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CslState {
    pub tau: usize,
    /// `θ̃^(τ)`, the de-biased estimate.
    pub theta_tau: Vec<f64>,
    /// `θ̃^(τ−1)`, at which every stored gradient is evaluated.
    pub theta_prev: Vec<f64>,
    pub theta_init: Vec<f64>,
    /// `∇L_j(θ̃^(τ−1))` for all `k` machines, master first.
    pub worker_grads: Vec<Vec<f64>>,
    /// `∇L_N(θ̃^(τ−1))`
    pub grad_n: Vec<f64>,
    /// Per-sample master gradients at `θ̃^(τ−1)`, `n × d`.
    pub master_sample_grads: Matrix,
    pub theta_inv: NodewiseResult,
    pub nodewise_lambdas: Vec<f64>,
    /// `λ^(0), …, λ^(τ−1)`
    pub lambdas_used: Vec<f64>,
    pub ledger: CommLedger,
    /// Surrogate or initial solves that stopped without a KKT certificate.
    pub unconverged_solves: usize,
    pub n: usize,
    pub k: usize,
}

impl CslState {
    pub fn dim(&self) -> usize {
        self.theta_tau.len()
    }

    pub fn total(&self) -> usize {
        self.n * self.k
    }
}

/// Hook for the per-round penalty, given the gathered gradients and, when
/// requested, the per-machine second moments.
pub(crate) type RoundRule<'r> =
    dyn FnMut(&LambdaContext, &RoundInput, Option<&[Vec<f64>]>) -> Result<StepPenalty> + 'r;

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct EngineOptions<'a> {
    pub mask: Option<&'a [bool]>,
    /// Workers also upload gradient second moments.
    pub with_moments: bool,
    /// A surrogate solve without a KKT certificate is an error.
    pub strict: bool,
}

/// Shared skeleton: returns the states for `τ = 1..=tau_max`.
pub(crate) fn run_engine(
    data: &ShardedDataset,
    family: LossFamily,
    tau_max: usize,
    policy: &dyn TuningPolicy,
    config: &SolverConfig,
    options: EngineOptions,
    rule: &mut RoundRule,
) -> Result<Vec<CslState>> {
    let EngineOptions {
        mask,
        with_moments,
        strict,
    } = options;
    if tau_max == 0 {
        return Err(Error::invalid("tau must be at least 1"));
    }
    let mut cluster = Cluster::new(data, family)?;
    let master_block = data.master();
    let ctx = LambdaContext {
        family,
        master: master_block,
        k: data.k(),
        mask,
    };
    let master = MasterLoss::new(family, master_block);
    let d = data.dim();
    let mut unconverged = 0;

    let lambda0 = policy.initial_lambda(&ctx, config).map_err(|e| e.at_round(0))?;
    let init = csl_step(
        &master,
        &vec![0.0; d],
        &StepPenalty {
            lambda: lambda0,
            loadings: None,
        },
        mask,
        &vec![0.0; d],
        config,
    )
    .map_err(|e| e.at_round(0))?;
    unconverged += usize::from(!init.converged);
    let theta_init = init.theta_hat;

    let xw = glm::weighted_design(family, master_block, &theta_init)?;
    let node_lambdas = policy.nodewise_lambdas(&ctx, &xw, config).map_err(|e| e.at_round(0))?;
    let hessian = xw.gram().scaled(1.0 / master_block.n_rows() as f64);
    let theta_inv = node(&hessian, &node_lambdas, config).map_err(|e| e.at_round(0))?;

    let mut states = Vec::with_capacity(tau_max);
    let mut theta = theta_init.clone();
    let mut lambdas = vec![lambda0];
    for t in 1..=tau_max {
        let (gathered, moments) = if with_moments {
            let g = cluster.gather_with_moments(&theta).map_err(|e| e.at_round(t))?;
            (g.gradients, Some(g.second_moments))
        } else {
            (cluster.gather_gradients(&theta).map_err(|e| e.at_round(t))?, None)
        };
        let theta_tau = debias(&theta, &theta_inv.theta_inv, &gathered.mean)?;
        states.push(CslState {
            tau: t,
            theta_tau,
            theta_prev: theta.clone(),
            theta_init: theta_init.clone(),
            master_sample_grads: glm::per_sample_grads(family, master_block, &theta)?,
            worker_grads: gathered.local.clone(),
            grad_n: gathered.mean.clone(),
            theta_inv: theta_inv.clone(),
            nodewise_lambdas: node_lambdas.clone(),
            lambdas_used: lambdas.clone(),
            ledger: cluster.ledger(),
            unconverged_solves: unconverged,
            n: data.n(),
            k: data.k(),
        });
        if t == tau_max {
            break;
        }
        let tilt = surrogate_tilt(&gathered.local[0], &gathered.mean);
        let input = RoundInput {
            t,
            theta_prev: &theta,
            gathered: &gathered,
            tilt: &tilt,
            previous_lambda: *lambdas.last().expect("λ⁽⁰⁾ is always present"),
        };
        let penalty = rule(&ctx, &input, moments.as_deref()).map_err(|e| e.at_round(t))?;
        let report = csl_step(&master, &tilt, &penalty, mask, &theta, config).map_err(|e| e.at_round(t))?;
        if strict && !report.converged {
            return Err(Error::Divergence {
                iteration: report.iterations,
            }
            .at_round(t));
        }
        unconverged += usize::from(!report.converged);
        lambdas.push(penalty.lambda);
        theta = report.theta_hat;
    }
    Ok(states)
}

/// Runs the estimator once for every `τ ∈ 1..=tau_max`, sharing the common
/// prefix. Entry `τ − 1` equals a separate run with that `τ`.
pub fn run_algorithm1_path(
    data: &ShardedDataset,
    family: LossFamily,
    tau_max: usize,
    policy: &dyn TuningPolicy,
    mask: Option<&[bool]>,
    config: &SolverConfig,
) -> Result<Vec<CslState>> {
    let mut rule = |ctx: &LambdaContext, input: &RoundInput, _: Option<&[Vec<f64>]>| {
        Ok(StepPenalty {
            lambda: policy.round_lambda(ctx, input, config)?,
            loadings: None,
        })
    };
    let options = EngineOptions {
        mask,
        ..EngineOptions::default()
    };
    run_engine(data, family, tau_max, policy, config, options, &mut rule)
}

pub fn run_algorithm1(
    data: &ShardedDataset,
    family: LossFamily,
    tau: usize,
    policy: &dyn TuningPolicy,
    config: &SolverConfig,
) -> Result<CslState> {
    let mut path = run_algorithm1_path(data, family, tau, policy, None, config)?;
    Ok(path.pop().expect("path has tau ≥ 1 entries"))
}
