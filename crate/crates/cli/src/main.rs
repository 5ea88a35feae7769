//! Command-line front end for the distributed bootstrap experiments.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use distboot::bootstrap::{dist_boots, BootMethod, BootstrapSpec};
use distboot::cluster::shard;
use distboot::csl::{run_algorithm1_path, CrossValidation};
use distboot::datagen::Noise;
use distboot::glm::LossFamily;
use distboot::harness::{
    oracle_width, run_coverage, run_screening, ExperimentConfig, OracleSpec, ScreeningConfig,
};
use distboot::hetero::HeteroConfig;
use distboot::numeric::Matrix;
use distboot::rng::{Purpose, RngKey};
use distboot::solver::SolverConfig;
use distboot::tuning::{tau_min, RegimeExponents, Theorem};

#[derive(Parser, Debug)]
#[command(name = "distboot", version, about = "Distributed multiplier bootstrap for high-dimensional GLMs")]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "DISTBOOT_THREADS")]
    threads: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte-Carlo coverage and width of the simultaneous bands.
    Coverage(PlotArgs),
    /// Coverage study for the heteroscedastic variant.
    HeteroCoverage(PlotArgs),
    /// Width of the centralized de-biased lasso band.
    Oracle {
        /// Overrides `oracle.reps` in the configuration.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Variable screening on the semi-synthetic logistic design.
    Screen(PlotArgs),
    /// Minimal number of rounds for given regime exponents.
    Taumin {
        /// One of lin-kgrad, lin-nk1, glm-kgrad, glm-nk1; all four when absent.
        #[arg(long)]
        theorem: Option<Theorem>,
        /// log n / log d
        #[arg(long)]
        gn: f64,
        /// log k / log d
        #[arg(long)]
        gk: f64,
        /// log s / log d
        #[arg(long)]
        gs: f64,
    },
    /// Simultaneous confidence intervals for a CSV dataset.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Also write a plotting script that reads the output CSV.
    #[arg(long)]
    plot_script: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// CSV with a header row, the response first and features after.
    #[arg(long)]
    data: PathBuf,
    /// Number of machines; rows are split into k equal consecutive blocks
    #[arg(long)]
    k: usize,
    /// Rounds of communication
    #[arg(long, default_value_t = 2)]
    tau: usize,
    /// linear or logistic
    #[arg(long, default_value = "linear")]
    family: String,
    /// k-grad or n+k-1-grad
    #[arg(long, default_value = "n+k-1-grad")]
    method: BootMethod,
    /// Bootstrap draws
    #[arg(long, default_value_t = 500)]
    b: usize,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn require_config(cli: &Cli) -> Result<&Path> {
    cli.config.as_deref().context("this subcommand needs --config <path>")
}

fn output(cli_out: &Option<PathBuf>, config_out: Option<&str>) -> Option<PathBuf> {
    cli_out.clone().or_else(|| config_out.map(PathBuf::from))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_csv<T: Serialize>(path: Option<&Path>, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink(path)?);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

const COVERAGE_PLOT: &str = r#"import sys
import pandas as pd
import matplotlib.pyplot as plt

csv = sys.argv[1] if len(sys.argv) > 1 else "{csv}"
df = pd.read_csv(csv)
fig, axes = plt.subplots(1, 2, figsize=(10, 4))
for (tau, method), g in df.groupby(["tau", "method"]):
    g = g.sort_values("k")
    axes[0].plot(g["k"], g["coverage"], marker="o", label=f"{method}, tau={tau}")
    axes[1].plot(g["k"], g["width_ratio"], marker="o", label=f"{method}, tau={tau}")
axes[0].axhline(0.95, color="grey", linestyle="--")
axes[1].axhline(1.0, color="grey", linestyle="--")
for ax, label in zip(axes, ["coverage", "width / oracle width"]):
    ax.set_xscale("log", base=2)
    ax.set_xlabel("k")
    ax.set_ylabel(label)
axes[0].legend()
fig.tight_layout()
fig.savefig(csv.rsplit(".", 1)[0] + ".png", dpi=150)
"#;

const SCREENING_PLOT: &str = r#"import sys
import pandas as pd
import matplotlib.pyplot as plt

csv = sys.argv[1] if len(sys.argv) > 1 else "{csv}"
df = pd.read_csv(csv).groupby(["d", "tau"], as_index=False).mean(numeric_only=True)
fig, ax = plt.subplots(figsize=(5, 4))
for d, g in df.groupby("d"):
    line, = ax.plot(g["tau"], g["relevant_detected"], marker="o", label=f"d={d} relevant")
    ax.plot(g["tau"], g["spurious_detected"], marker="x", linestyle="--", color=line.get_color(), label=f"d={d} spurious")
ax.set_xlabel("tau")
ax.set_ylabel("significant variables")
ax.legend()
fig.tight_layout()
fig.savefig(csv.rsplit(".", 1)[0] + ".png", dpi=150)
"#;

fn write_plot_script(script: Option<PathBuf>, template: &str, csv: Option<&Path>) -> Result<()> {
    let Some(path) = script else {
        return Ok(());
    };
    let csv = csv.map(|p| p.display().to_string()).unwrap_or_else(|| "results.csv".to_string());
    std::fs::write(&path, template.replace("{csv}", &csv)).with_context(|| format!("writing {}", path.display()))
}

fn coverage(cli: &Cli, plot: &PlotArgs, hetero: bool) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if hetero {
        cfg.hetero.get_or_insert_with(HeteroConfig::default);
        cfg.noise = Noise::MachineHetero;
    }
    let report = run_coverage(&cfg, &SolverConfig::default())?;
    for failure in &report.failures {
        eprintln!("warning: {failure}");
    }
    let out = output(&cli.out, cfg.output.as_deref());
    write_csv(out.as_deref(), &distboot::harness::COVERAGE_HEADER, &report.rows)?;
    write_plot_script(plot.plot_script.clone().or(cfg.plot_script.map(PathBuf::from)), COVERAGE_PLOT, out.as_deref())
}

#[derive(Serialize)]
struct OracleRecord {
    family: LossFamily,
    design: String,
    rho: f64,
    d: usize,
    n_total: usize,
    s0: usize,
    k: usize,
    noise: Noise,
    reps: usize,
    seed: u64,
    width: f64,
}

fn oracle(cli: &Cli, reps: Option<usize>) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let reps = reps.unwrap_or(cfg.oracle.reps);
    cfg.validate()?;
    let ks = if cfg.oracle.fix_k { cfg.ks.clone() } else { vec![1] };
    let mut records = Vec::new();
    for k in ks {
        let spec = OracleSpec {
            family: cfg.family,
            design: cfg.design_spec(),
            n_total: cfg.n_total,
            s0: cfg.s0,
            noise: if cfg.oracle.fix_k { cfg.noise } else { Noise::Homoscedastic },
            k,
            reps,
            seed: cfg.seed,
        };
        let width = oracle_width(&spec, cfg.tuning.policy(), &SolverConfig::default())?;
        records.push(OracleRecord {
            family: cfg.family,
            design: cfg.design.name().to_string(),
            rho: cfg.design.rho(),
            d: cfg.d,
            n_total: cfg.n_total,
            s0: cfg.s0,
            k,
            noise: spec.noise,
            reps,
            seed: cfg.seed,
            width,
        });
    }
    let mut w = sink(cli.out.as_deref())?;
    let body = if records.len() == 1 {
        serde_json::to_string_pretty(&records[0])?
    } else {
        serde_json::to_string_pretty(&records)?
    };
    writeln!(w, "{body}")?;
    Ok(())
}

fn screen(cli: &Cli, plot: &PlotArgs) -> Result<()> {
    let mut cfg: ScreeningConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => ScreeningConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let rows = run_screening(&cfg, &SolverConfig::default())?;
    let out = output(&cli.out, cfg.output.as_deref());
    write_csv(out.as_deref(), &distboot::harness::SCREENING_HEADER, &rows)?;
    write_plot_script(plot.plot_script.clone().or(cfg.plot_script.map(PathBuf::from)), SCREENING_PLOT, out.as_deref())
}

fn taumin(theorem: Option<Theorem>, gn: f64, gk: f64, gs: f64) -> Result<()> {
    let e = RegimeExponents::new(gn, gk, gs)?;
    match theorem {
        Some(t) => println!("{}", tau_min(t, &e)?),
        None => {
            for t in Theorem::ALL {
                match tau_min(t, &e) {
                    Ok(v) => println!("{t} {v}"),
                    Err(err) => println!("{t} n/a ({err})"),
                }
            }
        }
    }
    Ok(())
}

fn read_dataset(path: &Path) -> Result<(Matrix, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let width = reader.headers()?.len();
    if width < 2 {
        bail!("{}: need a response column and at least one feature", path.display());
    }
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        let values = record
            .iter()
            .map(|field| field.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .with_context(|| format!("{}: row {} has a non-numeric field", path.display(), i + 2))?;
        y.push(values[0]);
        x.extend_from_slice(&values[1..]);
    }
    let rows = y.len();
    Ok((Matrix::from_vec(rows, width - 1, x)?, y))
}

#[derive(Serialize)]
struct Interval {
    index: usize,
    estimate: f64,
    lower: f64,
    upper: f64,
    significant: bool,
}

fn infer(cli: &Cli, args: &InferArgs) -> Result<()> {
    let family = match args.family.as_str() {
        "linear" => LossFamily::Linear,
        "logistic" => LossFamily::Logistic,
        other => bail!("unknown family {other:?}; expected linear or logistic"),
    };
    if args.tau == 0 {
        bail!("--tau must be at least 1");
    }
    let (x, y) = read_dataset(&args.data)?;
    let data = shard(&x, &y, args.k)?;
    let solver = SolverConfig::default();
    let policy = CrossValidation::default();
    let state = run_algorithm1_path(&data, family, args.tau, &policy, None, &solver)?
        .pop()
        .expect("one state per round");
    let spec = BootstrapSpec {
        b: args.b,
        alpha: args.alpha,
        ..BootstrapSpec::new(args.method, RngKey::new(cli.seed.unwrap_or(0), Purpose::Multiplier))
    };
    let result = dist_boots(&spec, &state)?;
    let significant = result.significant();
    let rows: Vec<Interval> = (0..result.center.len())
        .map(|l| Interval {
            index: l,
            estimate: result.center[l],
            lower: result.ci_lower[l],
            upper: result.ci_upper[l],
            significant: significant[l],
        })
        .collect();
    write_csv(cli.out.as_deref(), &["index", "estimate", "lower", "upper", "significant"], &rows)
}

fn config_threads(cli: &Cli) -> Option<usize> {
    let path = cli.config.as_deref()?;
    let text = std::fs::read_to_string(path).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value.get("threads")?.as_u64().map(|t| t as usize)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads.or_else(|| config_threads(&cli)) {
        if threads == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Coverage(plot) => coverage(&cli, plot, false),
        Command::HeteroCoverage(plot) => coverage(&cli, plot, true),
        Command::Oracle { reps } => oracle(&cli, *reps),
        Command::Screen(plot) => screen(&cli, plot),
        Command::Taumin { theorem, gn, gk, gs } => taumin(*theorem, *gn, *gk, *gs),
        Command::Infer(args) => infer(&cli, args),
    }
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
