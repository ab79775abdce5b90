//! `lfm`: simulate data, fit the latent feature model, run the simulation
//! grid and summarise the results.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lfm::error::LfmError;
use lfm::experiments::{
    contraction_trend_report, generate_dataset, generate_sparse_truth_with, run_table_experiment,
    TrendOptions,
};
use lfm::io::{
    load_binary_matrix_csv, load_matrix_csv, read_summary_csv, standardize_rows,
    write_binary_matrix_csv, write_matrix_csv, write_summary_csv, write_trace_csv,
    FitResultDocument, PriorChoice, RunConfigFile,
};
use lfm::rng::{substream, DOMAIN_DATA, DOMAIN_TRUTH};
use lfm::sampler::{run_ptmcmc, Mode};

#[derive(Parser)]
#[command(name = "lfm", version, about = "Sparse binary latent feature models with IBP / pIBP priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (a `.json` echo from a fit document also works)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// theory (σ² = σ_a² = 1) or extended (variances sampled)
    #[arg(long)]
    mode: Option<Mode>,
    /// ibp or pibp
    #[arg(long)]
    prior: Option<PriorChoice>,
    /// Newick tree with unit root-to-leaf depth (pibp only)
    #[arg(long)]
    tree: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a sparse Z* and a data matrix X ~ N(0, Z*Z*ᵀ + I)
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
    },
    /// Run the sampler on a data matrix and write the MAP estimate
    Fit {
        #[command(flatten)]
        common: Common,
        /// n×p data matrix (rows are samples)
        #[arg(long)]
        data: PathBuf,
        /// Optional p×K ground truth for residual traces
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Centre every row of the data before fitting
        #[arg(long)]
        standardize: bool,
    },
    /// Replicated simulation over the configured (n, p) grid
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Trend verdicts from a summary table and plot-ready traces from a fit
    Report {
        /// Summary CSV written by `experiment`
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Fit document written by `fit`
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Tolerated max/min residual ratio across p
        #[arg(long)]
        factor: Option<f64>,
    },
}

fn exit_code(err: &LfmError) -> u8 {
    match err {
        LfmError::Config(_) => 2,
        LfmError::Parse { .. }
        | LfmError::Io { .. }
        | LfmError::InvalidInput(_)
        | LfmError::DimensionMismatch { .. }
        | LfmError::Tree(_)
        | LfmError::Serialization(_) => 3,
        LfmError::Numerical(_)
        | LfmError::ContractViolation(_)
        | LfmError::ResourceExhausted(_)
        | LfmError::DivergentIntegral => 4,
    }
}

fn load_config(common: &Common) -> Result<RunConfigFile, LfmError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfigFile::load(path).map_err(|e| match e {
            LfmError::Io { .. } => LfmError::Config(e.to_string()),
            other => other,
        })?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(mode) = common.mode {
        cfg.sampler.mode = mode;
    }
    if let Some(prior) = common.prior {
        cfg.prior.kind = prior;
    }
    if let Some(tree) = &common.tree {
        cfg.prior.tree = Some(tree.clone());
    }
    cfg.resolved()
}

fn ensure_dir(dir: &Path) -> Result<(), LfmError> {
    fs::create_dir_all(dir).map_err(|e| LfmError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), LfmError> {
    fs::write(path, text).map_err(|e| LfmError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn simulate(common: &Common, n: Option<usize>, p: Option<usize>) -> Result<(), LfmError> {
    let mut cfg = load_config(common)?;
    if let Some(n) = n {
        cfg.simulate.n = n;
    }
    if let Some(p) = p {
        cfg.simulate.p = p;
    }
    let seed = cfg.seed()?;
    let e = &cfg.experiment;
    let z_star = generate_sparse_truth_with(
        cfg.simulate.p,
        e.k_star,
        e.s,
        e.column_sizes,
        &mut substream(seed, DOMAIN_TRUTH, 0),
    )
    .map_err(|err| LfmError::Config(err.to_string()))?;
    let data = generate_dataset(&z_star, cfg.simulate.n, &mut substream(seed, DOMAIN_DATA, 0))?;
    ensure_dir(&common.out)?;
    write_binary_matrix_csv(common.out.join("zstar.csv"), &z_star)?;
    write_matrix_csv(common.out.join("x.csv"), data.x(), None)?;
    write_text(&common.out.join("config.toml"), &cfg.to_toml()?)?;
    println!(
        "simulated n = {}, p = {}, K* = {}, max column sum = {}",
        data.n(),
        data.p(),
        z_star.k(),
        z_star.column_sums().into_iter().max().unwrap_or(0)
    );
    Ok(())
}

fn fit(common: &Common, data_path: &Path, truth: Option<&Path>, standardize: bool) -> Result<(), LfmError> {
    let mut cfg = load_config(common)?;
    cfg.fit.standardize |= standardize;
    let sampler = cfg.sampler_config()?;
    let mut data = load_matrix_csv(data_path)?;
    if cfg.fit.standardize {
        data = standardize_rows(&data)?;
    }
    let z_star = truth.map(load_binary_matrix_csv).transpose()?;
    let start = Instant::now();
    let out = run_ptmcmc(&sampler, &data, z_star.as_ref())?;
    let elapsed = start.elapsed().as_secs_f64();
    let doc = FitResultDocument::new(cfg.clone(), &data, &out, elapsed)?;
    ensure_dir(&common.out)?;
    doc.save(common.out.join("fit.json"))?;
    write_trace_csv(common.out.join("trace.csv"), &out.trace)?;
    write_text(&common.out.join("config.toml"), &cfg.to_toml()?)?;
    println!(
        "fit n = {}, p = {}: MAP K = {}, max column sum = {} (sparsity {:.3}), alpha = {:.4}, sigma2 = {:.4}, sigma_a2 = {:.4}",
        doc.n,
        doc.p,
        doc.map.k,
        doc.map.max_column_sum,
        doc.map.max_column_sum as f64 / doc.p as f64,
        doc.map.alpha,
        doc.map.sigma2,
        doc.map.sigma_a2
    );
    let rates: Vec<String> = doc.swap_acceptance.iter().map(|r| format!("{r:.2}")).collect();
    println!("swap acceptance by pair: [{}]; {:.1}s", rates.join(", "), elapsed);
    Ok(())
}

fn experiment(common: &Common) -> Result<(), LfmError> {
    let cfg = load_config(common)?;
    let grid = cfg.experiment_grid()?;
    ensure_dir(&common.out)?;
    write_text(&common.out.join("config.toml"), &cfg.to_toml()?)?;
    let mut terminal = Vec::with_capacity(grid.len());
    let mut posterior = Vec::with_capacity(grid.len());
    for point in &grid {
        let start = Instant::now();
        let res = run_table_experiment(point)?;
        let r = &res.summary;
        println!(
            "(n, p, s) = ({}, {}, {}): K = {:.3} ({:.3}), residual = {:.3} ({:.3}) [{:.1}s]",
            r.n,
            r.p,
            r.s,
            r.mean_k,
            r.sd_k,
            r.mean_residual,
            r.sd_residual,
            start.elapsed().as_secs_f64()
        );
        terminal.push(res.summary);
        posterior.push(res.posterior_summary);
        write_summary_csv(common.out.join("summary.csv"), &terminal)?;
        write_summary_csv(common.out.join("posterior_summary.csv"), &posterior)?;
    }
    Ok(())
}

fn report(summary: Option<&Path>, fit: Option<&Path>, out: &Path, factor: Option<f64>) -> Result<(), LfmError> {
    if summary.is_none() && fit.is_none() {
        return Err(LfmError::Config("report needs --summary and/or --fit".into()));
    }
    ensure_dir(out)?;
    if let Some(path) = summary {
        let rows = read_summary_csv(path)?;
        let opts = TrendOptions {
            factor: factor.unwrap_or(TrendOptions::default().factor),
            truth_norm: None,
        };
        let rep = contraction_trend_report(&rows, opts)?;
        for t in &rep.sample_size {
            println!(
                "p = {}, s = {}: residual over n {:?} = {:?}; strictly decreasing: {}; first/last = {:.2}",
                t.p, t.s, t.ns, t.residuals, t.strictly_decreasing, t.first_to_last_ratio
            );
        }
        for d in &rep.dimension {
            println!(
                "n = {}, s = {}: residual over p {:?} = {:?}; spread {:.2} within factor {}: {}",
                d.n, d.s, d.ps, d.residuals, d.spread, rep.factor, d.within_factor
            );
        }
        if let Some(rho) = rep.spearman {
            println!("Spearman correlation of residual with rate predictor: {rho:.3}");
        }
        let json = serde_json::to_string_pretty(&rep).map_err(|e| LfmError::Serialization(e.to_string()))?;
        write_text(&out.join("trend.json"), &json)?;
    }
    if let Some(path) = fit {
        let doc = FitResultDocument::load(path)?;
        write_trace_csv(out.join("trace_long.csv"), &doc.trace)?;
        println!("wrote {} trace rows", doc.trace.len());
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("LFM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // an already-initialised global pool is not an error worth failing on
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Simulate { common, n, p } => simulate(common, *n, *p),
        Command::Fit {
            common,
            data,
            truth,
            standardize,
        } => fit(common, data, truth.as_deref(), *standardize),
        Command::Experiment { common } => experiment(common),
        Command::Report {
            summary,
            fit,
            out,
            factor,
        } => report(summary.as_deref(), fit.as_deref(), out, *factor),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
