//! Command-line front end: identity verification, dataset generation,
//! leave-one-domain-out training, hyperparameter sweeps, and result
//! aggregation.
//!
//! Exit codes: 0 success; 1 usage/configuration error; 2 data error
//! (missing or malformed files); 3 numerical abort (non-finite values).
//!
//! Configuration precedence for `train` and `sweep`: command-line flag,
//! then config-file key, then built-in default. The dataset directory
//! additionally falls back to `OODFORGE_DATA_DIR`, then `./data`.

use clap::{Parser, Subcommand};
use oodforge::harness::{
    apply_hparams, default_config, emit_batch_size_scatter, emit_results, gen_data,
    leave_one_out, load_data_seed, load_envs, sample_hparams, summarize, DatasetKind,
    HarnessError, LeaveOneOutOptions, RunRecord, SearchSpace, SelectionRule, FULL_ITERATIONS,
};
use oodforge::nets::NetsError;
use oodforge::penalties::verify_identities;
use oodforge::tensor::TensorError;
use oodforge::trainers::{Algorithm, TrainError, TrainerConfig};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "oodforge",
    version,
    about = "Domain-wise adversarial training and its invariance-penalty \
             neighbors over small piecewise-linear networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Numerically check the squared-gradient and scaled-perturbation
    /// penalty identities over random networks; prints a JSON report.
    VerifyIdentities {
        /// Number of random (network, batch) trials.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated perturbation scales to check at.
        #[arg(long, default_value = "0.01,0.001")]
        eps_grid: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize a dataset directory (raw files where applicable, plus
    /// a manifest recording the generation seed and parameters).
    GenData {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one algorithm under the leave-one-domain-out protocol and
    /// write per-run artifacts plus a results table.
    Train {
        /// erm | irmv1 | at | uat | dat | ldat | ensemble_uat
        #[arg(long)]
        algo: Option<String>,
        /// Flat JSON config file; every flag here shadows a key of the
        /// same name (flag wins).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Training iterations (defaults to the desk-scale budget).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// cmnist | synthetic
        #[arg(long)]
        dataset: Option<String>,
        /// Directory produced by gen-data (falls back to
        /// OODFORGE_DATA_DIR, then ./data).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output directory for histories, checkpoints, and results.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed replicates per held-out domain.
        #[arg(long)]
        seeds: Option<usize>,
        /// Restrict held-out domains to these ids (repeatable).
        #[arg(long)]
        heldout: Vec<String>,
        /// Restore the full-scale iteration budget.
        #[arg(long)]
        full_scale: bool,
    },
    /// Random hyperparameter search: log-uniform draws from a search
    /// space, one leave-one-domain-out protocol run per draw.
    Sweep {
        /// JSON file: {"intervals": {"eps": [lo, hi], ...}}.
        #[arg(long)]
        space: PathBuf,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        /// Seed replicates per held-out domain.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        heldout: Vec<String>,
        #[arg(long)]
        full_scale: bool,
    },
    /// Aggregate run records found under a directory into one results
    /// table (CSV plus JSON mirror and summary).
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
}

/// Flat JSON config file; every key shadows the CLI flag of the same
/// name. Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    algo: Option<String>,
    dataset: Option<String>,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    eps: Option<f64>,
    alpha: Option<f64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    iters: Option<usize>,
    seed: Option<u64>,
    seeds: Option<usize>,
    heldout: Option<Vec<String>>,
    full_scale: Option<bool>,
    eval_interval: Option<usize>,
    irm_lambda: Option<f64>,
    irm_anneal_iters: Option<usize>,
    pgd_steps: Option<usize>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig, HarnessError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| HarnessError::Config(format!("config file {}: {e}", p.display())))
            }
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successes; anything else is a usage error
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Config(_) | HarnessError::Protocol(_) | HarnessError::MissingSplit(_) => 1,
        HarnessError::Data(_)
        | HarnessError::Io(_)
        | HarnessError::Json(_)
        | HarnessError::AuditMismatch { .. } => 2,
        HarnessError::Nets(n) => nets_exit_code(n),
        HarnessError::Train(t) => match t {
            TrainError::NonFiniteLoss { .. } => 3,
            TrainError::Data(_) => 2,
            TrainError::Nets(n) => nets_exit_code(n),
            TrainError::Tensor(TensorError::NonFinite { .. }) => 3,
            _ => 1,
        },
    }
}

fn nets_exit_code(n: &NetsError) -> i32 {
    match n {
        NetsError::Checkpoint(_) | NetsError::Io(_) => 2,
        NetsError::Tensor(TensorError::NonFinite { .. }) => 3,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> Result<i32, HarnessError> {
    match cmd {
        Cmd::VerifyIdentities {
            trials,
            seed,
            eps_grid,
            out,
        } => cmd_verify(trials, seed, &eps_grid, out.as_deref()),
        Cmd::GenData { dataset, out, seed } => {
            let kind: DatasetKind = dataset.parse()?;
            let manifest = gen_data(kind, &out, seed)?;
            for env in &manifest.environments {
                println!(
                    "wrote {kind} environment {} ({} samples, hash {})",
                    env.env_id, env.n, env.content_hash
                );
            }
            println!("manifest: {}", out.join(format!("{kind}.manifest.json")).display());
            Ok(0)
        }
        Cmd::Train {
            algo,
            config,
            eps,
            alpha,
            lr,
            batch_size,
            iters,
            seed,
            dataset,
            data_dir,
            out,
            seeds,
            heldout,
            full_scale,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            let algo = resolve_algo(algo, &file)?;
            let kind = resolve_dataset(dataset, &file)?;
            let dir = resolve_data_dir(data_dir, &file);
            let out = out.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("runs"));
            let master_seed = seed.or(file.seed).unwrap_or(0);
            let cfg = build_config(
                algo, kind, master_seed, &file, eps, alpha, lr, batch_size, iters, full_scale,
            )?;
            let envs = load_envs(kind, &dir, load_data_seed(kind, &dir)?)?;
            let opts = LeaveOneOutOptions {
                n_seeds: seeds.or(file.seeds).unwrap_or(3),
                heldouts: heldout_filter(heldout, &file),
                out_dir: Some(out.clone()),
                ..Default::default()
            };
            let records = leave_one_out(&envs, &cfg, &opts)?;
            emit_results(&records, &out.join("results.csv"))?;
            print_summary(&records);
            println!("results: {}", out.join("results.csv").display());
            Ok(0)
        }
        Cmd::Sweep {
            space,
            trials,
            seeds,
            algo,
            config,
            dataset,
            data_dir,
            out,
            seed,
            heldout,
            full_scale,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            let text = std::fs::read_to_string(&space)?;
            let space: SearchSpace = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("search space: {e}")))?;
            let algo = resolve_algo(algo, &file)?;
            let kind = resolve_dataset(dataset, &file)?;
            let dir = resolve_data_dir(data_dir, &file);
            let out = out.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("sweep"));
            let master_seed = seed.or(file.seed).unwrap_or(0);
            let base = build_config(
                algo, kind, master_seed, &file, None, None, None, None, None, full_scale,
            )?;
            let envs = load_envs(kind, &dir, load_data_seed(kind, &dir)?)?;
            let draws = sample_hparams(&space, trials, master_seed)?;
            let mut all = Vec::new();
            for (i, draw) in draws.iter().enumerate() {
                let cfg = apply_hparams(&base, draw)?;
                let tag = format!("t{i:03}_");
                let opts = LeaveOneOutOptions {
                    n_seeds: seeds,
                    heldouts: heldout_filter(heldout.clone(), &file),
                    out_dir: Some(out.join(format!("t{i:03}"))),
                    run_tag: Some(tag),
                    ..Default::default()
                };
                let records = leave_one_out(&envs, &cfg, &opts)?;
                let mean =
                    records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
                let shown: Vec<String> =
                    draw.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
                println!("trial {i:03}: {} -> mean accuracy {mean:.1}", shown.join(" "));
                all.extend(records);
            }
            emit_results(&all, &out.join("results.csv"))?;
            emit_batch_size_scatter(&all, &out.join("scatter.csv"))?;
            print_summary(&all);
            println!("results: {}", out.join("results.csv").display());
            Ok(0)
        }
        Cmd::Report { input, out } => {
            let records = collect_records(&input)?;
            if records.is_empty() {
                return Err(HarnessError::Data(oodforge::data::DataError::Format(
                    format!("no run records found under {}", input.display()),
                )));
            }
            emit_results(&records, &out)?;
            print_summary(&records);
            println!("results: {}", out.display());
            Ok(0)
        }
    }
}

fn cmd_verify(
    trials: usize,
    seed: u64,
    eps_grid: &str,
    out: Option<&Path>,
) -> Result<i32, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Config("--trials must be at least 1".into()));
    }
    let grid: Vec<f64> = eps_grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| HarnessError::Config(format!("bad eps-grid entry {s:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if grid.iter().any(|&e| !e.is_finite() || e <= 0.0) {
        return Err(HarnessError::Config("eps-grid entries must be positive".into()));
    }
    let report = verify_identities(trials, seed, &grid);
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            std::fs::write(p, &json)?;
            println!("report: {}", p.display());
        }
        None => println!("{json}"),
    }
    eprintln!(
        "max gaps: squared-gradient {:.3e}, scaled-perturbation (bias-free) {:.3e}, \
         scaled-perturbation (biased, documented exception) {:.3e}",
        report.max_err_squared_gradient,
        report.max_err_scaled_bias_free,
        report.max_err_scaled_biased,
    );
    if report.pass {
        Ok(0)
    } else {
        eprintln!("identity verification FAILED");
        Ok(3)
    }
}

fn resolve_algo(flag: Option<String>, file: &FileConfig) -> Result<Algorithm, HarnessError> {
    flag.or_else(|| file.algo.clone())
        .unwrap_or_else(|| "erm".to_string())
        .parse()
        .map_err(|e: TrainError| HarnessError::Config(e.to_string()))
}

fn resolve_dataset(flag: Option<String>, file: &FileConfig) -> Result<DatasetKind, HarnessError> {
    flag.or_else(|| file.dataset.clone())
        .unwrap_or_else(|| "cmnist".to_string())
        .parse()
}

fn resolve_data_dir(flag: Option<PathBuf>, file: &FileConfig) -> PathBuf {
    flag.or_else(|| file.data_dir.clone())
        .or_else(|| std::env::var_os("OODFORGE_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn heldout_filter(flag: Vec<String>, file: &FileConfig) -> Option<Vec<String>> {
    if !flag.is_empty() {
        Some(flag)
    } else {
        file.heldout.clone().filter(|h| !h.is_empty())
    }
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    algo: Algorithm,
    kind: DatasetKind,
    master_seed: u64,
    file: &FileConfig,
    eps: Option<f64>,
    alpha: Option<f64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    iters: Option<usize>,
    full_scale: bool,
) -> Result<TrainerConfig, HarnessError> {
    let mut cfg = default_config(algo, kind, master_seed);
    if full_scale || file.full_scale.unwrap_or(false) {
        cfg.iterations = FULL_ITERATIONS;
    }
    if let Some(v) = iters.or(file.iters) {
        cfg.iterations = v;
    }
    if let Some(v) = eps.or(file.eps) {
        cfg.eps = v;
    }
    if let Some(v) = alpha.or(file.alpha) {
        cfg.alpha = v;
    }
    if let Some(v) = lr.or(file.lr) {
        cfg.learning_rate = v;
    }
    if let Some(v) = batch_size.or(file.batch_size) {
        cfg.batch_size = v;
    }
    // default to ~10 evaluation rounds when the budget drops below the
    // stock interval, so selection always has checkpoints to pick from
    cfg.eval_interval = file
        .eval_interval
        .unwrap_or_else(|| cfg.eval_interval.min((cfg.iterations / 10).max(1)));
    if let Some(v) = file.irm_lambda {
        cfg.irm_lambda = v;
    }
    if let Some(v) = file.irm_anneal_iters {
        cfg.irm_anneal_iters = v;
    }
    if let Some(v) = file.pgd_steps {
        cfg.pgd_steps = v;
    }
    cfg.validate().map_err(HarnessError::Train)?;
    Ok(cfg)
}

/// Recursively collect every JSON file under `dir` that parses as a list
/// of run records, in sorted path order.
fn collect_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut stack = vec![dir.to_path_buf()];
    let mut files = Vec::new();
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut records = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path)?;
        if let Ok(batch) = serde_json::from_str::<Vec<RunRecord>>(&text) {
            records.extend(batch);
        }
    }
    Ok(records)
}

fn print_summary(records: &[RunRecord]) {
    for cell in summarize(records) {
        let rule = match cell.selection_rule {
            SelectionRule::TrainDomain => "train_domain",
            SelectionRule::Oracle => "oracle",
        };
        println!(
            "{:<13} {:<13} {:<18} {:>5.1} ± {:.1}  (n={})",
            cell.algorithm.to_string(),
            rule,
            cell.test_env,
            cell.mean_accuracy,
            cell.std_error,
            cell.n
        );
    }
}
