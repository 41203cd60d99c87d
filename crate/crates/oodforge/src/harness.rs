//! Experiment orchestration: log-uniform hyperparameter search,
//! leave-one-domain-out evaluation with the two model-selection rules,
//! dataset materialization for the CLI, and result persistence.
//!
//! Protocol conventions:
//!
//! - Every training run holds one environment out, trains on the rest,
//!   and carves a validation set (default 20%) off each training
//!   environment. Evaluation splits are labeled `"val"` (train-domain
//!   validation) and `"heldout"` (the held-out domain); selection rules
//!   key off those labels.
//! - The train-domain rule picks the evaluation round with the highest
//!   mean `"val"` accuracy; the oracle rule picks the highest `"heldout"`
//!   accuracy — by construction the only consumer of held-out data, and
//!   every record carries its rule so the leak is labeled.
//! - One training run serves all selection rules: rules are applied
//!   post-hoc to the same per-round checkpoints.
//! - Each run's RNG stream is derived as `master_seed ^ fnv1a(run_id)`,
//!   so trials are independent and could execute in parallel; this
//!   implementation runs them sequentially on one worker.
//! - Accuracies are recorded in percent and reported to one decimal in
//!   CSV, with the standard error across seed replicates in the summary.

use crate::data::{
    make_cmnist, make_synthetic_spurious, write_glyph_mnist, DataError, DatasetManifest,
    EnvironmentDataset, Fnv1a, RawMnist,
};
use crate::nets::{Model, ModelSpec, NetsError};
use crate::tensor::Scalar;
use crate::trainers::{
    evaluate, train_with, Algorithm, TrainError, TrainHistory, TrainerConfig,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("history is missing evaluation rows for split {0:?}")]
    MissingSplit(String),
    #[error(
        "checkpoint audit failed for {run_id}: recorded accuracy {recorded}, \
         recomputed {recomputed}"
    )]
    AuditMismatch {
        run_id: String,
        recorded: f64,
        recomputed: f64,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ── Hyperparameter search ───────────────────────────────────────────────

/// Log-uniform search intervals keyed by hyperparameter name. Recognized
/// keys when applied to a [`TrainerConfig`]: `eps`, `alpha`,
/// `learning_rate`, `irm_lambda`, and `batch_size` (rounded to the
/// nearest integer ≥ 1).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SearchSpace {
    pub intervals: BTreeMap<String, (f64, f64)>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.intervals.is_empty() {
            return Err(HarnessError::Config("empty search space".into()));
        }
        for (key, &(lo, hi)) in &self.intervals {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(HarnessError::Config(format!(
                    "interval for {key:?} must satisfy 0 < lo <= hi (got [{lo}, {hi}])"
                )));
            }
        }
        Ok(())
    }
}

/// Independent log-uniform draws for each interval, `n_trials` times.
/// Deterministic given the seed; keys are drawn in sorted order.
pub fn sample_hparams(
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<BTreeMap<String, f64>>, HarnessError> {
    space.validate()?;
    if n_trials == 0 {
        return Err(HarnessError::Config("n_trials must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let mut draw = BTreeMap::new();
        for (key, &(lo, hi)) in &space.intervals {
            let value = if lo == hi {
                lo
            } else {
                rng.gen_range(lo.ln()..hi.ln()).exp()
            };
            draw.insert(key.clone(), value);
        }
        trials.push(draw);
    }
    Ok(trials)
}

/// Overlay one hyperparameter draw onto a base config. Unknown keys are
/// an error so misspelled search spaces fail loudly.
pub fn apply_hparams(
    base: &TrainerConfig,
    draw: &BTreeMap<String, f64>,
) -> Result<TrainerConfig, HarnessError> {
    let mut cfg = base.clone();
    for (key, &value) in draw {
        match key.as_str() {
            "eps" => cfg.eps = value,
            "alpha" => cfg.alpha = value,
            "learning_rate" | "lr" => cfg.learning_rate = value,
            "irm_lambda" => cfg.irm_lambda = value,
            "batch_size" => cfg.batch_size = (value.round() as usize).max(1),
            other => {
                return Err(HarnessError::Config(format!(
                    "search space key {other:?} is not a tunable hyperparameter"
                )))
            }
        }
    }
    Ok(cfg)
}

// ── Selection rules ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Highest mean accuracy over the training domains' validation splits.
    TrainDomain,
    /// Highest held-out-domain accuracy (leaks test-domain information by
    /// design; labeled on every record).
    Oracle,
}

impl std::fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionRule::TrainDomain => "train_domain",
            SelectionRule::Oracle => "oracle",
        })
    }
}

impl std::str::FromStr for SelectionRule {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "train_domain" => Ok(SelectionRule::TrainDomain),
            "oracle" => Ok(SelectionRule::Oracle),
            other => Err(HarnessError::Config(format!("unknown selection rule {other:?}"))),
        }
    }
}

impl SelectionRule {
    fn split(self) -> &'static str {
        match self {
            SelectionRule::TrainDomain => "val",
            SelectionRule::Oracle => "heldout",
        }
    }
}

/// Index of the evaluation round the rule selects: argmax of the rule's
/// split accuracy (mean over that split's rows per round), earliest round
/// on ties. Errors when a round lacks rows for the rule's split.
pub fn select_model(history: &TrainHistory, rule: SelectionRule) -> Result<usize, HarnessError> {
    let split = rule.split();
    // rounds appear in iteration order; group eval rows by iteration
    let mut rounds: Vec<(usize, f64, usize)> = Vec::new(); // (iteration, sum, count)
    for row in history.rows.iter().filter(|r| r.accuracy.is_some()) {
        if rounds.last().map(|&(it, _, _)| it) != Some(row.iteration) {
            rounds.push((row.iteration, 0.0, 0));
        }
        if row.split == split {
            let last = rounds.last_mut().expect("just pushed");
            last.1 += row.accuracy.expect("filtered");
            last.2 += 1;
        }
    }
    if rounds.is_empty() {
        return Err(HarnessError::MissingSplit(split.into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (idx, &(_, sum, count)) in rounds.iter().enumerate() {
        if count == 0 {
            return Err(HarnessError::MissingSplit(split.into()));
        }
        let mean = sum / count as f64;
        if best.map(|(_, b)| mean > b).unwrap_or(true) {
            best = Some((idx, mean));
        }
    }
    Ok(best.expect("non-empty rounds").0)
}

// ── Leave-one-domain-out protocol ───────────────────────────────────────

/// One completed run: a held-out environment, one seed replicate, one
/// selection rule applied to its checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub algorithm: Algorithm,
    pub test_env: String,
    pub selection_rule: SelectionRule,
    pub seed: u64,
    /// Seed replicates in this run's protocol (for standard errors).
    pub replicates: usize,
    /// Full configuration snapshot actually trained with.
    pub config: TrainerConfig,
    /// Held-out-domain test accuracy, percent.
    pub accuracy: f64,
    pub wall_clock_secs: f64,
    pub history_path: Option<String>,
}

#[derive(Clone, Debug)]
pub struct LeaveOneOutOptions {
    pub n_seeds: usize,
    pub rules: Vec<SelectionRule>,
    /// Restrict held-out environments to these ids (None = all).
    pub heldouts: Option<Vec<String>>,
    /// Fraction of each training environment carved off for validation.
    pub val_fraction: f64,
    /// Persist per-run history CSV and selected checkpoint here.
    pub out_dir: Option<PathBuf>,
    /// Prefix for run ids (e.g. a sweep trial tag); also decorrelates the
    /// derived run seeds across trials.
    pub run_tag: Option<String>,
}

impl Default for LeaveOneOutOptions {
    fn default() -> Self {
        LeaveOneOutOptions {
            n_seeds: 3,
            rules: vec![SelectionRule::TrainDomain, SelectionRule::Oracle],
            heldouts: None,
            val_fraction: 0.2,
            out_dir: None,
            run_tag: None,
        }
    }
}

pub fn run_seed(master: u64, run_id: &str) -> u64 {
    let mut h = Fnv1a::new();
    h.update(run_id.as_bytes());
    master ^ h.finish()
}

/// Deterministically split an environment into train/validation parts.
fn split_train_val<E: Scalar>(
    env: &EnvironmentDataset<E>,
    val_fraction: f64,
    seed: u64,
) -> Result<(EnvironmentDataset<E>, EnvironmentDataset<E>), HarnessError> {
    let n = env.n();
    if n < 2 {
        return Err(HarnessError::Protocol(format!(
            "environment {:?} has {n} samples; need at least 2 to split",
            env.env_id
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let take = |idx: &[usize], split: &str| -> EnvironmentDataset<E> {
        let (xs, ys) = env.gather(idx);
        EnvironmentDataset {
            env_id: env.env_id.clone(),
            xs,
            ys,
            digit_labels: env
                .digit_labels
                .as_ref()
                .map(|d| idx.iter().map(|&i| d[i]).collect()),
            env_params: env.env_params.clone(),
            split: split.into(),
        }
    };
    Ok((take(train_idx, "train"), take(val_idx, "val")))
}

/// Leave-one-domain-out: hold each environment out in turn, train the
/// configured algorithm on the rest for every seed replicate, and record
/// the held-out accuracy of the checkpoint each selection rule picks.
/// Training never sees held-out data; the oracle rule consumes it only
/// at selection time and is labeled on its records.
pub fn leave_one_out<E: Scalar>(
    envs: &[EnvironmentDataset<E>],
    base: &TrainerConfig,
    opts: &LeaveOneOutOptions,
) -> Result<Vec<RunRecord>, HarnessError> {
    if envs.len() < 2 {
        return Err(HarnessError::Protocol(format!(
            "leave-one-out needs at least 2 environments (got {})",
            envs.len()
        )));
    }
    if opts.n_seeds == 0 {
        return Err(HarnessError::Config("n_seeds must be at least 1".into()));
    }
    if opts.rules.is_empty() {
        return Err(HarnessError::Config("no selection rules requested".into()));
    }
    if !(opts.val_fraction > 0.0 && opts.val_fraction < 1.0) {
        return Err(HarnessError::Config(format!(
            "val_fraction {} must lie in (0, 1)",
            opts.val_fraction
        )));
    }
    let mut ordered: Vec<&EnvironmentDataset<E>> = envs.iter().collect();
    ordered.sort_by(|a, b| a.env_id.cmp(&b.env_id));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut records = Vec::new();
    for heldout in &ordered {
        if let Some(filter) = &opts.heldouts {
            if !filter.contains(&heldout.env_id) {
                continue;
            }
        }
        for seed_idx in 0..opts.n_seeds {
            let train_run_id = format!(
                "{}{}_{}_s{}",
                opts.run_tag.as_deref().unwrap_or(""),
                base.algorithm,
                heldout.env_id,
                seed_idx
            );
            let seed = run_seed(base.seed, &train_run_id);
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.seed = seed;

            let mut train_envs = Vec::new();
            let mut eval_splits = Vec::new();
            for env in ordered.iter().filter(|e| e.env_id != heldout.env_id) {
                let (tr, val) = split_train_val(
                    env,
                    opts.val_fraction,
                    run_seed(seed, &format!("split_{}", env.env_id)),
                )?;
                train_envs.push(tr);
                eval_splits.push(val);
            }
            let mut held_eval = (*heldout).clone();
            held_eval.split = "heldout".into();
            eval_splits.push(held_eval);

            let started = std::time::Instant::now();
            let mut checkpoints: Vec<Model<E>> = Vec::new();
            let (_, history) =
                train_with(&cfg, &train_envs, &eval_splits, |_, _, model| {
                    checkpoints.push(model.clone());
                    Ok(())
                })?;
            let wall_clock_secs = started.elapsed().as_secs_f64();
            if checkpoints.is_empty() {
                return Err(HarnessError::Protocol(format!(
                    "run {train_run_id} produced no evaluation rounds; lower \
                     eval_interval below iterations={}",
                    cfg.iterations
                )));
            }

            let history_path = match &opts.out_dir {
                Some(dir) => {
                    let p = dir.join(format!("{train_run_id}.history.csv"));
                    std::fs::write(&p, history.to_csv())?;
                    Some(p.to_string_lossy().into_owned())
                }
                None => None,
            };

            for &rule in &opts.rules {
                let idx = select_model(&history, rule)?;
                let chosen = &checkpoints[idx];
                let (_, acc) = evaluate(chosen, heldout)?;
                let accuracy = acc * 100.0;
                let run_id = format!("{train_run_id}_{rule}");

                // round-trip audit: the persisted checkpoint must reproduce
                // the recorded accuracy exactly
                let json = chosen.to_checkpoint_json();
                if let Some(dir) = &opts.out_dir {
                    std::fs::write(dir.join(format!("{run_id}.checkpoint.json")), &json)?;
                }
                let reloaded: Model<E> = Model::from_checkpoint_json(&json)?;
                let (_, re_acc) = evaluate(&reloaded, heldout)?;
                if re_acc * 100.0 != accuracy {
                    return Err(HarnessError::AuditMismatch {
                        run_id,
                        recorded: accuracy,
                        recomputed: re_acc * 100.0,
                    });
                }

                records.push(RunRecord {
                    run_id,
                    algorithm: cfg.algorithm,
                    test_env: heldout.env_id.clone(),
                    selection_rule: rule,
                    seed,
                    replicates: opts.n_seeds,
                    config: cfg.clone(),
                    accuracy,
                    wall_clock_secs,
                    history_path: history_path.clone(),
                });
            }
        }
    }
    Ok(records)
}

// ── Aggregation and emission ────────────────────────────────────────────

/// Mean ± standard error of one table cell, plus the per-algorithm
/// cross-domain average rows (test_env = "average").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub algorithm: Algorithm,
    pub selection_rule: SelectionRule,
    pub test_env: String,
    pub mean_accuracy: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Group records into per-(algorithm, rule, test_env) cells with standard
/// errors over seed replicates, then append one "average" row per
/// (algorithm, rule): the arithmetic mean of that pair's per-domain cells.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.algorithm.to_string(), r.selection_rule.to_string(), r.test_env.clone()))
            .or_default()
            .push(r.accuracy);
    }
    let mut cells = Vec::new();
    for ((algo, rule, env), accs) in &groups {
        let n = accs.len();
        let mean = accs.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var =
                accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        cells.push(SummaryCell {
            algorithm: algo.parse().expect("round-trip"),
            selection_rule: rule.parse().expect("round-trip"),
            test_env: env.clone(),
            mean_accuracy: mean,
            std_error,
            n,
        });
    }
    // cross-domain averages, one per (algorithm, rule)
    let mut by_pair: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for c in &cells {
        by_pair
            .entry((c.algorithm.to_string(), c.selection_rule.to_string()))
            .or_default()
            .push(c.mean_accuracy);
    }
    for ((algo, rule), means) in by_pair {
        cells.push(SummaryCell {
            algorithm: algo.parse().expect("round-trip"),
            selection_rule: rule.parse().expect("round-trip"),
            test_env: "average".into(),
            mean_accuracy: means.iter().sum::<f64>() / means.len() as f64,
            std_error: 0.0,
            n: means.len(),
        });
    }
    cells
}

/// One parsed CSV row of [`emit_results`] output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub algorithm: Algorithm,
    pub test_env: String,
    pub selection_rule: SelectionRule,
    pub seed: u64,
    pub eps: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Percent, rounded to one decimal (the emitted precision).
    pub accuracy: f64,
}

impl From<&RunRecord> for ResultRow {
    fn from(r: &RunRecord) -> ResultRow {
        ResultRow {
            run_id: r.run_id.clone(),
            algorithm: r.algorithm,
            test_env: r.test_env.clone(),
            selection_rule: r.selection_rule,
            seed: r.seed,
            eps: r.config.eps,
            alpha: r.config.alpha,
            lr: r.config.learning_rate,
            batch_size: r.config.batch_size,
            accuracy: (r.accuracy * 10.0).round() / 10.0,
        }
    }
}

const RESULTS_HEADER: &str =
    "run_id,algorithm,test_env,selection_rule,seed,eps,alpha,lr,batch_size,accuracy";

/// Render the results CSV (accuracy to one decimal, e.g. `68.4`).
pub fn results_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.1}\n",
            r.run_id,
            r.algorithm,
            r.test_env,
            r.selection_rule,
            r.seed,
            r.config.eps,
            r.config.alpha,
            r.config.learning_rate,
            r.config.batch_size,
            r.accuracy,
        ));
    }
    out
}

/// Parse [`results_csv`] output back into schema rows.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, HarnessError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        other => {
            return Err(HarnessError::Config(format!(
                "unexpected results header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(HarnessError::Config(format!(
                "results line {} has {} fields, expected 10",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, HarnessError> {
            s.parse::<f64>()
                .map_err(|e| HarnessError::Config(format!("bad {what} {s:?}: {e}")))
        };
        rows.push(ResultRow {
            run_id: fields[0].to_string(),
            algorithm: fields[1]
                .parse()
                .map_err(|e| HarnessError::Config(format!("{e}")))?,
            test_env: fields[2].to_string(),
            selection_rule: fields[3].parse()?,
            seed: fields[4]
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad seed: {e}")))?,
            eps: parse_f(fields[5], "eps")?,
            alpha: parse_f(fields[6], "alpha")?,
            lr: parse_f(fields[7], "lr")?,
            batch_size: fields[8]
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad batch_size: {e}")))?,
            accuracy: parse_f(fields[9], "accuracy")?,
        });
    }
    Ok(rows)
}

/// Write the results CSV to `path`, a full-config JSON mirror next to it
/// (`.json`), and the per-cell summary (`.summary.json`). Byte-stable
/// given identical records.
pub fn emit_results(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, results_csv(records))?;
    let mirror = serde_json::to_string_pretty(records)?;
    std::fs::write(path.with_extension("json"), mirror)?;
    let summary = serde_json::to_string_pretty(&summarize(records))?;
    std::fs::write(path.with_extension("summary.json"), summary)?;
    Ok(())
}

/// Least-squares slope of accuracy against batch size; None with fewer
/// than two points or zero batch-size variance.
fn lsq_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    if sxx == 0.0 {
        return None;
    }
    let sxy = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    Some(sxy / sxx)
}

/// Write the batch-size/accuracy scatter CSV plus a companion JSON
/// (`.slopes.json`) with the least-squares slope per test domain (null
/// when undefined).
pub fn emit_batch_size_scatter(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut csv = String::from("batch_size,accuracy\n");
    for r in records {
        csv.push_str(&format!("{},{:.1}\n", r.config.batch_size, r.accuracy));
    }
    std::fs::write(path, csv)?;

    let mut by_env: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        by_env
            .entry(r.test_env.clone())
            .or_default()
            .push((r.config.batch_size as f64, r.accuracy));
    }
    let slopes: BTreeMap<String, Option<f64>> = by_env
        .into_iter()
        .map(|(env, pts)| (env, lsq_slope(&pts)))
        .collect();
    std::fs::write(
        path.with_extension("slopes.json"),
        serde_json::to_string_pretty(&slopes)?,
    )?;
    Ok(())
}

// ── Dataset materialization ─────────────────────────────────────────────

/// Desk-scale defaults for the two benchmark datasets.
pub const CMNIST_FLIP_PROBS: [f64; 3] = [0.1, 0.2, 0.9];
pub const CMNIST_LABEL_NOISE: f64 = 0.25;
pub const CMNIST_N_TRAIN: usize = 15_000;
pub const CMNIST_N_TEST: usize = 3_000;
pub const SYNTH_CORRS: [f64; 3] = [0.95, 0.9, -0.9];
pub const SYNTH_N_PER_ENV: usize = 600;
pub const SYNTH_D_INV: usize = 3;
pub const SYNTH_D_SPU: usize = 3;
pub const SYNTH_MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cmnist,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "cmnist" => Ok(DatasetKind::Cmnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(HarnessError::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Cmnist => "cmnist",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

/// Sidecar describing how a data directory's environments were built.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataDirManifest {
    pub dataset: DatasetKind,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub environments: Vec<DatasetManifest>,
}

fn manifest_path(dir: &Path, kind: DatasetKind) -> PathBuf {
    dir.join(format!("{kind}.manifest.json"))
}

/// Materialize a dataset under `dir`: the colored-digit corpus writes its
/// raw IDX substrate plus a manifest; the synthetic dataset (regenerated
/// in memory on demand) writes its manifest only. Returns the manifest.
pub fn gen_data(kind: DatasetKind, dir: &Path, seed: u64) -> Result<DataDirManifest, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let manifest = match kind {
        DatasetKind::Cmnist => {
            write_glyph_mnist(dir, CMNIST_N_TRAIN, CMNIST_N_TEST, seed)?;
            let envs = load_envs(kind, dir, seed)?;
            let mut params = BTreeMap::new();
            params.insert("label_noise".into(), CMNIST_LABEL_NOISE);
            params.insert("n_train".into(), CMNIST_N_TRAIN as f64);
            params.insert("n_test".into(), CMNIST_N_TEST as f64);
            for (i, p) in CMNIST_FLIP_PROBS.iter().enumerate() {
                params.insert(format!("color_flip_prob_{i}"), *p);
            }
            DataDirManifest {
                dataset: kind,
                seed,
                params,
                environments: envs.iter().map(|e| e.manifest(seed)).collect(),
            }
        }
        DatasetKind::Synthetic => {
            let envs = synthetic_envs(seed)?;
            let mut params = BTreeMap::new();
            params.insert("n_per_env".into(), SYNTH_N_PER_ENV as f64);
            params.insert("d_inv".into(), SYNTH_D_INV as f64);
            params.insert("d_spu".into(), SYNTH_D_SPU as f64);
            params.insert("inv_margin".into(), SYNTH_MARGIN);
            for (i, c) in SYNTH_CORRS.iter().enumerate() {
                params.insert(format!("spu_corr_{i}"), *c);
            }
            DataDirManifest {
                dataset: kind,
                seed,
                params,
                environments: envs.iter().map(|e| e.manifest(seed)).collect(),
            }
        }
    };
    std::fs::write(
        manifest_path(dir, kind),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn synthetic_envs(seed: u64) -> Result<Vec<EnvironmentDataset<f64>>, HarnessError> {
    Ok(make_synthetic_spurious(
        SYNTH_N_PER_ENV,
        SYNTH_D_INV,
        SYNTH_D_SPU,
        SYNTH_MARGIN,
        &SYNTH_CORRS,
        seed,
    )?)
}

/// Load (or regenerate) the environments for a dataset. The colored-digit
/// corpus needs its raw IDX files under `dir` (see [`gen_data`]); the
/// synthetic dataset is rebuilt in memory from its parameters.
pub fn load_envs(
    kind: DatasetKind,
    dir: &Path,
    seed: u64,
) -> Result<Vec<EnvironmentDataset<f64>>, HarnessError> {
    match kind {
        DatasetKind::Cmnist => {
            let (train, _test) = RawMnist::train_test_from_dir(dir)?;
            Ok(make_cmnist(&train, &CMNIST_FLIP_PROBS, CMNIST_LABEL_NOISE, seed)?)
        }
        DatasetKind::Synthetic => synthetic_envs(seed),
    }
}

/// Seed recorded by `gen-data` for a directory, so `train` builds the
/// exact same environments.
pub fn load_data_seed(kind: DatasetKind, dir: &Path) -> Result<u64, HarnessError> {
    let text = std::fs::read_to_string(manifest_path(dir, kind)).map_err(|e| {
        HarnessError::Data(DataError::Format(format!(
            "no {kind} manifest under {}: {e}; run gen-data first",
            dir.display()
        )))
    })?;
    let manifest: DataDirManifest = serde_json::from_str(&text)?;
    Ok(manifest.seed)
}

/// Default model for a dataset: the two-hidden-layer width-256 ReLU net
/// for colored digits, a small one-hidden-layer net for the synthetic
/// blocks (a purely linear model cannot trade the two feature blocks off
/// under a shared per-environment translation, so it would flatten every
/// perturbation-based method onto ERM there).
pub fn default_model(kind: DatasetKind, seed: u64) -> ModelSpec {
    match kind {
        DatasetKind::Cmnist => ModelSpec::mlp(1568, vec![256], 256, true, seed),
        DatasetKind::Synthetic => {
            let d = SYNTH_D_INV + SYNTH_D_SPU;
            ModelSpec::mlp(d, vec![32], 32, true, seed)
        }
    }
}

/// Desk-scale iteration budget; `full_scale` restores the reference count.
pub const DESK_ITERATIONS: usize = 2_000;
pub const FULL_ITERATIONS: usize = 10_000;

/// Baseline config for a dataset: its default model, pixel-range clipping
/// only where inputs actually live in [0, 1], and the desk-scale budget.
pub fn default_config(algorithm: Algorithm, kind: DatasetKind, seed: u64) -> TrainerConfig {
    let mut cfg = TrainerConfig::new(algorithm, default_model(kind, seed));
    cfg.seed = seed;
    cfg.iterations = DESK_ITERATIONS;
    cfg.eval_interval = 100;
    cfg.input_range = match kind {
        DatasetKind::Cmnist => Some((0.0, 1.0)),
        DatasetKind::Synthetic => None, // unbounded feature space
    };
    cfg
}

/// Convenience accuracy (fraction) of a model on a feature matrix.
pub fn model_accuracy<E: Scalar>(
    model: &Model<E>,
    xs: &Array2<E>,
    ys: &[i8],
) -> Result<f64, HarnessError> {
    let ds = EnvironmentDataset {
        env_id: "adhoc".into(),
        xs: xs.clone(),
        ys: ys.to_vec(),
        digit_labels: None,
        env_params: BTreeMap::new(),
        split: "adhoc".into(),
    };
    let (_, acc) = evaluate(model, &ds)?;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainers::HistoryRow;

    fn space(key: &str, lo: f64, hi: f64) -> SearchSpace {
        let mut intervals = BTreeMap::new();
        intervals.insert(key.to_string(), (lo, hi));
        SearchSpace { intervals }
    }

    #[test]
    fn log_uniform_median_sits_at_geometric_center() {
        // [1e-1, 1e2]: log10 is uniform on [-1, 2], median 0.5
        let draws = sample_hparams(&space("eps", 1e-1, 1e2), 10_000, 7).unwrap();
        let mut logs: Vec<f64> = draws.iter().map(|d| d["eps"].log10()).collect();
        logs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = (logs[4999] + logs[5000]) / 2.0;
        assert!((median - 0.5).abs() < 0.05, "median log10 {median}");
        assert!(logs.iter().all(|l| (-1.0..=2.0).contains(l)));
    }

    #[test]
    fn degenerate_interval_returns_exact_constant() {
        let draws = sample_hparams(&space("alpha", 0.3, 0.3), 50, 1).unwrap();
        assert!(draws.iter().all(|d| d["alpha"] == 0.3));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = space("lr", 1e-4, 1e-1);
        assert_eq!(sample_hparams(&s, 20, 9).unwrap(), sample_hparams(&s, 20, 9).unwrap());
        assert_ne!(sample_hparams(&s, 20, 9).unwrap(), sample_hparams(&s, 20, 10).unwrap());
    }

    #[test]
    fn invalid_search_spaces_are_rejected() {
        assert!(matches!(
            sample_hparams(&SearchSpace::default(), 5, 0),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            sample_hparams(&space("eps", 0.0, 1.0), 5, 0),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            sample_hparams(&space("eps", 2.0, 1.0), 5, 0),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            sample_hparams(&space("eps", 1.0, 2.0), 0, 0),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn hparam_overlay_maps_keys_and_rounds_batch_size() {
        let base = TrainerConfig::new(Algorithm::Dat, ModelSpec::mlp(2, vec![], 2, false, 0));
        let mut draw = BTreeMap::new();
        draw.insert("eps".to_string(), 0.5);
        draw.insert("alpha".to_string(), 0.2);
        draw.insert("lr".to_string(), 3e-3);
        draw.insert("irm_lambda".to_string(), 42.0);
        draw.insert("batch_size".to_string(), 17.4);
        let cfg = apply_hparams(&base, &draw).unwrap();
        assert_eq!(cfg.eps, 0.5);
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.learning_rate, 3e-3);
        assert_eq!(cfg.irm_lambda, 42.0);
        assert_eq!(cfg.batch_size, 17);

        let mut bad = BTreeMap::new();
        bad.insert("momentum".to_string(), 0.9);
        assert!(matches!(apply_hparams(&base, &bad), Err(HarnessError::Config(_))));
    }

    // ── select_model fixtures ───────────────────────────────────────────

    fn eval_row(iteration: usize, split: &str, acc: f64) -> HistoryRow {
        HistoryRow {
            iteration,
            env_id: format!("{split}_env"),
            loss: Some(0.0),
            penalty: None,
            delta_norm: None,
            split: split.into(),
            accuracy: Some(acc),
        }
    }

    fn history(rounds: &[(usize, &[(&str, f64)])]) -> TrainHistory {
        let mut h = TrainHistory::default();
        for &(iter, rows) in rounds {
            // interleave a train row to mimic real histories
            h.rows.push(HistoryRow {
                iteration: iter,
                env_id: "e0".into(),
                loss: Some(1.0),
                penalty: None,
                delta_norm: None,
                split: "train".into(),
                accuracy: None,
            });
            for &(split, acc) in rows {
                h.rows.push(eval_row(iter, split, acc));
            }
        }
        h
    }

    #[test]
    fn selection_picks_argmax_round_per_rule() {
        let h = history(&[
            (9, &[("val", 0.9), ("heldout", 0.2)]),
            (19, &[("val", 0.5), ("heldout", 0.8)]),
        ]);
        assert_eq!(select_model(&h, SelectionRule::TrainDomain).unwrap(), 0);
        assert_eq!(select_model(&h, SelectionRule::Oracle).unwrap(), 1);
    }

    #[test]
    fn selection_under_monotone_improvement_picks_last_round() {
        let h = history(&[
            (4, &[("val", 0.5)]),
            (9, &[("val", 0.6)]),
            (14, &[("val", 0.7)]),
        ]);
        assert_eq!(select_model(&h, SelectionRule::TrainDomain).unwrap(), 2);
    }

    #[test]
    fn selection_breaks_ties_toward_earliest_round() {
        let h = history(&[(4, &[("val", 0.7)]), (9, &[("val", 0.7)])]);
        assert_eq!(select_model(&h, SelectionRule::TrainDomain).unwrap(), 0);
    }

    #[test]
    fn selection_averages_multiple_validation_domains() {
        // round 0 mean (0.9+0.1)/2 = 0.5; round 1 mean (0.6+0.6)/2 = 0.6
        let h = history(&[
            (4, &[("val", 0.9), ("val", 0.1)]),
            (9, &[("val", 0.6), ("val", 0.6)]),
        ]);
        assert_eq!(select_model(&h, SelectionRule::TrainDomain).unwrap(), 1);
    }

    #[test]
    fn selection_requires_the_rules_split() {
        let h = history(&[(4, &[("val", 0.5)])]);
        assert!(matches!(
            select_model(&h, SelectionRule::Oracle),
            Err(HarnessError::MissingSplit(s)) if s == "heldout"
        ));
        assert!(matches!(
            select_model(&TrainHistory::default(), SelectionRule::TrainDomain),
            Err(HarnessError::MissingSplit(_))
        ));
    }

    // ── leave-one-out protocol ──────────────────────────────────────────

    fn toy_envs() -> Vec<EnvironmentDataset<f64>> {
        make_synthetic_spurious(40, 2, 1, 1.0, &[0.9, 0.8, -0.9], 11).unwrap()
    }

    fn toy_cfg() -> TrainerConfig {
        let mut cfg = TrainerConfig::new(Algorithm::Erm, ModelSpec::mlp(3, vec![], 3, false, 0));
        cfg.iterations = 12;
        cfg.eval_interval = 4;
        cfg.batch_size = 16;
        cfg.input_range = None;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn leave_one_out_yields_run_per_domain_seed_and_rule() {
        let envs = toy_envs();
        let opts = LeaveOneOutOptions { n_seeds: 2, ..Default::default() };
        let records = leave_one_out(&envs, &toy_cfg(), &opts).unwrap();
        // 3 held-out domains x 2 seeds x 2 rules
        assert_eq!(records.len(), 12);
        for rule in [SelectionRule::TrainDomain, SelectionRule::Oracle] {
            let per_rule: Vec<_> =
                records.iter().filter(|r| r.selection_rule == rule).collect();
            assert_eq!(per_rule.len(), 3 * opts.n_seeds);
        }
        for r in &records {
            assert!((0.0..=100.0).contains(&r.accuracy), "accuracy {}", r.accuracy);
            assert_eq!(r.replicates, 2);
            assert!(r.run_id.starts_with("erm_"));
            assert!(r.run_id.contains(&r.test_env));
        }
        // same train run feeds both rules: seeds match across the rule split
        let mut seeds: Vec<(String, u64)> = records
            .iter()
            .map(|r| (format!("{}_{}", r.test_env, r.run_id), r.seed))
            .collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 12);
    }

    #[test]
    fn leave_one_out_respects_heldout_filter_and_env_minimum() {
        let envs = toy_envs();
        let opts = LeaveOneOutOptions {
            n_seeds: 1,
            heldouts: Some(vec![envs[2].env_id.clone()]),
            ..Default::default()
        };
        let records = leave_one_out(&envs, &toy_cfg(), &opts).unwrap();
        assert_eq!(records.len(), 2); // 1 domain x 1 seed x 2 rules
        assert!(records.iter().all(|r| r.test_env == envs[2].env_id));

        assert!(matches!(
            leave_one_out(&envs[..1], &toy_cfg(), &LeaveOneOutOptions::default()),
            Err(HarnessError::Protocol(_))
        ));
    }

    #[test]
    fn leave_one_out_is_deterministic_and_persists_artifacts() {
        let envs = toy_envs();
        let dir = tempfile::tempdir().unwrap();
        let opts = LeaveOneOutOptions {
            n_seeds: 1,
            heldouts: Some(vec![envs[0].env_id.clone()]),
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let a = leave_one_out(&envs, &toy_cfg(), &opts).unwrap();
        let mut b = leave_one_out(&envs, &toy_cfg(), &opts).unwrap();
        for (ra, rb) in a.iter().zip(b.iter_mut()) {
            rb.wall_clock_secs = ra.wall_clock_secs; // timing is not part of determinism
        }
        assert_eq!(a, b);
        let hist = a[0].history_path.as_ref().unwrap();
        assert!(Path::new(hist).exists());
        let ckpt = dir.path().join(format!("{}.checkpoint.json", a[0].run_id));
        assert!(ckpt.exists());
        let reloaded: Model<f64> =
            Model::from_checkpoint_json(&std::fs::read_to_string(ckpt).unwrap()).unwrap();
        let held = &envs[0];
        let (_, acc) = evaluate(&reloaded, held).unwrap();
        assert_eq!(acc * 100.0, a[0].accuracy);
    }

    #[test]
    fn train_val_split_is_disjoint_and_sized() {
        let envs = toy_envs();
        let (tr, val) = split_train_val(&envs[0], 0.2, 3).unwrap();
        assert_eq!(tr.n() + val.n(), envs[0].n());
        assert_eq!(val.n(), 8); // 20% of 40
        assert_eq!(tr.split, "train");
        assert_eq!(val.split, "val");
        // deterministic
        let (tr2, _) = split_train_val(&envs[0], 0.2, 3).unwrap();
        assert_eq!(tr.xs, tr2.xs);
    }

    // ── aggregation and emission ────────────────────────────────────────

    fn record(algo: Algorithm, env: &str, rule: SelectionRule, seed: u64, acc: f64) -> RunRecord {
        let mut cfg = TrainerConfig::new(algo, ModelSpec::mlp(2, vec![], 2, false, 0));
        cfg.eps = 0.25;
        cfg.alpha = 0.125;
        cfg.learning_rate = 0.001;
        cfg.batch_size = 32;
        RunRecord {
            run_id: format!("{algo}_{env}_s{seed}_{rule}"),
            algorithm: algo,
            test_env: env.into(),
            selection_rule: rule,
            seed,
            replicates: 2,
            config: cfg,
            accuracy: acc,
            wall_clock_secs: 0.0,
            history_path: None,
        }
    }

    #[test]
    fn summary_reports_mean_stderr_and_cross_domain_average() {
        let rule = SelectionRule::Oracle;
        let records = vec![
            record(Algorithm::Erm, "a", rule, 0, 70.0),
            record(Algorithm::Erm, "a", rule, 1, 80.0),
            record(Algorithm::Erm, "b", rule, 0, 60.0),
            record(Algorithm::Erm, "b", rule, 1, 60.0),
        ];
        let cells = summarize(&records);
        let cell = |env: &str| cells.iter().find(|c| c.test_env == env).unwrap();
        assert_eq!(cell("a").mean_accuracy, 75.0);
        assert!((cell("a").std_error - 5.0).abs() < 1e-12); // sd 7.07/sqrt(2)
        assert_eq!(cell("b").mean_accuracy, 60.0);
        assert_eq!(cell("b").std_error, 0.0);
        assert_eq!(cell("average").mean_accuracy, 67.5);
        assert_eq!(cell("average").n, 2);
    }

    #[test]
    fn results_csv_round_trips_and_formats_one_decimal() {
        let records = vec![
            record(Algorithm::Dat, "e2", SelectionRule::Oracle, 0, 68.4321),
            record(Algorithm::Erm, "e0", SelectionRule::TrainDomain, 1, 50.0),
        ];
        let csv = results_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run_id,algorithm,test_env,selection_rule,seed,eps,alpha,lr,batch_size,accuracy"
        );
        assert_eq!(
            lines.next().unwrap(),
            "dat_e2_s0_oracle,dat,e2,oracle,0,0.25,0.125,0.001,32,68.4"
        );
        assert_eq!(
            lines.next().unwrap(),
            "erm_e0_s1_train_domain,erm,e0,train_domain,1,0.25,0.125,0.001,32,50.0"
        );
        let rows = parse_results_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], ResultRow::from(&records[0]));
        assert_eq!(rows[0].accuracy, 68.4);
        // byte-stable
        assert_eq!(csv, results_csv(&records));
        // empty input still yields the header
        assert_eq!(results_csv(&[]).lines().count(), 1);
        assert!(parse_results_csv("nope\n").is_err());
    }

    #[test]
    fn emit_results_writes_csv_json_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let records = vec![record(Algorithm::Uat, "e1", SelectionRule::Oracle, 0, 62.5)];
        emit_results(&records, &path).unwrap();
        let csv1 = std::fs::read(&path).unwrap();
        assert!(path.with_extension("json").exists());
        assert!(path.with_extension("summary.json").exists());
        let mirror: Vec<RunRecord> =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(mirror, records);
        // repeated emission is byte-identical
        emit_results(&records, &path).unwrap();
        assert_eq!(csv1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn scatter_reports_least_squares_slope_per_domain() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        let mut records = Vec::new();
        // accuracy = 50 + 0.1 * batch_size over three batch sizes
        for (i, bs) in [16usize, 32, 64].into_iter().enumerate() {
            let mut r = record(
                Algorithm::Dat,
                "e0",
                SelectionRule::TrainDomain,
                i as u64,
                50.0 + 0.1 * bs as f64,
            );
            r.config.batch_size = bs;
            records.push(r);
        }
        records.push(record(Algorithm::Dat, "solo", SelectionRule::TrainDomain, 9, 55.0));
        emit_batch_size_scatter(&records, &path).unwrap();
        let csv = std::fs::read_to_string(&path).unwrap();
        assert!(csv.starts_with("batch_size,accuracy\n16,51.6\n32,53.2\n64,56.4\n"));
        let slopes: BTreeMap<String, Option<f64>> = serde_json::from_str(
            &std::fs::read_to_string(path.with_extension("slopes.json")).unwrap(),
        )
        .unwrap();
        assert!((slopes["e0"].unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(slopes["solo"], None);
    }

    #[test]
    fn run_seed_is_deterministic_and_id_sensitive() {
        assert_eq!(run_seed(7, "dat_e0_s0"), run_seed(7, "dat_e0_s0"));
        assert_ne!(run_seed(7, "dat_e0_s0"), run_seed(7, "dat_e0_s1"));
        assert_ne!(run_seed(7, "dat_e0_s0"), run_seed(8, "dat_e0_s0"));
    }

    #[test]
    fn synthetic_gen_data_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_data(DatasetKind::Synthetic, dir.path(), 13).unwrap();
        assert_eq!(manifest.environments.len(), 3);
        assert_eq!(load_data_seed(DatasetKind::Synthetic, dir.path()).unwrap(), 13);
        let envs = load_envs(DatasetKind::Synthetic, dir.path(), 13).unwrap();
        assert_eq!(envs.len(), 3);
        assert!(envs.iter().all(|e| e.n() == SYNTH_N_PER_ENV));
        // regenerated data matches the manifest's content hashes
        for (env, m) in envs.iter().zip(&manifest.environments) {
            assert_eq!(env.manifest(13).content_hash, m.content_hash);
        }
        assert!(load_data_seed(DatasetKind::Cmnist, dir.path()).is_err());
    }

    #[test]
    fn dataset_kind_and_rule_parse_from_cli_names() {
        assert_eq!("cmnist".parse::<DatasetKind>().unwrap(), DatasetKind::Cmnist);
        assert_eq!("synthetic".parse::<DatasetKind>().unwrap(), DatasetKind::Synthetic);
        assert!("imagenet".parse::<DatasetKind>().is_err());
        assert_eq!(
            "train_domain".parse::<SelectionRule>().unwrap(),
            SelectionRule::TrainDomain
        );
        assert_eq!("oracle".parse::<SelectionRule>().unwrap(), SelectionRule::Oracle);
        assert!("test_domain".parse::<SelectionRule>().is_err());
    }
}
