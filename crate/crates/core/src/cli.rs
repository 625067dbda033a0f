//! Command-line runner: data generation, training, evaluation, the identity
//! suite and the ablation matrix.
//!
//! Exit codes: 0 success, 1 identity failure, 2 config error, 3 IO error,
//! 4 training abort.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{serde_name, AblationCell, AblationConfig, ExperimentConfig};
use crate::data::{PreferenceDataset, Provenance};
use crate::eval::{evaluate_policy, t_interval_half_width, Baseline, DecodeMode, EvalReport};
use crate::experiment::{
    dataset_seed, evaluate_splits, offline_dataset, run_training, Setup, SplitReports,
};
use crate::identity::{format_table, run_identity_checks, Fault, IdentityOptions};
use crate::policy::FactorizedPolicy;
use crate::training::{Checkpoint, RunLog, TrainMode};
use crate::{Error, Result};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IDENTITY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_ABORT: u8 = 4;

/// Toy-scale Reward-aware Preference Optimization laboratory.
#[derive(Debug, Parser)]
#[command(name = "rpo-lab", version)]
pub struct Cli {
    /// Output root; relative `output.dir` values resolve against it.
    #[arg(long, global = true, env = "RPO_LAB_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample reference responses and write an annotated preference dataset.
    GenData(RunArgs),
    /// Train per the config; prints the final evaluation as JSON.
    Train(RunArgs),
    /// Evaluate a checkpoint against a baseline on every split.
    Eval(EvalArgs),
    /// Check every recovery, equivalence and gradient identity.
    IdentityCheck(IdentityArgs),
    /// Run an ablation matrix and write per-seed and summary CSVs.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment TOML, or a manifest/provenance JSON written by an earlier run.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides `trainer.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Checkpoint file written by `train`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Baseline checkpoint; defaults to the reference policy.
    #[arg(long, value_name = "PATH")]
    pub baseline: Option<PathBuf>,
    /// Overrides the sampled-decode seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IdentityArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference trials per loss; defaults to min(trials, 100).
    #[arg(long)]
    pub fd_trials: Option<usize>,
    #[arg(long, hide = true, value_parser = parse_fault)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ablation matrix TOML.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn parse_fault(s: &str) -> std::result::Result<Fault, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Json(_) | Error::InvalidExample(_) => EXIT_IO,
        Error::NonFiniteGradient { .. } | Error::NonFinite(_) => EXIT_ABORT,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` and runs; the binary's entry point.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFiniteGradient {
                batch: Some(batch), ..
            } = &e
            {
                eprintln!("offending batch: {batch}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    let root = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::GenData(a) => gen_data(&root, a).map(|_| EXIT_OK),
        Command::Train(a) => train(&root, a).map(|_| EXIT_OK),
        Command::Eval(a) => eval(&root, a).map(|_| EXIT_OK),
        Command::IdentityCheck(a) => identity_check(a),
        Command::Ablate(a) => ablate(&root, a).map(|_| EXIT_OK),
    }
}

/// `fs::read_to_string` whose error names the path.
fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Loads a TOML config or the `config` field of a JSON sidecar.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = read_text(path)?;
    let named = |e: Error| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => Error::Config(format!("{}: {other}", path.display())),
    };
    if path.extension().is_some_and(|e| e == "json") {
        let v: Value = serde_json::from_str(&text).map_err(|e| named(e.into()))?;
        let toml = v
            .get("config")
            .and_then(Value::as_str)
            .ok_or_else(|| named(Error::Config("missing key `config`".into())))?;
        ExperimentConfig::from_toml_str(toml).map_err(named)
    } else {
        ExperimentConfig::from_toml_str(&text).map_err(named)
    }
}

fn load_run_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
    }
    Ok(cfg)
}

/// Replayable record of a command: the effective config and its hash.
fn manifest(cfg: &ExperimentConfig, command: &str) -> Result<Value> {
    Ok(json!({
        "config_hash": cfg.hash(),
        "command": command,
        "config": cfg.to_toml_string()?,
    }))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Adds `config_hash` to every JSON line.
fn tag_jsonl(jsonl: &[u8], hash: &str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(jsonl.len() + 80);
    for line in jsonl.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        let mut v: serde_json::Map<String, Value> = serde_json::from_slice(line)?;
        v.insert("config_hash".into(), Value::String(hash.into()));
        serde_json::to_writer(&mut out, &v)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// `dataset.jsonl` → `dataset.provenance.json`.
pub fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("provenance.json")
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn judge_file(setup: &Setup, hash: &str) -> Value {
    json!({
        "config_hash": hash,
        "judge": setup.judges().training().to_json_value(),
    })
}

fn gen_data(root: &Path, args: &RunArgs) -> Result<PathBuf> {
    let cfg = load_run_config(args)?;
    let hash = cfg.hash();
    let dir = cfg.output_dir(root);
    let setup = Setup::build(&cfg)?;
    let ds = offline_dataset(&cfg, &setup)?;
    create_dir(&dir)?;
    let path = dir.join("dataset.jsonl");
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf)?;
    fs::write(&path, tag_jsonl(&buf, &hash)?)?;
    let mut side = manifest(&cfg, "gen-data")?;
    side["judge_id"] = json!(ds.provenance.judge_id);
    side["seeds"] = json!({
        "dataset": dataset_seed(&cfg),
        "trainer": cfg.trainer.seed,
        "gt": cfg.env.gt_seed,
        "reference": cfg.env.ref_seed,
    });
    side["provenance"] = serde_json::to_value(&ds.provenance)?;
    side["examples"] = json!(ds.len());
    write_json(&sidecar_path(&path), &side)?;
    if setup.learnt.is_some() {
        write_json(&dir.join("judge.json"), &judge_file(&setup, &hash))?;
    }
    eprintln!("wrote {} examples to {}", ds.len(), path.display());
    Ok(path)
}

/// Reads a dataset written by `gen-data` together with its sidecar.
pub fn read_dataset(path: &Path) -> Result<PreferenceDataset> {
    let side_path = sidecar_path(path);
    let side: Value = serde_json::from_str(&read_text(&side_path)?)?;
    let provenance: Provenance = serde_json::from_value(
        side.get("provenance")
            .cloned()
            .ok_or_else(|| Error::Config(format!("{}: missing key `provenance`", side_path.display())))?,
    )?;
    let file = fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    PreferenceDataset::read_jsonl(BufReader::new(file), provenance)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    config_hash: String,
    checkpoint: Checkpoint,
    judge: Value,
}

fn train(root: &Path, args: &RunArgs) -> Result<SplitReports> {
    let cfg = load_run_config(args)?;
    let hash = cfg.hash();
    let dir = cfg.output_dir(root);
    let setup = Setup::build(&cfg)?;
    let dataset = match &cfg.output.dataset {
        Some(p) if cfg.trainer.mode == TrainMode::Offline => Some(read_dataset(&resolve(root, p))?),
        _ => None,
    };
    create_dir(&dir)?;
    write_json(&dir.join("manifest.json"), &manifest(&cfg, "train")?)?;
    let run = run_training(&cfg, &setup, dataset.as_ref())?;

    let judge = setup.judges().training().to_json_value();
    for ck in &run.iterations {
        let file = CheckpointFile {
            config_hash: hash.clone(),
            checkpoint: ck.clone(),
            judge: judge.clone(),
        };
        let path = dir
            .join("checkpoints")
            .join(format!("iteration-{}.json", ck.iteration));
        write_json(&path, &serde_json::to_value(&file)?)?;
    }
    if setup.learnt.is_some() {
        write_json(&dir.join("judge.json"), &judge_file(&setup, &hash))?;
    }
    write_run_log(&dir, &run.log, &hash)?;

    let reports = evaluate_splits(
        &cfg,
        &setup.env,
        &run.final_checkpoint().policy,
        &setup.env.reference,
    )?;
    let out = report_json(&reports, &hash, run.log.degenerate_groups)?;
    write_json(&dir.join("eval.json"), &out)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(reports)
}

fn write_run_log(dir: &Path, log: &RunLog, hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf)?;
    fs::write(dir.join("runlog.jsonl"), tag_jsonl(&buf, hash)?)?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    fs::write(dir.join("runlog.csv"), tag_csv(&csv, hash))?;
    Ok(())
}

/// Appends a `config_hash` column.
fn tag_csv(csv: &[u8], hash: &str) -> Vec<u8> {
    let text = String::from_utf8_lossy(csv);
    let mut out = String::with_capacity(text.len() * 2);
    for (i, line) in text.lines().enumerate() {
        out.push_str(line);
        out.push(',');
        out.push_str(if i == 0 { "config_hash" } else { hash });
        out.push('\n');
    }
    out.into_bytes()
}

fn report_json(r: &SplitReports, hash: &str, degenerate_groups: usize) -> Result<Value> {
    Ok(json!({
        "config_hash": hash,
        "valid": serde_json::to_value(&r.valid)?,
        "test": serde_json::to_value(&r.test)?,
        "ood": serde_json::to_value(&r.ood)?,
        "test_kl": r.test_kl,
        "degenerate_groups": degenerate_groups,
    }))
}

/// Reads a checkpoint file from `train`, or a bare checkpoint JSON.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = read_text(path)?;
    let v: Value = serde_json::from_str(&text)?;
    let inner = match v.get("checkpoint") {
        Some(c) => c.clone(),
        None => v,
    };
    Checkpoint::from_json(&inner.to_string())
}

fn eval(root: &Path, args: &EvalArgs) -> Result<Value> {
    let mut cfg = load_config(&args.config)?;
    if let (Some(seed), DecodeMode::Sampled { seed: s, .. }) = (args.seed, &mut cfg.eval.decode) {
        *s = seed;
    }
    let hash = cfg.hash();
    let setup = Setup::build(&cfg)?;
    let env = &setup.env;
    let policy = read_checkpoint(&args.checkpoint)?.policy;
    policy.same_shape(&env.reference)?;
    let baseline: FactorizedPolicy = match &args.baseline {
        Some(p) => read_checkpoint(p)?.policy,
        None => env.reference.clone(),
    };
    baseline.same_shape(&env.reference)?;
    let reports = evaluate_splits(&cfg, env, &policy, &baseline)?;
    let mut out = report_json(&reports, &hash, 0)?;
    if let Some(rm) = &setup.learnt {
        let learnt: EvalReport = evaluate_policy(
            &policy,
            rm,
            &env.split.test,
            Baseline::Policy(&baseline),
            cfg.eval.decode,
        )?;
        out["test_learnt"] = serde_json::to_value(learnt)?;
    }
    out["checkpoint"] = json!(args.checkpoint.display().to_string());
    let stem = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    write_json(&cfg.output_dir(root).join(format!("eval-{stem}.json")), &out)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(out)
}

fn identity_check(args: &IdentityArgs) -> Result<u8> {
    if args.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let mut opts = IdentityOptions::new(args.trials, args.seed);
    opts.fd_trials = args.fd_trials;
    opts.fault = args.inject_fault;
    let results = run_identity_checks(&opts)?;
    print!("{}", format_table(&results));
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("identity failures: {}", failed.join(", "));
        Ok(EXIT_IDENTITY)
    }
}

/// One finished ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config_hash: String,
    pub objective: String,
    pub k: usize,
    pub mode: String,
    pub judge: String,
    pub seed: u64,
    pub test_avg_reward: f64,
    pub test_win_rate: f64,
    pub ood_avg_reward: Option<f64>,
    pub ood_win_rate: Option<f64>,
    pub final_kl: f64,
}

fn run_cell(cell: &AblationCell, setup: &Setup, dir: &Path) -> Result<()> {
    let cfg = &cell.config;
    let hash = cfg.hash();
    create_dir(dir)?;
    write_json(&dir.join("manifest.json"), &manifest(cfg, "ablate")?)?;
    let run = run_training(cfg, setup, None)?;
    write_run_log(dir, &run.log, &hash)?;
    let r = evaluate_splits(cfg, &setup.env, &run.final_checkpoint().policy, &setup.env.reference)?;
    let result = CellResult {
        config_hash: hash,
        objective: serde_name(&cell.objective),
        k: cell.k,
        mode: serde_name(&cell.mode),
        judge: cell.judge_label.clone(),
        seed: cell.seed,
        test_avg_reward: r.test.avg_reward,
        test_win_rate: r.test.win_rate,
        ood_avg_reward: r.ood.as_ref().map(|o| o.avg_reward),
        ood_win_rate: r.ood.as_ref().map(|o| o.win_rate),
        final_kl: r.test_kl,
    };
    write_json(&dir.join("result.json"), &serde_json::to_value(&result)?)
}

fn ablate(root: &Path, args: &AblateArgs) -> Result<Vec<CellResult>> {
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let text = read_text(&args.config)?;
    let abl = AblationConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", args.config.display())),
        other => other,
    })?;
    let cells = abl.cells()?;
    let hash = abl.hash();
    let dir = abl.base.output_dir(root);
    create_dir(&dir)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({ "config_hash": hash, "command": "ablate", "config": text }),
    )?;

    let mut setups = Vec::new();
    for judge in abl.judge_axis() {
        let mut cfg = abl.base.clone();
        cfg.judge = judge;
        setups.push(Setup::build(&cfg)?);
    }
    let cell_dir = |c: &AblationCell| dir.join("cells").join(c.name());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(c, &setups[c.judge_index], &cell_dir(c)))
            .collect::<Result<Vec<()>>>()
    })?;

    let mut results = Vec::with_capacity(cells.len());
    for c in &cells {
        let text = fs::read_to_string(cell_dir(c).join("result.json"))?;
        results.push(serde_json::from_str::<CellResult>(&text)?);
    }
    fs::write(dir.join("ablation.csv"), per_seed_csv(&results, &hash))?;
    fs::write(dir.join("summary.csv"), summary_csv(&cells, &results, &hash))?;
    eprintln!("{} cells written to {}", results.len(), dir.display());
    Ok(results)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const METRIC_COLUMNS: [&str; 5] = [
    "test_avg_reward",
    "test_win_rate",
    "ood_avg_reward",
    "ood_win_rate",
    "final_kl",
];

fn metrics_of(r: &CellResult) -> [Option<f64>; 5] {
    [
        Some(r.test_avg_reward),
        Some(r.test_win_rate),
        r.ood_avg_reward,
        r.ood_win_rate,
        Some(r.final_kl),
    ]
}

fn per_seed_csv(results: &[CellResult], hash: &str) -> String {
    let mut out = format!(
        "objective,k,mode,judge,seed,{},config_hash\n",
        METRIC_COLUMNS.join(",")
    );
    for r in results {
        let m: Vec<String> = metrics_of(r).into_iter().map(opt).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.objective,
            r.k,
            r.mode,
            r.judge,
            r.seed,
            m.join(","),
            hash
        ));
    }
    out
}

/// Seed means and 95% t-interval half-widths per cell, in cell order.
fn summary_csv(cells: &[AblationCell], results: &[CellResult], hash: &str) -> String {
    let mut header = String::from("objective,k,mode,judge,n_seeds");
    for m in METRIC_COLUMNS {
        header.push_str(&format!(",{m}_mean,{m}_ci95"));
    }
    let mut out = format!("{header},config_hash\n");
    let mut groups: Vec<(String, Vec<&CellResult>)> = Vec::new();
    for (c, r) in cells.iter().zip(results) {
        match groups.iter_mut().find(|(g, _)| *g == c.group()) {
            Some((_, rs)) => rs.push(r),
            None => groups.push((c.group(), vec![r])),
        }
    }
    for (_, rs) in groups {
        let first = rs[0];
        out.push_str(&format!(
            "{},{},{},{},{}",
            first.objective,
            first.k,
            first.mode,
            first.judge,
            rs.len()
        ));
        for i in 0..METRIC_COLUMNS.len() {
            let vals: Option<Vec<f64>> = rs.iter().map(|r| metrics_of(r)[i]).collect();
            match vals {
                Some(v) => {
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    out.push_str(&format!(",{mean},{}", t_interval_half_width(&v)));
                }
                None => out.push_str(",,"),
            }
        }
        out.push_str(&format!(",{hash}\n"));
    }
    out
}
