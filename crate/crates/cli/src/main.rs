//! `fedcl`: ingest interaction logs, train and evaluate the federated
//! recommender, and sweep config keys.
//!
//! Config keys can be overridden after the named flags, as `--privacy.epsilon 2`,
//! `--privacy.epsilon=2` or `privacy.epsilon=2`. Outputs go to `--out`, else
//! `$FEDCL_OUT`, else `./runs`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use fedcl_core::checkpoint::Checkpoint;
use fedcl_core::config::ExperimentConfig;
use fedcl_core::dataset::{Dataset, Format, SplitDataset};
use fedcl_core::eval::{evaluate, MetricReport, Phase};
use fedcl_core::federation::Simulation;
use fedcl_core::synthetic::{generate, SyntheticConfig};
use fedcl_core::Error;

#[derive(Parser)]
#[command(name = "fedcl", version, about = "Federated contrastive recommendation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw log, k-core filter it and write the canonical dataset.
    Ingest {
        path: PathBuf,
        #[arg(long, default_value = "tabular")]
        format: Format,
        #[arg(long, default_value_t = 5)]
        kcore: usize,
        /// Output directory; defaults to `<out root>/data/<file stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print summary statistics of a raw log or canonical dataset.
    Stats {
        path: PathBuf,
        #[arg(long, default_value = "canonical")]
        format: Format,
    },
    /// Write a planted-cluster synthetic dataset. Takes `field=value` pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        params: Vec<String>,
    },
    /// Train one run per seed and summarise the test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on the dataset named by the config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        phase: Phase,
        #[command(flatten)]
        common: RunArgs,
    },
    /// List every config key with its default value.
    Keys,
    /// Train every value of one config key and write a CSV of summaries.
    Sweep {
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repetitions, overriding `experiment.seeds`.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, env = "FEDCL_OUT")]
    out: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY VALUE")]
    overrides: Vec<String>,
}

/// Errors carry the exit code: 2 for missing inputs and usage, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn out_root(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("runs"))
}

/// Splits trailing `--key value`, `--key=value` and `key=value` words into pairs.
fn parse_overrides(words: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let word = words[i].trim_start_matches("--");
        if let Some((k, v)) = word.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if let Some(v) = words.get(i + 1) {
            out.push((word.to_string(), v.clone()));
            i += 2;
        } else {
            return Err(fail(format!("override `{}` has no value", words[i])));
        }
    }
    Ok(out)
}

fn resolve_config(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    if let Some(n) = args.seeds {
        cfg.experiment.seeds = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical directories are used as written; raw logs are ingested and filtered.
fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    if cfg.dataset.path.is_empty() {
        return Err(fail("dataset.path is not set"));
    }
    let data = Dataset::ingest(&cfg.dataset.path, cfg.dataset.format)?;
    Ok(match cfg.dataset.format {
        Format::Canonical => data,
        _ => data.kcore_filter(cfg.dataset.kcore)?,
    })
}

fn cmd_ingest(path: PathBuf, format: Format, kcore: usize, out: Option<PathBuf>) -> CliResult<()> {
    let raw = Dataset::ingest(&path, format)?;
    let filtered = raw.kcore_filter(kcore)?;
    let dir = out.unwrap_or_else(|| {
        let stem = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
        out_root(std::env::var_os("FEDCL_OUT").map(PathBuf::from)).join("data").join(stem)
    });
    filtered.save(&dir)?;
    write(&dir.join("raw_stats.txt"), raw.stats()?.to_report())?;
    println!("raw\n{}", raw.stats()?.to_report());
    println!("{kcore}-core\n{}", filtered.stats()?.to_report());
    println!("hash={}", filtered.content_hash());
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_stats(path: PathBuf, format: Format) -> CliResult<()> {
    let data = Dataset::ingest(&path, format)?;
    print!("{}", data.stats()?.to_report());
    println!("hash={}", data.content_hash());
    Ok(())
}

fn cmd_synth(out: PathBuf, params: &[String]) -> CliResult<()> {
    let mut value = serde_json::to_value(SyntheticConfig::default()).expect("config serializes");
    let fields = value.as_object_mut().expect("struct");
    for p in params {
        let (k, v) = p
            .trim_start_matches("--")
            .split_once('=')
            .ok_or_else(|| fail(format!("expected field=value, got `{p}`")))?;
        if !fields.contains_key(k) {
            let valid: Vec<&String> = fields.keys().collect();
            return Err(fail(format!("unknown synthetic field `{k}`; valid fields: {valid:?}")));
        }
        let parsed: Value = serde_json::from_str(v).map_err(|_| fail(format!("`{k}`: cannot parse `{v}`")))?;
        fields.insert(k.to_string(), parsed);
    }
    let cfg: SyntheticConfig = serde_json::from_value(value).map_err(|e| fail(format!("synthetic config: {e}")))?;
    let data = generate(&cfg)?;
    data.dataset.save(&out)?;
    print!("{}", data.dataset.stats()?.to_report());
    println!("wrote {}", out.display());
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const METRICS: [&str; 4] = ["hr@5", "hr@10", "ndcg@5", "ndcg@10"];

fn metric_values(report: &MetricReport) -> [f64; 4] {
    [report.hr5, report.hr10, report.ndcg5, report.ndcg10]
}

/// Mean and sample standard deviation of each metric over the runs.
fn summarise(reports: &[MetricReport]) -> Vec<(f64, f64)> {
    (0..METRICS.len())
        .map(|m| mean_std(&reports.iter().map(|r| metric_values(r)[m]).collect::<Vec<_>>()))
        .collect()
}

/// Trains every seed of `cfg` into `dir/seed-<s>/` and writes `dir/summary.*`.
fn train_seeds(cfg: &ExperimentConfig, data: &Dataset, split: &Arc<SplitDataset>, dir: &Path) -> CliResult<Vec<(f64, f64)>> {
    cfg.validate_for(split.users.len(), split.num_items)?;
    create_dir(dir)?;
    let hash = data.content_hash();
    let mut reports = Vec::new();
    for run in 0..cfg.experiment.seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.federation.seed = cfg.run_seed(run);
        let seed = run_cfg.federation.seed;
        let run_dir = dir.join(format!("seed-{seed}"));
        create_dir(&run_dir)?;

        let header = json!({ "config": run_cfg.to_json(), "dataset_hash": hash, "seed": seed });
        let mut log = String::new();
        let _ = writeln!(log, "{header}");
        let timings = run_cfg.log.timings;
        let mut sim = Simulation::new(&run_cfg, split.clone())?;
        let outcome = sim.train(|m| {
            let _ = writeln!(log, "{}", m.to_json(timings));
            if let Some(val) = &m.eval {
                eprintln!("seed {seed} round {}: loss {:.4}, val HR@10 {:.4}", m.round, m.mean_loss, val.hr10);
            }
        })?;
        write(&run_dir.join("metrics.jsonl"), log)?;
        Checkpoint {
            encoder: run_cfg.model.encoder,
            params: outcome.best_params.clone(),
        }
        .save(run_dir.join("checkpoint.fclk"))?;
        let report = json!({
            "seed": seed,
            "dataset_hash": hash,
            "best_round": outcome.best_round,
            "rounds_run": outcome.rounds_run,
            "converged": outcome.converged,
            "val": outcome.best_val,
            "test": outcome.test,
            "epsilon_per_upload": run_cfg.privacy.epsilon,
            "max_uploads_per_client": sim.upload_counts().into_iter().max().unwrap_or(0),
        });
        write(&run_dir.join("report.json"), format!("{report:#}\n"))?;
        write(&run_dir.join("report.txt"), outcome.test.to_table(&format!("seed {seed}")))?;
        println!("seed {seed}: test {}", outcome.test.to_json());
        reports.push(outcome.test);
    }

    let stats = summarise(&reports);
    let mut summary = json!({
        "config": cfg.to_json(),
        "dataset_hash": hash,
        "runs": reports.len(),
    });
    let mut text = format!("{} runs\n", reports.len());
    for (name, (mean, std)) in METRICS.iter().zip(&stats) {
        summary[*name] = json!({ "mean": mean, "std": std });
        let _ = writeln!(text, "{name:<8} {mean:.4} ± {std:.4}");
    }
    write(&dir.join("summary.json"), format!("{summary:#}\n"))?;
    write(&dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(stats)
}

fn prepare(args: &RunArgs) -> CliResult<(ExperimentConfig, Dataset, Arc<SplitDataset>)> {
    let cfg = resolve_config(args)?;
    let data = load_dataset(&cfg)?;
    let split = Arc::new(data.leave_one_out_split()?);
    cfg.validate_for(split.users.len(), split.num_items)?;
    Ok((cfg, data, split))
}

fn cmd_train(args: RunArgs) -> CliResult<()> {
    let (cfg, data, split) = prepare(&args)?;
    let dir = out_root(args.out);
    train_seeds(&cfg, &data, &split, &dir)?;
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, phase: Phase, args: RunArgs) -> CliResult<()> {
    let (cfg, _, split) = prepare(&args)?;
    let ck = Checkpoint::load(&checkpoint)?;
    if ck.params.shared.num_items() != split.num_items {
        return Err(fail(format!(
            "checkpoint has {} items, dataset has {}",
            ck.params.shared.num_items(),
            split.num_items
        )));
    }
    let report = evaluate(&ck.params, ck.encoder, &split, phase, cfg.eval.exclude_seen, cfg.model.max_len)?;
    print!("{}", report.to_table(&checkpoint.display().to_string()));
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_sweep(key: String, values: Vec<String>, args: RunArgs) -> CliResult<()> {
    if !ExperimentConfig::valid_keys().contains(&key) {
        return Err(fail(format!(
            "unknown sweep key `{key}`; valid keys: {}",
            ExperimentConfig::valid_keys().join(", ")
        )));
    }
    let (cfg, data, split) = prepare(&args)?;
    // Every value must parse and validate before the first run starts.
    let mut configs = Vec::new();
    for v in &values {
        let mut c = cfg.clone();
        c.set(&key, v)?;
        c.validate_for(split.users.len(), split.num_items)?;
        configs.push(c);
    }
    let root = out_root(args.out);
    let mut csv = String::from("value");
    for name in METRICS {
        let _ = write!(csv, ",{name}_mean,{name}_std");
    }
    csv.push('\n');
    for (v, c) in values.iter().zip(&configs) {
        println!("{key} = {v}");
        let stats = train_seeds(c, &data, &split, &root.join(format!("{key}={v}")))?;
        csv.push_str(v);
        for (mean, std) in stats {
            let _ = write!(csv, ",{mean},{std}");
        }
        csv.push('\n');
    }
    let path = root.join("sweep.csv");
    write(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { path, format, kcore, out } => cmd_ingest(path, format, kcore, out),
        Command::Stats { path, format } => cmd_stats(path, format),
        Command::Synth { out, params } => cmd_synth(out, &params),
        Command::Train(args) => cmd_train(args),
        Command::Eval { checkpoint, phase, common } => cmd_eval(checkpoint, phase, common),
        Command::Sweep { key, values, common } => cmd_sweep(key, values, common),
        Command::Keys => {
            let defaults = ExperimentConfig::default();
            for key in ExperimentConfig::valid_keys() {
                println!("{key} = {}", defaults.get(&key).unwrap_or_default());
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
