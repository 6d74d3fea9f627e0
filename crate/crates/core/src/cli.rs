//! The `m2v` command line: config resolution, subcommand dispatch and the
//! mapping of failures to exit codes with a one-line JSON diagnostic.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::audio::{load_clips, AudioError, Waveform};
use crate::encoder::EncoderError;
use crate::gradsuite::{run_gradcheck_suite, SUITE_TOLERANCE};
use crate::numerics::ParamStore;
use crate::probe::{
    combine_checkpoints, extract_pooled, format_table, probe_encoder, run_probe_suite, FeatureCache, MetricReport,
    ProbeConfig, ProbeData, ProbeError, ProbeOptions, ProbeWeights, Tap, SPLIT_NAMES,
};
use crate::synth::{generate_corpus, CorpusConfig, SynthError};
use crate::trainer::{make_ablation_grid, run_pretrain, Checkpoint, GridEntry, RunOptions, TrainConfig, TrainError, TrainState, OUT_DIRS};

/// Every setting a subcommand can read, one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct M2vConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    /// Single-line JSON diagnostic.
    pub fn diagnostic(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
            CliError::Numerical(m) => ("numerical", m),
        };
        serde_json::json!({ "error": kind, "code": self.exit_code(), "message": msg }).to_string()
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Numerics(_) | TrainError::Encoder(EncoderError::Numerics(_)) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Config(_) => CliError::Usage(e.to_string()),
            ProbeError::Train(t) => t.into(),
            ProbeError::Encoder(EncoderError::Numerics(_)) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("I/O error on {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "m2v", version, about = "Masked teacher/student pretraining on raw music audio, plus probing")]
struct Cli {
    /// JSON config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.lr=1e-3`; repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (checkpoints/, features/, reports/, logs/).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic labeled corpus into --out.
    Synth,
    /// Pretrain on the training split of a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pretrain the ablation grid and probe every variant.
    Grid {
        #[arg(long)]
        corpus: PathBuf,
        /// Variants trained concurrently in worker processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Skip the combined probing report.
        #[arg(long)]
        no_probe: bool,
    },
    /// Write pooled features per tap for every clip of a corpus.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Probe checkpoints, run directories or a grid directory.
    Probe {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Add a row for a randomly initialized encoder.
        #[arg(long)]
        baseline: bool,
    },
    /// Finite-difference gradient checks of every op and the desk encoder.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn flatten_keys(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_keys(&p, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.to_string())),
    }
}

/// `key = default` for every config leaf.
pub fn config_key_listing() -> String {
    let mut keys = Vec::new();
    flatten_keys("", &serde_json::to_value(M2vConfig::default()).expect("config serializes"), &mut keys);
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (set with --config FILE or --set KEY=VALUE):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s.push_str("\nEnvironment: M2V_SEED overrides corpus.seed, train.seed and probe.seed.");
    s
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    *cur = value;
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then `M2V_SEED`.
pub fn resolve_config(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<M2vConfig, CliError> {
    let mut v = serde_json::to_value(M2vConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let over: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !over.is_object() {
            return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
        }
        merge(&mut v, over);
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{o}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, key.trim(), value)?;
    }
    if let Some(s) = env_seed {
        let seed: u64 = s.trim().parse().map_err(|_| CliError::Usage(format!("M2V_SEED `{s}` is not an unsigned integer")))?;
        for section in ["corpus", "train", "probe"] {
            set_path(&mut v, &format!("{section}.seed"), Value::from(seed))?;
        }
    }
    let cfg: M2vConfig = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    cfg.train.validate().map_err(CliError::from)?;
    cfg.probe.validate().map_err(CliError::from)?;
    Ok(cfg)
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path, CliError> {
    out.as_deref().ok_or_else(|| CliError::Usage("--out is required for this subcommand".into()))
}

fn make_layout(out: &Path) -> Result<(), CliError> {
    for d in OUT_DIRS {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(io_error(&p))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).map_err(io_error(path))
}

fn train_clips(corpus: &Path) -> Result<Vec<Waveform>, CliError> {
    Ok(load_clips(&corpus.join("train.jsonl"))?.into_iter().map(|(_, w)| w).collect())
}

/// Entry point: parses `argv`, runs, and returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let command = Cli::command().after_help(config_key_listing());
    let cli = match command.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("usage error").to_string());
            eprintln!("{}", err.diagnostic());
            return err.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env_seed = std::env::var("M2V_SEED").ok();
    let cfg = resolve_config(cli.config.as_deref(), &cli.set, env_seed.as_deref())?;
    let resolved = serde_json::to_string(&cfg).expect("config serializes");
    log::info!("resolved config: {resolved}");
    if !matches!(cli.cmd, Cmd::Gradcheck { .. }) {
        let out = require_out(&cli.out)?;
        make_layout(out)?;
        write_json(&out.join("logs").join("resolved_config.json"), &cfg)?;
    }
    match cli.cmd {
        Cmd::Synth => {
            let out = require_out(&cli.out)?;
            let summary = generate_corpus(&cfg.corpus, out)?;
            let counts: Vec<usize> = summary.splits.iter().map(Vec::len).collect();
            println!("{}", serde_json::json!({ "out": out.display().to_string(), "train": counts[0], "valid": counts[1], "test": counts[2] }));
            Ok(())
        }
        Cmd::Pretrain { corpus, resume } => {
            let out = require_out(&cli.out)?;
            let clips = train_clips(&corpus)?;
            let opts = RunOptions { threads: cli.threads, resume, progress_every: 50 };
            let outcome = run_pretrain(&cfg.train, &clips, out, &opts)?;
            for c in &outcome.checkpoints {
                println!("{}", c.display());
            }
            Ok(())
        }
        Cmd::Grid { corpus, parallel, no_probe } => {
            let out = require_out(&cli.out)?;
            run_grid(&cfg, &corpus, out, parallel.max(1), cli.threads, no_probe)
        }
        Cmd::Extract { checkpoint, corpus } => {
            let out = require_out(&cli.out)?;
            extract(&cfg.probe, &checkpoint, &corpus, out, cli.threads)
        }
        Cmd::Probe { checkpoint, corpus, baseline } => {
            let out = require_out(&cli.out)?;
            let data = ProbeData::load(&corpus)?;
            let opts = ProbeOptions { threads: cli.threads, features_dir: None };
            let mut reports = Vec::new();
            if baseline {
                let state = TrainState::new(&cfg.train)?;
                let params = match cfg.probe.weights {
                    ProbeWeights::Student => &state.distill.student,
                    ProbeWeights::Teacher => &state.distill.teacher,
                };
                reports.push(probe_encoder(&cfg.train.encoder, params, cfg.train.target.top_k, &data, &cfg.probe, &opts, "Random init")?);
            }
            for target in &checkpoint {
                reports.extend(probe_target(target, &data, &cfg.probe, &opts)?);
            }
            write_reports(out, "probe", &reports)
        }
        Cmd::Gradcheck { seed } => {
            let entries = run_gradcheck_suite(seed).map_err(|e| CliError::Numerical(e.to_string()))?;
            let mut failed = Vec::new();
            for e in &entries {
                println!("{:<16} max_rel_error {:.3e} ({} coords)", e.name, e.max_rel_error, e.checked);
                if !e.passed() {
                    failed.push(e.name.clone());
                }
            }
            if let Some(out) = &cli.out {
                fs::create_dir_all(out.join("reports")).map_err(io_error(out))?;
                write_json(&out.join("reports").join("gradcheck.json"), &entries)?;
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Numerical(format!("gradient check above {SUITE_TOLERANCE:e} for: {}", failed.join(", "))))
            }
        }
    }
}

fn write_reports(out: &Path, name: &str, reports: &[MetricReport]) -> Result<(), CliError> {
    let table = format_table(reports);
    write_json(&out.join("reports").join(format!("{name}.json")), &reports)?;
    let txt = out.join("reports").join(format!("{name}.txt"));
    fs::write(&txt, &table).map_err(io_error(&txt))?;
    print!("{table}");
    Ok(())
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_error(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "m2v"))
        .collect();
    v.sort();
    Ok(v)
}

fn probe_run(label: &str, dir: &Path, data: &ProbeData, cfg: &ProbeConfig, opts: &ProbeOptions) -> Result<MetricReport, CliError> {
    let cks = checkpoints_in(&dir.join("checkpoints"))?;
    let mut reports = Vec::with_capacity(cks.len());
    for ck in &cks {
        log::info!("probing {}", ck.display());
        reports.push(run_probe_suite(ck, data, cfg, opts)?);
    }
    Ok(combine_checkpoints(label, &reports)?)
}

/// A checkpoint file gives one row; a run directory one row selected over
/// its checkpoints; a grid directory one row per variant.
fn probe_target(target: &Path, data: &ProbeData, cfg: &ProbeConfig, opts: &ProbeOptions) -> Result<Vec<MetricReport>, CliError> {
    if target.is_file() {
        return Ok(vec![run_probe_suite(target, data, cfg, opts)?]);
    }
    let grid_index = target.join("reports").join("grid.json");
    if grid_index.is_file() {
        let text = fs::read_to_string(&grid_index).map_err(io_error(&grid_index))?;
        let entries: Vec<GridEntry> = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", grid_index.display())))?;
        return entries.iter().map(|e| probe_run(&e.label, &target.join("runs").join(&e.id), data, cfg, opts)).collect();
    }
    if target.join("checkpoints").is_dir() {
        let label = target.file_name().map_or_else(|| target.display().to_string(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![probe_run(&label, target, data, cfg, opts)?]);
    }
    Err(CliError::Usage(format!("{} is neither a checkpoint, a run directory nor a grid directory", target.display())))
}

fn run_grid(cfg: &M2vConfig, corpus: &Path, out: &Path, parallel: usize, threads: usize, no_probe: bool) -> Result<(), CliError> {
    let grid = make_ablation_grid(&cfg.train);
    write_json(&out.join("reports").join("grid.json"), &grid)?;
    let runs = out.join("runs");
    for e in &grid {
        let dir = runs.join(&e.id);
        make_layout(&dir)?;
        write_json(&dir.join("logs").join("variant.json"), &M2vConfig { train: e.config.clone(), ..cfg.clone() })?;
    }
    if parallel == 1 {
        let clips = train_clips(corpus)?;
        for e in &grid {
            log::info!("grid variant {} ({})", e.id, e.label);
            run_pretrain(&e.config, &clips, &runs.join(&e.id), &RunOptions { threads, resume: None, progress_every: 50 })?;
        }
    } else {
        let exe = std::env::current_exe().map_err(|e| CliError::Data(format!("cannot locate the m2v executable: {e}")))?;
        let mut pending: Vec<&GridEntry> = grid.iter().rev().collect();
        let mut running: Vec<(String, Child)> = Vec::new();
        while !pending.is_empty() || !running.is_empty() {
            while running.len() < parallel {
                let Some(e) = pending.pop() else { break };
                let dir = runs.join(&e.id);
                let child = Command::new(&exe)
                    .arg("pretrain")
                    .arg("--corpus")
                    .arg(corpus)
                    .arg("--config")
                    .arg(dir.join("logs").join("variant.json"))
                    .arg("--out")
                    .arg(&dir)
                    .arg("--threads")
                    .arg(threads.to_string())
                    .env_remove("M2V_SEED")
                    .spawn()
                    .map_err(|err| CliError::Data(format!("cannot start worker for {}: {err}", e.id)))?;
                running.push((e.id.clone(), child));
            }
            let (id, mut child) = running.remove(0);
            let status = child.wait().map_err(|err| CliError::Data(format!("worker {id}: {err}")))?;
            if !status.success() {
                let msg = format!("grid variant {id} failed with {status}");
                return Err(match status.code() {
                    Some(1) => CliError::Usage(msg),
                    Some(3) => CliError::Numerical(msg),
                    _ => CliError::Data(msg),
                });
            }
        }
    }
    if no_probe {
        return Ok(());
    }
    let data = ProbeData::load(corpus)?;
    let opts = ProbeOptions { threads, features_dir: None };
    let reports: Vec<MetricReport> =
        grid.iter().map(|e| probe_run(&e.label, &runs.join(&e.id), &data, &cfg.probe, &opts)).collect::<Result<_, _>>()?;
    write_reports(out, "grid_table", &reports)
}

fn extract(cfg: &ProbeConfig, checkpoint: &Path, corpus: &Path, out: &Path, threads: usize) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let params: &ParamStore<f32> = match cfg.weights {
        ProbeWeights::Student => &ck.student,
        ProbeWeights::Teacher => &ck.teacher,
    };
    let mut clips = Vec::new();
    for split in SPLIT_NAMES {
        let m = corpus.join(format!("{split}.jsonl"));
        if m.is_file() {
            clips.extend(load_clips(&m)?);
        }
    }
    if clips.is_empty() {
        return Err(CliError::Data(format!("no manifests found in {}", corpus.display())));
    }
    let taps = Tap::all(ck.config.encoder.layers, ck.config.target.top_k);
    let waves: Vec<&Waveform> = clips.iter().map(|(_, w)| w).collect();
    let threads = if threads == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { threads };
    let feats = extract_pooled(&ck.config.encoder, params, &waves, &taps, threads)?;
    let mut index = BTreeMap::new();
    for (ti, tap) in taps.iter().enumerate() {
        let records = clips.iter().zip(&feats).map(|((r, _), f)| (r.clip_id(), f[ti].clone())).collect();
        let path = out.join("features").join(format!("{}.m2vf", tap.name()));
        FeatureCache { tap_id: tap.id(), records }.save(&path)?;
        index.insert(tap.name(), path.display().to_string());
        println!("{}", path.display());
    }
    let mut meta = Map::new();
    meta.insert("checkpoint".into(), Value::String(checkpoint.display().to_string()));
    meta.insert("taps".into(), serde_json::to_value(index).expect("index serializes"));
    write_json(&out.join("features").join("index.json"), &Value::Object(meta))
}
