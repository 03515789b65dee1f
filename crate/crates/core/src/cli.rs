//! The `par` command line: `generate`, `train` and `eval`.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input or configuration,
//! 3 runtime failure.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clozegen::{
    dataset_stats, downsample_verbs, generate_instances, generate_multi_arg_instances, read_instances,
    write_instances, ClozeInstance,
};
use crate::corpus::{build_vocabulary, load_corpus, Vocabulary};
use crate::error::{ParError, Result};
use crate::eval::{baseline_most_freq, baseline_random, evaluate, export_traces, write_breakdown_csv, EvalReport};
use crate::exec::Executor;
use crate::model::ParModel;
use crate::trainer::{checkpoint_dir, load_checkpoint, save_checkpoint, train, EpochRecord, RunConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "par", version, about = "Pointer-attention reader for missing event arguments")]
pub struct Cli {
    /// Repeat for more log output (warnings are always shown).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a corpus into argument-cloze instances.
    Generate(GenerateArgs),
    /// Train a reader on an instance file.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline on an instance file.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Corpus file, one JSON document per line.
    pub corpus: PathBuf,
    /// Instance file to write; vocabulary, stats and manifest go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Only events with two or more qualifying arguments, one query per argument.
    #[arg(long)]
    pub multi_arg: bool,
    /// Predicates seen more often than this are downsampled.
    #[arg(long, default_value_t = 1000)]
    pub downsample_threshold: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop tokens seen fewer times than this from the vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Reuse an existing vocabulary (for dev and test files).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Instance file written by `generate`.
    pub instances: PathBuf,
    /// Output directory for checkpoints, the training log and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config with `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out instances; the best epoch by accuracy is recorded.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Vocabulary file; defaults to the one written next to the instances.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Random,
    Mostfreq,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Instance file written by `generate`.
    pub instances: PathBuf,
    /// Checkpoint directory to evaluate.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of accuracy by number of preceding answer mentions.
    #[arg(long)]
    pub breakdown: Option<PathBuf>,
    /// JSON lines of per-hop attention for every instance.
    #[arg(long, conflicts_with = "baseline")]
    pub traces: Option<PathBuf>,
    /// Vocabulary file; defaults to the one written next to the instances.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Seed of the random baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: Vec<String>,
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub vocab_hash: Option<String>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Prints to stdout, tolerating a closed pipe.
fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| ParError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[&Path]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: file_sha256(p)?,
            })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| ParError::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ParError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// `<dir>/<stem>.<suffix>` for an instance or report file `<dir>/<stem>.<ext>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

pub fn vocab_path(instances: &Path) -> PathBuf {
    sidecar(instances, "vocab.json")
}

fn load_instances(path: &Path) -> Result<Vec<ClozeInstance>> {
    read_instances(path).map_err(|e| e.in_file(path))
}

fn load_vocab(explicit: Option<&Path>, instances: &Path) -> Result<(PathBuf, Vocabulary)> {
    let path = explicit.map_or_else(|| vocab_path(instances), Path::to_path_buf);
    if !path.exists() {
        return Err(ParError::Usage(format!(
            "vocabulary {} not found; pass --vocab",
            path.display()
        )));
    }
    let vocab = Vocabulary::load(&path).map_err(|e| e.in_file(&path))?;
    Ok((path, vocab))
}

pub fn cmd_generate(args: &GenerateArgs, command: &[String]) -> Result<()> {
    let started = unix_now();
    require(&args.corpus, "corpus")?;
    if args.downsample_threshold == 0 {
        return Err(ParError::Usage("--downsample-threshold must be positive".into()));
    }
    let corpus = load_corpus(&args.corpus).map_err(|e| e.in_file(&args.corpus))?;
    let corpus = downsample_verbs(&corpus, args.downsample_threshold, args.seed);
    let vocab = match &args.vocab {
        Some(p) => {
            require(p, "vocabulary")?;
            Vocabulary::load(p).map_err(|e| e.in_file(p))?
        }
        None => build_vocabulary(&corpus, args.min_count),
    };
    let generate = if args.multi_arg {
        generate_multi_arg_instances
    } else {
        generate_instances
    };
    let instances: Vec<ClozeInstance> = corpus.iter().flat_map(generate).collect();
    if instances.is_empty() {
        log::warn!(
            "{} yields no {}instances",
            args.corpus.display(),
            if args.multi_arg { "multi-argument " } else { "" }
        );
    }
    write_instances(&args.out, &instances)?;
    let vocab_file = vocab_path(&args.out);
    vocab.save(&vocab_file)?;
    let stats = dataset_stats(&instances);
    let stats_file = sidecar(&args.out, "stats.json");
    write_json(&stats_file, &stats)?;
    say(&stats.to_string());

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.to_vec(),
        config: None,
        seed: Some(args.seed),
        workers: None,
        inputs: digests(&[&args.corpus])?,
        vocab_hash: Some(vocab.hash()),
        artifacts: [&args.out, &vocab_file, &stats_file]
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&sidecar(&args.out, "manifest.json"), &manifest)
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.in_file(p))?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.train.learning_rate = v;
    }
    config.validate()?;
    Ok(config)
}

fn check_vocab(expected: &str, found: &Vocabulary, what: &'static str) -> Result<()> {
    if expected == found.hash() {
        Ok(())
    } else {
        Err(ParError::HashMismatch {
            what,
            expected: expected.to_string(),
            found: found.hash(),
        })
    }
}

pub fn cmd_train(args: &TrainArgs, command: &[String]) -> Result<()> {
    let started = unix_now();
    require(&args.instances, "instance file")?;
    for (p, what) in [(&args.config, "config"), (&args.dev, "dev file"), (&args.resume, "checkpoint")] {
        if let Some(p) = p {
            require(p, what)?;
        }
    }
    let exec = Executor::new(args.workers)?;
    let mut config = resolve_config(args)?;
    let instances = load_instances(&args.instances)?;
    let (vocab_file, vocab) = load_vocab(args.vocab.as_deref(), &args.instances)?;
    let dev = args.dev.as_deref().map(load_instances).transpose()?;
    if let Some(dev_path) = &args.dev {
        let dev_vocab = vocab_path(dev_path);
        if dev_vocab.exists() {
            let v = Vocabulary::load(&dev_vocab).map_err(|e| e.in_file(&dev_vocab))?;
            check_vocab(&vocab.hash(), &v, "dev vocabulary")?;
        }
    }
    if instances.is_empty() {
        return Err(ParError::Usage(format!("{} contains no instances", args.instances.display())));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| ParError::io(&args.out, e))?;
    let log_path = args.out.join("train_log.jsonl");
    let best_path = args.out.join("best.json");

    let (mut state, mut log) = match &args.resume {
        Some(dir) => {
            let (state, meta) = load_checkpoint(dir)?;
            check_vocab(&meta.vocab_hash, &vocab, "instance vocabulary")?;
            let epochs = args.epochs.unwrap_or(meta.config.train.epochs);
            if args.seed.is_some() || args.batch_size.is_some() || args.learning_rate.is_some() || args.config.is_some() {
                log::warn!("resuming uses the checkpoint's configuration; only --epochs is applied");
            }
            config = meta.config.clone();
            config.train.epochs = epochs;
            let previous = read_log(&log_path)?;
            let kept = previous.into_iter().filter(|r| r.epoch <= state.epoch).collect();
            (state, kept)
        }
        None => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.train.seed);
            let model = ParModel::new(config.model.clone(), vocab.clone(), &mut rng)?;
            let state = TrainState::new(model);
            save_checkpoint(&checkpoint_dir(&args.out, 0), &state, &config, None)?;
            (state, Vec::new())
        }
    };
    write_log(&log_path, &log)?;
    let mut best: Option<EpochRecord> = read_best(&best_path)?;

    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| ParError::io(&log_path, e))?;
    let new_records = train(&mut state, &instances, dev.as_deref(), &config.train, &exec, |s, record| {
        save_checkpoint(&checkpoint_dir(&args.out, s.epoch), s, &config, Some(record))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(log_file, "{line}").map_err(|e| ParError::io(&log_path, e))?;
        if let Some(acc) = record.dev_acc {
            if best.as_ref().and_then(|b| b.dev_acc).is_none_or(|b| acc > b) {
                best = Some(record.clone());
                write_json(&best_path, record)?;
            }
        }
        Ok(())
    })?;
    log.extend(new_records);
    if let Some(last) = log.last() {
        say(&format!("epoch {} loss {:.6}", last.epoch, last.loss));
    }
    write_json(&args.out.join("config.json"), &config)?;

    let mut inputs = vec![&*args.instances, &*vocab_file];
    inputs.extend(args.dev.as_deref());
    inputs.extend(args.config.as_deref());
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.to_vec(),
        config: Some(config.clone()),
        seed: Some(config.train.seed),
        workers: Some(args.workers),
        inputs: digests(&inputs)?,
        vocab_hash: Some(vocab.hash()),
        artifacts: (0..=state.epoch)
            .map(|e| checkpoint_dir(&args.out, e))
            .filter(|p| p.exists())
            .chain([log_path.clone()])
            .map(|p| p.display().to_string())
            .collect(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&args.out.join("run_manifest.json"), &manifest)
}

fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| ParError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                ParError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                }
                .in_file(path)
            })
        })
        .collect()
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    std::fs::write(path, text).map_err(|e| ParError::io(path, e))
}

fn read_best(path: &Path) -> Result<Option<EpochRecord>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| ParError::io(path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| {
        ParError::Parse {
            line: e.line(),
            message: e.to_string(),
        }
        .in_file(path)
    })
}

pub fn cmd_eval(args: &EvalArgs, command: &[String]) -> Result<()> {
    let started = unix_now();
    require(&args.instances, "instance file")?;
    if let Some(c) = &args.checkpoint {
        require(c, "checkpoint")?;
    }
    let exec = Executor::new(args.workers)?;
    let instances = load_instances(&args.instances)?;
    let mut inputs: Vec<PathBuf> = vec![args.instances.clone()];
    let mut vocab_hash = None;
    let report: EvalReport = match (args.baseline, &args.checkpoint) {
        (Some(Baseline::Random), _) => baseline_random(&instances, args.seed),
        (Some(Baseline::Mostfreq), _) => baseline_most_freq(&instances),
        (None, Some(dir)) => {
            let (vocab_file, vocab) = load_vocab(args.vocab.as_deref(), &args.instances)?;
            let (state, meta) = load_checkpoint(dir)?;
            check_vocab(&meta.vocab_hash, &vocab, "instance vocabulary")?;
            inputs.push(vocab_file);
            inputs.push(dir.join("params.bin"));
            vocab_hash = Some(meta.vocab_hash);
            match &args.traces {
                Some(path) => export_traces(&state.model, &instances, path, &exec)?,
                None => evaluate(&state.model, &instances, &exec),
            }
        }
        (None, None) => return Err(ParError::Usage("pass --checkpoint or --baseline".into())),
    };
    if let Some(path) = &args.breakdown {
        write_breakdown_csv(path, &report.by_frequency)?;
    }
    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            let acc = report.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            say(&format!("{} accuracy {acc} ({}/{})", report.method, report.correct, report.n));
            let artifacts = [Some(path), args.breakdown.as_ref(), args.traces.as_ref()]
                .into_iter()
                .flatten()
                .map(|p| p.display().to_string())
                .collect();
            let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let manifest = RunManifest {
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.to_vec(),
                config: None,
                seed: (args.baseline == Some(Baseline::Random)).then_some(args.seed),
                workers: Some(args.workers),
                inputs: digests(&input_refs)?,
                vocab_hash,
                artifacts,
                started_unix: started,
                finished_unix: unix_now(),
            };
            write_json(&sidecar(path, "manifest.json"), &manifest)?;
        }
        None => say(&serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    let command: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a, &command),
        Command::Train(a) => cmd_train(a, &command),
        Command::Eval(a) => cmd_eval(a, &command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
