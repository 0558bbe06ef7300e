//! The `coala` command line.
//!
//! Settings are resolved flag first, then the TOML config file, then the
//! `COALA_SEED` environment variable (seed only), then built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::audio::{conform, descriptors, extract_patch, load_wav, logmel, read_patches, write_patches};
use crate::cca::{report, CcaOptions};
use crate::checkpoint::Checkpoint;
use crate::error::{CoalaError, Result};
use crate::eval::synth::{LABELS, MANIFEST};
use crate::eval::{
    embedding_features, mfcc_features, read_labels, run_classification, synthesize_corpus, write_corpus,
    FeatureTable, ProbeConfig, SyntheticCorpusSpec,
};
use crate::objectives::{Denominator, Mode};
use crate::tags::{build_vocabulary, read_manifest, Vocabulary, DEFAULT_VOCAB_SIZE};
use crate::train::{load_model, split, train, Dataset, RunDir, TrainConfig, EPOCH_LOG};

pub const SEED_ENV: &str = "COALA_SEED";
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "coala", version, about = "Co-aligned audio and tag autoencoders")]
#[command(after_help = "Settings precedence: command-line flag > --config file > COALA_SEED (seed only) > default.\n\
Exit codes: 0 success, 1 usage error, 2 data error, 3 non-finite loss.")]
pub struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a tag vocabulary from a manifest.
    Vocab(VocabArgs),
    /// Extract one max-energy log-mel patch per clip.
    Preprocess(PreprocessArgs),
    /// Generate a labeled synthetic corpus.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Compute clip-level features (embeddings or MFCC statistics).
    Embed(EmbedArgs),
    /// Downstream classification with an MLP probe.
    Eval(EvalArgs),
    /// Canonical correlation of embeddings with acoustic descriptor statistics.
    Cca(CcaArgs),
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// TOML corpus spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_clips: Option<usize>,
    #[arg(long)]
    pub noise_level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// ae-c, e-c or cnn.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Patch store from `coala preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest holding the tags of each clip.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// TOML training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// exclude-positive or include-positive.
    #[arg(long)]
    pub contrastive_denominator: Option<Denominator>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Model checkpoint; omit with `--mfcc`.
    #[arg(long, required_unless_present = "mfcc")]
    pub checkpoint: Option<PathBuf>,
    /// MFCC mean and standard deviation features instead of embeddings.
    #[arg(long, conflicts_with = "checkpoint")]
    pub mfcc: bool,
    /// Corpus directory with `manifest.tsv` and optionally `labels.csv`.
    #[arg(long)]
    pub clips: PathBuf,
    /// Only clips whose split matches.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// One feature file with a split column, or a train file then a test file.
    #[arg(long, num_args = 1..=2, required = true)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CcaArgs {
    /// Clip-level embeddings; repeat for several models (`name=path` or a path).
    #[arg(long, required = true)]
    pub embeddings: Vec<String>,
    #[arg(long)]
    pub clips: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Energy fraction kept by the pre-reduction.
    #[arg(long, default_value_t = 0.99)]
    pub energy: f64,
    /// Skip the pre-reduction.
    #[arg(long)]
    pub no_reduction: bool,
    #[arg(long)]
    pub max_components: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

/// Provenance written next to a run's outputs before the work starts.
#[derive(Serialize, Debug)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub git_describe: String,
    pub inputs: Vec<InputDigest>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

#[derive(Serialize, Debug)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CoalaError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    fn new(argv: &[String], config: serde_json::Value, seed: u64, inputs: &[&Path]) -> Result<Self> {
        Ok(RunManifest {
            command: argv.get(1).cloned().unwrap_or_default(),
            argv: argv.to_vec(),
            config,
            seed,
            git_describe: git_describe(),
            inputs: inputs
                .iter()
                .map(|p| {
                    Ok(InputDigest {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect::<Result<_>>()?,
            started_unix: now(),
            finished_unix: None,
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|e| CoalaError::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CoalaError::io(&path, e))
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CoalaError::Invalid(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoalaError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoalaError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CoalaError::io(path, e))
}

/// Training settings from the config file, the seed fallback and the flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let (mut config, seed_in_file) = match &args.config {
        Some(p) => {
            let text = read_text(p)?;
            let has_seed = toml::from_str::<toml::Table>(&text)
                .map_err(|e| CoalaError::Format(format!("{}: {e}", p.display())))?
                .contains_key("seed");
            (TrainConfig::from_toml(&text)?, has_seed)
        }
        None => (TrainConfig::default(), false),
    };
    if !seed_in_file {
        if let Some(s) = env_seed()? {
            config.seed = s;
        }
    }
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(v) = args.epochs {
        config.epochs = Some(v);
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.clip_norm.is_some() {
        config.clip_norm = args.clip_norm;
    }
    if let Some(d) = args.contrastive_denominator {
        config.denominator = d;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_vocab(a: &VocabArgs) -> Result<()> {
    let manifest = read_manifest(&a.input)?;
    let tags: Vec<Vec<String>> = manifest.into_iter().map(|e| e.tags).collect();
    let vocab = build_vocabulary(&tags, a.size)?;
    vocab.save(&a.out)?;
    println!("{} tags from {} clips -> {}", vocab.len(), tags.len(), a.out.display());
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let manifest = read_manifest(&a.input)?;
    let patches = manifest
        .par_iter()
        .map(|e| {
            let clip = load_wav(&e.path)?;
            extract_patch(&logmel(&conform(&clip)), &e.clip)
        })
        .collect::<Result<Vec<_>>>()?;
    write_patches(&a.out, &patches)?;
    println!("{} patches -> {}", patches.len(), a.out.display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => toml::from_str(&read_text(p)?)
            .map_err(|e| CoalaError::Format(format!("{}: {e}", p.display())))?,
        None => SyntheticCorpusSpec::default(),
    };
    if a.seed.is_none() && a.spec.is_none() {
        if let Some(s) = env_seed()? {
            spec.seed = s;
        }
    }
    if let Some(v) = a.num_clips {
        spec.num_clips = v;
    }
    if let Some(v) = a.noise_level {
        spec.noise_level = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    spec.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| CoalaError::io(&a.out, e))?;
    let inputs: Vec<&Path> = a.spec.iter().map(PathBuf::as_path).collect();
    let mut run = RunManifest::new(
        argv,
        serde_json::to_value(&spec).unwrap_or_default(),
        spec.seed,
        &inputs,
    )?;
    run.write(&a.out)?;
    let clips = synthesize_corpus(&spec)?;
    write_corpus(&a.out, &clips)?;
    write_text(&a.out.join("synth.toml"), &toml::to_string(&spec).unwrap_or_default())?;
    run.finished_unix = Some(now());
    run.write(&a.out)?;
    println!("{} clips -> {}", clips.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let config = resolve_train_config(a)?;
    let mut inputs: Vec<&Path> = vec![&a.data, &a.manifest, &a.vocab];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    let vocab = Vocabulary::load(&a.vocab)?;
    // the tag layers are sized by the vocabulary
    let mut config = config;
    config.net.classes = vocab.len();
    config.validate()?;
    let run_dir = RunDir::create(&a.out)?;
    let mut run = RunManifest::new(
        argv,
        serde_json::to_value(&config).unwrap_or_default(),
        config.seed,
        &inputs,
    )?;
    run.write(&a.out)?;
    write_text(&run_dir.path("config.toml"), &config.to_toml())?;
    // a rerun into the same directory must not append to old logs
    for name in [crate::train::STEP_LOG, EPOCH_LOG] {
        let _ = fs::remove_file(run_dir.path(name));
    }

    let patches = read_patches(&a.data)?;
    let manifest = read_manifest(&a.manifest)?;
    let (data, dropped) = Dataset::assemble(patches, &manifest, &vocab)?;
    if dropped > 0 {
        log::warn!("{dropped} patches without an in-vocabulary tag were skipped");
    }
    let (tr, val) = split(&data, config.val_fraction, config.seed)?;
    let out = train(&tr, &val, &config, Some(&run_dir))?;
    run.finished_unix = Some(now());
    run.write(&a.out)?;
    let last = out.epochs.last();
    println!(
        "{} epochs, {} steps; best epoch {:?}; final train total {:.4}; run -> {}",
        out.epochs.len(),
        out.steps,
        out.best_epoch,
        last.map_or(f64::NAN, |e| e.train.total),
        a.out.display()
    );
    Ok(())
}

fn corpus_rows(dir: &Path, split_filter: Option<&str>) -> Result<Vec<(String, PathBuf, String, String)>> {
    let manifest = read_manifest(&dir.join(MANIFEST))?;
    let labels_path = dir.join(LABELS);
    let labels: std::collections::HashMap<String, (String, String)> = if labels_path.exists() {
        read_labels(&labels_path)?
            .into_iter()
            .map(|(id, l, s)| (id, (l, s)))
            .collect()
    } else {
        Default::default()
    };
    let mut rows = Vec::new();
    for e in manifest {
        let (label, split) = labels
            .get(&e.clip)
            .cloned()
            .unwrap_or_else(|| ("-".into(), "train".into()));
        if split_filter.is_some_and(|s| s != split) {
            continue;
        }
        rows.push((e.clip, e.path, label, split));
    }
    Ok(rows)
}

fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let rows = corpus_rows(&a.clips, a.split.as_deref())?;
    let features: Vec<Vec<f64>> = match &a.checkpoint {
        Some(ck) => {
            let mut model = load_model(&Checkpoint::load(ck)?)?;
            rows.iter()
                .map(|(_, path, _, _)| embedding_features(&mut model, &load_wav(path)?))
                .collect::<Result<_>>()?
        }
        None => rows
            .par_iter()
            .map(|(_, path, _, _)| Ok(mfcc_features(&load_wav(path)?)))
            .collect::<Result<_>>()?,
    };
    let mut table = FeatureTable::empty();
    for ((id, _, label, split), f) in rows.iter().zip(features) {
        table.push(id, label, split, f)?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoalaError::io(dir, e))?;
    }
    table.save(&a.out)?;
    println!("{} x {} features -> {}", table.len(), table.dim(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let table = match a.features.as_slice() {
        [one] => FeatureTable::load(one)?,
        [train_file, test_file] => {
            let mut t = FeatureTable::load(train_file)?;
            t.splits.iter_mut().for_each(|s| *s = "train".into());
            let test = FeatureTable::load(test_file)?;
            for i in 0..test.len() {
                t.push(&test.clip_ids[i], &test.labels[i], "test", test.features[i].clone())?;
            }
            t
        }
        _ => unreachable!("clap limits --features to one or two files"),
    };
    let mut probe = ProbeConfig::default();
    if let Some(s) = env_seed()? {
        probe.seed = s;
    }
    if let Some(v) = a.repeats {
        probe.repeats = v;
    }
    if let Some(v) = a.epochs {
        probe.epochs = v;
    }
    if let Some(v) = a.seed {
        probe.seed = v;
    }
    let rep = run_classification(&table, &probe)?;
    println!(
        "accuracy {:.4} +- {:.4} over {} repeats",
        rep.mean,
        rep.std,
        rep.accuracies.len()
    );
    if let Some(out) = &a.out {
        let json = serde_json::json!({ "probe": probe, "report": rep });
        write_text(out, &serde_json::to_string_pretty(&json).unwrap_or_default())?;
    }
    Ok(())
}

fn cmd_cca(a: &CcaArgs) -> Result<()> {
    let mut models = Vec::new();
    for spec in &a.embeddings {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let n = p.file_stem().map_or_else(|| spec.clone(), |s| s.to_string_lossy().into_owned());
                (n, p)
            }
        };
        let t = FeatureTable::load(&path)?;
        let rows: Vec<(String, Vec<f64>)> = t.clip_ids.into_iter().zip(t.features).collect();
        models.push((name, rows));
    }
    let ids: Vec<String> = models[0].1.iter().map(|(id, _)| id.clone()).collect();
    let descs = ids
        .par_iter()
        .map(|id| Ok((id.clone(), descriptors(&conform(&load_wav(&a.clips.join(id))?)))))
        .collect::<Result<Vec<_>>>()?;
    let opts = CcaOptions {
        energy: (!a.no_reduction).then_some(a.energy),
        max_components: a.max_components,
        top_k: a.top_k,
    };
    let rep = report(&models, &descs, &opts)?;
    write_text(&a.out, &rep.to_csv())?;
    print!("{}", rep.to_table());
    Ok(())
}

pub fn exit_code(e: &CoalaError) -> i32 {
    match e {
        CoalaError::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv_text: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 1;
        }
        // only the first pool in a process takes effect
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Vocab(a) => cmd_vocab(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a, &argv_text),
        Command::Train(a) => cmd_train(a, &argv_text),
        Command::Embed(a) => cmd_embed(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cca(a) => cmd_cca(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn help_lists_every_subcommand() {
        let help = Cli::command().render_long_help().to_string();
        for sub in ["vocab", "preprocess", "synth", "train", "embed", "eval", "cca"] {
            assert!(help.contains(sub), "{sub} missing from\n{help}");
        }
        assert_eq!(run(["coala", "--help"]), 0);
        assert_eq!(run(["coala", "frobnicate"]), 1);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("v.tsv");
        let missing = dir.path().join("nope.tsv");
        let code = run([
            "coala",
            "vocab",
            "--in",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
        assert!(!out.exists());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("t.toml");
        fs::write(&cfg, "mode = \"e-c\"\nbatch_size = 16\nseed = 4\n").unwrap();
        let args = TrainArgs::parse_from_for_test(&["--config", cfg.to_str().unwrap(), "--batch-size", "8"]);
        let c = resolve_train_config(&args).unwrap();
        assert_eq!(c.mode, Mode::EC);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.seed, 4);
    }

    impl TrainArgs {
        fn parse_from_for_test(extra: &[&str]) -> TrainArgs {
            let mut argv = vec!["coala", "train", "--data", "d", "--manifest", "m", "--vocab", "v", "--out", "o"];
            argv.extend_from_slice(extra);
            match Cli::try_parse_from(argv).unwrap().command {
                Command::Train(a) => a,
                _ => unreachable!(),
            }
        }
    }
}
