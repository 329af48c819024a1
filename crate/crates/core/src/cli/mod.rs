//! The `orderlab` command line: config resolution, subcommands and run
//! manifests.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! data/{vocab.json,train.jsonl,test.jsonl}
//! checkpoints/<tag>/{epoch_NNN.orgc,model.orgc,train_log.json,timing.json}
//! decodes/<tag>.jsonl
//! metrics/<tag>.json
//! reports/{sweep,variance,divergence}_<tag>.{json,csv}
//! reports/variance_<metric>.svg, reports/summary.md
//! manifests/<command>[_<tag>].json
//! ```
//!
//! `<tag>` is `run_name`, or the training objective when unset. Everything
//! except `timing.json` is a pure function of the config and inputs.

mod config;

pub use config::{DataConfig, RunConfig, CONFIG_VERSION};

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    emit_boxplot_svg, emit_report, par_map, permutation_sweep, representation_divergence, unit_rng, variance_study, DivergenceReport,
    ReportFormat, SweepReport, Tabular, VarianceReport, REPORT_SCHEMA_VERSION,
};
use crate::data::{
    build_vocabulary, read_records, records_to_dataset, shuffle_persona, tokenize, write_records, Dataset, DialogueRecord, Permutation,
    Split, Vocabulary,
};
use crate::decoding::decode;
use crate::error::{Error, Result};
use crate::metrics::{score_all, MetricValue};
use crate::model::{load_checkpoint, Conditioning, Transformer};
use crate::training::train;

#[derive(Debug, Parser)]
#[command(name = "orderlab", version, about = "Persona-order robustness experiments for dialogue models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// RunConfig JSON file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.gamma=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for analyses (overrides analysis.threads).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Force single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate (or import) the dataset and vocabulary.
    GenData,
    /// Train a model with the configured objective.
    Train,
    /// Decode responses for the test split.
    Decode,
    /// Score decoded responses.
    Eval,
    /// Best/worst persona-ordering sweep.
    Sweep,
    /// Shuffle variance study.
    Variance,
    /// Teacher-forced representation divergence probe.
    Divergence,
    /// Box plots and a summary table over existing reports.
    Report,
    /// Print the resolved config.
    Config,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Decode => "decode",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Variance => "variance",
            Command::Divergence => "divergence",
            Command::Report => "report",
            Command::Config => "config",
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A file recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

struct Run {
    cfg: RunConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.cfg.output_dir.join(sub);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn input(&mut self, path: PathBuf) -> Result<PathBuf> {
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(&path, bytes)?;
        self.outputs.push(path);
        Ok(())
    }

    fn artifact(&self, path: &Path) -> Result<Artifact> {
        let bytes = std::fs::read(path)?;
        let shown = path.strip_prefix(&self.cfg.output_dir).unwrap_or(path);
        Ok(Artifact {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }

    fn finish(self, command: Command, seed: u64) -> Result<PathBuf> {
        let name = match command {
            Command::GenData | Command::Report => command.name().to_string(),
            _ => format!("{}_{}", command.name(), self.cfg.tag()),
        };
        let manifest = Manifest {
            command: command.name().into(),
            config_sha256: self.cfg.digest(),
            seed,
            config: self.cfg.clone(),
            inputs: self.inputs.iter().map(|p| self.artifact(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| self.artifact(p)).collect::<Result<_>>()?,
        };
        let path = self.dir("manifests")?.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

struct Data {
    vocab: Vocabulary,
    train: Dataset,
    test: Dataset,
    test_records: Vec<DialogueRecord>,
}

fn load_data(run: &mut Run, need_train: bool) -> Result<Data> {
    let dir = run.cfg.output_dir.join("data");
    let vocab = Vocabulary::load(&run.input(dir.join("vocab.json"))?)?;
    let train = if need_train {
        records_to_dataset(&read_records(&run.input(dir.join("train.jsonl"))?)?, &vocab, Split::Train)?
    } else {
        Dataset::new(Split::Train, Vec::new(), vocab.len())?
    };
    let test_records = read_records(&run.input(dir.join("test.jsonl"))?)?;
    let test = records_to_dataset(&test_records, &vocab, Split::Test)?;
    Ok(Data {
        vocab,
        train,
        test,
        test_records,
    })
}

fn load_model(run: &mut Run, vocab: &Vocabulary) -> Result<(Transformer<f32>, String)> {
    let path = run.input(run.cfg.checkpoint_path())?;
    let digest = sha256_hex(&std::fs::read(&path)?);
    let (config, params) = load_checkpoint(&path)?;
    if config.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} entries but the data has {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    Ok((Transformer::new(config, params)?, digest))
}

fn gen_data(run: &mut Run) -> Result<u64> {
    let cfg = run.cfg.clone();
    let (train, test) = match (&cfg.data.train_path, &cfg.data.test_path) {
        (Some(tr), Some(te)) => (read_records(&run.input(tr.clone())?)?, read_records(&run.input(te.clone())?)?),
        _ => {
            let corpus = crate::data::generate_synthetic_corpus(&cfg.data.synthetic())?;
            (corpus.train_records, corpus.test_records)
        }
    };
    let vocab = build_vocabulary(train.iter().chain(&test));
    // validates every record against the vocabulary before anything is written
    records_to_dataset(&train, &vocab, Split::Train)?;
    records_to_dataset(&test, &vocab, Split::Test)?;
    let dir = run.dir("data")?;
    for (name, records) in [("train.jsonl", &train), ("test.jsonl", &test)] {
        let path = dir.join(name);
        write_records(records, &path)?;
        run.outputs.push(path);
    }
    let path = dir.join("vocab.json");
    vocab.save(&path)?;
    run.outputs.push(path);
    info!("wrote {} train / {} test samples, vocabulary {}", train.len(), test.len(), vocab.len());
    Ok(cfg.data.seed)
}

fn train_cmd(run: &mut Run) -> Result<u64> {
    let data = load_data(run, true)?;
    let mut model_cfg = run.cfg.model.clone();
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = data.vocab.len();
    } else if model_cfg.vocab_size != data.vocab.len() {
        return Err(Error::config(
            "model.vocab_size",
            format!("set to {} but the vocabulary has {} entries", model_cfg.vocab_size, data.vocab.len()),
        ));
    }
    let dir = run.dir(&format!("checkpoints/{}", run.cfg.tag()))?;
    let (_, log) = train(&model_cfg, &data.train, &run.cfg.train, Some(&dir))?;
    for e in &log.epochs {
        run.outputs.push(dir.join(format!("epoch_{:03}.orgc", e.epoch)));
    }
    run.outputs.push(dir.join("model.orgc"));
    run.write(dir.join("train_log.json"), pretty(&log)?)?;
    let timing: Vec<f64> = log.epochs.iter().map(|e| e.wall_clock_secs).collect();
    std::fs::write(dir.join("timing.json"), pretty(&serde_json::json!({ "epoch_wall_clock_secs": timing }))?)?;
    Ok(run.cfg.train.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub index: usize,
    pub order: Permutation,
    pub response: String,
    pub reference: String,
}

fn decode_cmd(run: &mut Run) -> Result<u64> {
    let data = load_data(run, false)?;
    let (model, _) = load_model(run, &data.vocab)?;
    let cfg = run.cfg.clone();
    let samples = &data.test.samples;
    let records = par_map(samples.len(), cfg.analysis.threads, |i| {
        let s = &samples[i];
        let n = s.persona.len();
        let order = if cfg.train.shuffle_at_eval {
            shuffle_persona(n, &mut unit_rng(cfg.train.seed, i as u64))
        } else {
            Permutation::identity(n)
        };
        let cond = Conditioning::for_sample(&model.config, s, &order)?;
        let ids = decode(&model, &cond, &cfg.decode, &mut unit_rng(cfg.decode.seed, i as u64))?;
        Ok(DecodeRecord {
            index: i,
            order,
            response: data.vocab.decode_text(&ids),
            reference: data.test_records[i].response.clone(),
        })
    })?;
    let mut out = String::new();
    for r in &records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    let path = run.dir("decodes")?.join(format!("{}.jsonl", cfg.tag()));
    run.write(path, out)?;
    Ok(cfg.decode.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub tag: String,
    pub metrics: Vec<MetricValue>,
}

fn eval_cmd(run: &mut Run) -> Result<u64> {
    let data = load_data(run, false)?;
    let path = run.input(run.cfg.output_dir.join("decodes").join(format!("{}.jsonl", run.cfg.tag())))?;
    let mut decodes = Vec::new();
    for (i, line) in std::fs::read_to_string(&path)?.lines().enumerate() {
        let r: DecodeRecord = serde_json::from_str(line).map_err(|e| Error::Schema { line: i + 1, msg: e.to_string() })?;
        decodes.push(r);
    }
    if decodes.len() != data.test_records.len() {
        return Err(Error::contract(format!(
            "{} decodes for {} test samples",
            decodes.len(),
            data.test_records.len()
        )));
    }
    let cands: Vec<Vec<String>> = decodes.iter().map(|d| tokenize(&d.response)).collect();
    let refs: Vec<Vec<String>> = data.test_records.iter().map(|r| tokenize(&r.response)).collect();
    let personas: Vec<Vec<Vec<String>>> = data
        .test_records
        .iter()
        .map(|r| r.persona.iter().map(|p| tokenize(p)).collect())
        .collect();
    let metrics = score_all(&cands, &refs, &personas, &run.cfg.metrics)?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tag: run.cfg.tag(),
        metrics,
    };
    let out = run.dir("metrics")?.join(format!("{}.json", run.cfg.tag()));
    run.write(out, pretty(&report)?)?;
    Ok(run.cfg.decode.seed)
}

fn emit_both<R: Serialize + Tabular>(run: &mut Run, kind: &str, report: &R) -> Result<()> {
    let dir = run.dir("reports")?;
    let stem = format!("{kind}_{}", run.cfg.tag());
    for (ext, fmt) in [("json", ReportFormat::Json), ("csv", ReportFormat::Csv)] {
        let path = dir.join(format!("{stem}.{ext}"));
        emit_report(report, &path, fmt)?;
        run.outputs.push(path);
    }
    Ok(())
}

fn sweep_cmd(run: &mut Run) -> Result<u64> {
    let data = load_data(run, false)?;
    let (model, id) = load_model(run, &data.vocab)?;
    let mut report = permutation_sweep(&model, &data.test, &data.vocab, &run.cfg.decode, &run.cfg.analysis)?;
    report.metadata.model_id = id;
    emit_both(run, "sweep", &report)?;
    Ok(run.cfg.analysis.master_seed)
}

fn variance_cmd(run: &mut Run) -> Result<u64> {
    let data = load_data(run, false)?;
    let (model, id) = load_model(run, &data.vocab)?;
    let mut report = variance_study(&model, &data.test, &data.vocab, &run.cfg.decode, &run.cfg.analysis)?;
    report.metadata.model_id = id;
    emit_both(run, "variance", &report)?;
    Ok(run.cfg.analysis.master_seed)
}

fn divergence_cmd(run: &mut Run) -> Result<u64> {
    let data = load_data(run, false)?;
    let (model, id) = load_model(run, &data.vocab)?;
    let mut report = representation_divergence(&model, &data.test, &data.vocab, &run.cfg.analysis)?;
    report.metadata.model_id = id;
    emit_both(run, "divergence", &report)?;
    Ok(run.cfg.analysis.master_seed)
}

/// Reads every `reports/<kind>_<tag>.json`, sorted by tag.
fn collect<R: for<'de> Deserialize<'de>>(run: &mut Run, kind: &str) -> Result<Vec<(String, R)>> {
    let dir = run.cfg.output_dir.join("reports");
    let mut found = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if let Some(tag) = name.strip_prefix(&format!("{kind}_")).and_then(|n| n.strip_suffix(".json")) {
                found.push((tag.to_string(), path));
            }
        }
    }
    found.sort();
    let mut out = Vec::new();
    for (tag, path) in found {
        let report = serde_json::from_str(&std::fs::read_to_string(run.input(path)?)?)?;
        out.push((tag, report));
    }
    Ok(out)
}

fn report_cmd(run: &mut Run) -> Result<u64> {
    let variance: Vec<(String, VarianceReport)> = collect(run, "variance")?;
    let sweeps: Vec<(String, SweepReport)> = collect(run, "sweep")?;
    let divergence: Vec<(String, DivergenceReport)> = collect(run, "divergence")?;
    if variance.is_empty() && sweeps.is_empty() && divergence.is_empty() {
        return Err(Error::MissingInput(run.cfg.output_dir.join("reports")));
    }
    let dir = run.dir("reports")?;
    let mut md = String::from("# Order-robustness summary\n");
    if let Some((_, first)) = variance.first() {
        let _ = writeln!(md, "\n## Shuffle variance\n\n| run | metric | mean | variance | std | min | max |\n|---|---|---|---|---|---|---|");
        for (tag, r) in &variance {
            for s in &r.aggregate {
                let _ = writeln!(
                    md,
                    "| {tag} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    s.metric.name(),
                    s.mean,
                    s.variance,
                    s.std,
                    s.min,
                    s.max
                );
            }
        }
        let labeled: Vec<(String, &VarianceReport)> = variance.iter().map(|(t, r)| (t.clone(), r)).collect();
        for &metric in &first.metrics {
            let path = dir.join(format!("variance_{}.svg", metric.name()));
            emit_boxplot_svg(&labeled, metric, &path)?;
            run.outputs.push(path);
        }
    }
    if !sweeps.is_empty() {
        let _ = writeln!(
            md,
            "\n## Ordering sweep\n\n| run | metric | mean best | mean worst | gap | corpus best | corpus worst |\n|---|---|---|---|---|---|---|"
        );
        for (tag, r) in &sweeps {
            for a in &r.aggregate {
                let _ = writeln!(
                    md,
                    "| {tag} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    a.metric.name(),
                    a.mean_best,
                    a.mean_worst,
                    a.mean_best - a.mean_worst,
                    a.corpus_best,
                    a.corpus_worst
                );
            }
        }
    }
    if !divergence.is_empty() {
        let _ = writeln!(md, "\n## Representation divergence\n\n| run | mean bidirectional KL |\n|---|---|");
        for (tag, r) in &divergence {
            let _ = writeln!(md, "| {tag} | {:.6} |", r.corpus_mean);
        }
    }
    run.write(dir.join("summary.md"), md)?;
    Ok(run.cfg.analysis.master_seed)
}

/// Runs one subcommand and writes its manifest; returns the manifest path.
pub fn execute(cli: &Cli) -> Result<Option<PathBuf>> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        cfg.analysis.threads = t;
    }
    if cli.deterministic {
        cfg.analysis.threads = 1;
    }
    if cli.command == Command::Config {
        print!("{}", pretty(&cfg)?);
        return Ok(None);
    }
    let mut run = Run {
        cfg,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let seed = match cli.command {
        Command::GenData => gen_data(&mut run)?,
        Command::Train => train_cmd(&mut run)?,
        Command::Decode => decode_cmd(&mut run)?,
        Command::Eval => eval_cmd(&mut run)?,
        Command::Sweep => sweep_cmd(&mut run)?,
        Command::Variance => variance_cmd(&mut run)?,
        Command::Divergence => divergence_cmd(&mut run)?,
        Command::Report => report_cmd(&mut run)?,
        Command::Config => unreachable!(),
    };
    run.finish(cli.command, seed).map(Some)
}

/// Exit status for an error: 2 for config problems, 3 for missing inputs.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingInput(_) => 3,
        _ => 1,
    }
}

/// One-line JSON error description for stderr.
pub fn error_json(e: &Error) -> String {
    let value = match e {
        Error::Config { path, msg } => serde_json::json!({ "error": "config", "key": path, "message": msg }),
        Error::MissingInput(p) => serde_json::json!({ "error": "missing_input", "path": p, "message": e.to_string() }),
        _ => serde_json::json!({ "error": "runtime", "message": e.to_string() }),
    };
    value.to_string()
}

/// Parses `args` (program name first), runs, and returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("ORDERLAB_LOG", "info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}
