//! The `longrep` command line. [`run`] parses arguments, dispatches, and
//! maps failures to exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::corpus::{generate_corpus, read_corpus, write_corpus, CorpusSplit, ImageGrid, SplitName, StudyRecord};
use crate::decoding::Strategy;
use crate::metrics::{
    evaluate_split, Conditioning, EvalOptions, MetricError, ModelGenerator, PromptMode, ReportGenerator, Subset,
};
use crate::model::{load_checkpoint, save_checkpoint, ModelState};
use crate::pipeline::{self, conditioning_name, prompt_name, Comparison, TrainedModel};
use crate::tokenizer::{SectionFlags, SplitReport, Vocabulary};
use crate::training::{PromptSource, RunManifest, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const VOCAB_FILE: &str = "vocab.json";
const BEST_FILE: &str = "best.ckpt";
const LAST_FILE: &str = "last.ckpt";
const RUN_MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "longrep", version, about = "Longitudinal multi-image report generation on a synthetic corpus")]
struct Cli {
    /// TOML config file; the shipped defaults when absent.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config override such as `scst.lr=1e-5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and print split statistics.
    Corpus(CorpusArgs),
    /// Train with teacher forcing or SCST.
    Train(TrainArgs),
    /// Write reports for a split or one study.
    Generate(GenerateArgs),
    /// Score a trained model on a split.
    Evaluate(EvaluateArgs),
    /// Train and score the three conditioning modes over several seeds.
    Compare(CompareArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Probability that a condition keeps its state between studies.
    #[arg(long, value_parser = unit_interval)]
    persistence: Option<f64>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Tf,
    Scst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CondArg {
    Single,
    Multi,
    Longitudinal,
}

impl From<CondArg> for Conditioning {
    fn from(c: CondArg) -> Self {
        match c {
            CondArg::Single => Conditioning::SingleImage,
            CondArg::Multi => Conditioning::MultiImage,
            CondArg::Longitudinal => Conditioning::Longitudinal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PromptArg {
    Radiologist,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PromptModeArg {
    Sentinel,
    Radiologist,
    Generated,
}

impl From<PromptModeArg> for PromptMode {
    fn from(p: PromptModeArg) -> Self {
        match p {
            PromptModeArg::Sentinel => PromptMode::Sentinel,
            PromptModeArg::Radiologist => PromptMode::Radiologist,
            PromptModeArg::Generated => PromptMode::Generated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    All,
    HasPrevious,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Greedy,
    Beam,
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Validation => SplitName::Validation,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus directory written by `corpus`.
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory for checkpoints, vocabulary and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "tf")]
    stage: StageArg,
    #[arg(long, value_enum, default_value = "multi")]
    conditioning: CondArg,
    /// Prompt source of a longitudinal model; SCST may use generated reports.
    #[arg(long, value_enum)]
    prompt: Option<PromptArg>,
    /// Starting checkpoint, or a run directory (its best checkpoint). SCST
    /// requires one; a longitudinal teacher-forcing run started from an
    /// image-only model keeps its encoder frozen.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Tokenizer file; defaults to the one beside `--init`, else a new one
    /// is trained on the corpus.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Use the final instead of the selected checkpoint.
    #[arg(long)]
    last: bool,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Prompt source at inference for longitudinal models.
    #[arg(long, value_enum)]
    prompt_mode: Option<PromptModeArg>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    beams: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// One study as `PATIENT:INDEX` (1-based); the whole split otherwise.
    #[arg(long)]
    study: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    subset: Option<SubsetArg>,
    /// Embedding service for the reward (POST /embed).
    #[arg(long)]
    reward_endpoint: Option<String>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for tables, checkpoints and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
}

/// Parses `args` (program name first), runs the command, reports errors on
/// stderr and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Corpus(a) => cmd_corpus(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Generate(a) => cmd_generate(&mut cfg, a),
        Command::Evaluate(a) => cmd_evaluate(&mut cfg, a),
        Command::Compare(a) => cmd_compare(&mut cfg, a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_corpus(dir: &Path) -> Result<CorpusSplit, CliError> {
    read_corpus(dir).map_err(|e| runtime(format!("cannot read corpus ({e}); run `longrep corpus --out {}` first", dir.display())))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("tokenizer {}: {e}", path.display())))?;
    Vocabulary::from_json(&text).map_err(|e| runtime(format!("tokenizer {}: {e}", path.display())))
}

fn cmd_corpus(cfg: &mut RunConfig, a: CorpusArgs) -> Result<(), CliError> {
    if let Some(p) = a.persistence {
        cfg.corpus.persistence = p;
    }
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    cfg.corpus.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = generate_corpus(&cfg.corpus).map_err(runtime)?;
    write_corpus(&corpus, &a.out).map_err(runtime)?;
    println!("split       patients  studies  with-prev  images  persistence  positive-rate");
    for name in SplitName::ALL {
        let s = corpus.stats(name);
        println!(
            "{:<11} {:>8} {:>8} {:>10} {:>7} {:>12.4} {:>14.4}",
            name.as_str(),
            s.patients,
            s.studies,
            s.with_previous,
            s.images,
            s.label_persistence,
            s.positive_rate
        );
    }
    println!("digest {}", corpus.digest());
    Ok(())
}

/// Effective config plus the training record, as written to `manifest.json`.
#[derive(Serialize, serde::Deserialize)]
struct RunFile {
    effective_config: RunConfig,
    run: RunManifest,
}

fn init_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(BEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn save_outcome(dir: &Path, cfg: &RunConfig, vocab: &Vocabulary, outcome: &TrainOutcome) -> Result<(), CliError> {
    create_dir(dir)?;
    write_file(&dir.join(VOCAB_FILE), &vocab.to_json())?;
    save_checkpoint(&outcome.best, &dir.join(BEST_FILE)).map_err(runtime)?;
    save_checkpoint(&outcome.last, &dir.join(LAST_FILE)).map_err(runtime)?;
    let file = RunFile { effective_config: cfg.clone(), run: outcome.manifest.clone() };
    write_file(&dir.join(RUN_MANIFEST), &serde_json::to_string_pretty(&file).expect("manifest serializes"))?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    if !outcome.plans.is_empty() {
        write_file(&dir.join("plan.json"), &serde_json::to_string_pretty(&outcome.plans).expect("plans serialize"))?;
    }
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let conditioning: Conditioning = a.conditioning.into();
    let longitudinal = conditioning == Conditioning::Longitudinal;
    let prompt_source = match (longitudinal, a.prompt) {
        (false, None) => PromptSource::None,
        (false, Some(_)) => return Err(CliError::Usage("--prompt applies to longitudinal conditioning only".into())),
        (true, None | Some(PromptArg::Radiologist)) => PromptSource::RadiologistPrev,
        (true, Some(PromptArg::Generated)) => PromptSource::GeneratedPrev,
    };
    if a.stage == StageArg::Tf && prompt_source == PromptSource::GeneratedPrev {
        return Err(CliError::Usage("teacher forcing prompts with radiologist reports; use --stage scst for generated prompts".into()));
    }
    let corpus = load_corpus(&a.corpus)?;
    let init = match &a.init {
        Some(p) => {
            let path = init_path(p);
            Some(load_checkpoint(&path).map_err(|e| runtime(format!("checkpoint {}: {e}", path.display())))?)
        }
        None if a.stage == StageArg::Scst => {
            return Err(runtime("scst needs a teacher-forcing checkpoint: pass --init <tf run dir or checkpoint>"))
        }
        None => None,
    };
    let vocab_path = a.vocab.clone().or_else(|| {
        let p = a.init.as_ref().map(|i| if i.is_dir() { i.join(VOCAB_FILE) } else { i.with_file_name(VOCAB_FILE) })?;
        p.exists().then_some(p)
    });
    let vocab = match vocab_path {
        Some(p) => load_vocab(&p)?,
        None if init.is_some() => return Err(runtime("no tokenizer beside --init; pass --vocab")),
        None => pipeline::train_vocabulary(&corpus, cfg.tokenizer.budget).map_err(runtime)?,
    };
    let outcome = match a.stage {
        StageArg::Tf => pipeline::teacher_forcing(&corpus, &vocab, cfg, conditioning, init).map_err(runtime)?,
        StageArg::Scst => {
            let state = init.expect("checked above");
            pipeline::scst(&corpus, &vocab, cfg, state, conditioning, prompt_source).map_err(runtime)?
        }
    };
    save_outcome(&a.out, cfg, &vocab, &outcome)?;
    let sel = outcome.manifest.selected_checkpoint().unwrap_or("-");
    let f1 = outcome.manifest.validations().iter().map(|v| v.f1).fold(f64::NEG_INFINITY, f64::max);
    println!("trained {} steps; selected {sel} (validation F1 {f1:.4}); wrote {}", outcome.manifest.steps().len(), a.out.display());
    Ok(())
}

struct LoadedRun {
    state: ModelState,
    vocab: Vocabulary,
    conditioning: Conditioning,
}

fn load_run(m: &ModelArgs) -> Result<LoadedRun, CliError> {
    let manifest_path = m.run.join(RUN_MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| runtime(format!("{}: {e}; train a model into this directory first", manifest_path.display())))?;
    let file: RunFile = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", manifest_path.display())))?;
    let ckpt = m.run.join(if m.last { LAST_FILE } else { BEST_FILE });
    let state = load_checkpoint(&ckpt).map_err(|e| runtime(format!("checkpoint {}: {e}", ckpt.display())))?;
    let vocab = load_vocab(&m.run.join(VOCAB_FILE))?;
    Ok(LoadedRun { state, vocab, conditioning: file.run.config.conditioning })
}

fn apply_decode_flags(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(s) = m.strategy {
        cfg.decode.strategy = match s {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Beam => Strategy::Beam,
            StrategyArg::TopK => Strategy::TopK,
        };
    }
    if let Some(b) = m.beams {
        cfg.decode.beams = b;
    }
}

fn eval_options(cfg: &RunConfig, m: &ModelArgs, conditioning: Conditioning, subset: Subset) -> EvalOptions {
    let mut o = EvalOptions::new(conditioning);
    if let Some(p) = m.prompt_mode.map(PromptMode::from).or(cfg.evaluate.prompt_mode) {
        o.prompt_mode = p;
    }
    o.subset = subset;
    o
}

#[derive(Debug, Serialize)]
struct GeneratedRow {
    patient_id: String,
    study_index: usize,
    /// Image position in single-image mode.
    image: Option<usize>,
    findings: String,
    impression: String,
    missing_sep: bool,
    flags: SectionFlags,
}

/// Passes generation through and keeps every report.
struct Recorder<'a> {
    inner: ModelGenerator<'a>,
    single_image: bool,
    rows: Vec<GeneratedRow>,
}

impl ReportGenerator for Recorder<'_> {
    fn generate(&mut self, study: &StudyRecord, images: &[ImageGrid], prompt: Option<(&str, &str)>) -> Result<SplitReport, MetricError> {
        let r = self.inner.generate(study, images, prompt)?;
        let image = self.single_image.then(|| {
            self.rows.iter().filter(|x| x.patient_id == study.patient_id && x.study_index == study.study_index).count()
        });
        self.rows.push(GeneratedRow {
            patient_id: study.patient_id.clone(),
            study_index: study.study_index,
            image,
            findings: r.findings.clone(),
            impression: r.impression.clone(),
            missing_sep: r.flags.missing_sep,
            flags: r.flags,
        });
        Ok(r)
    }
}

fn parse_study(s: &str) -> Result<(String, usize), CliError> {
    let bad = || CliError::Usage(format!("--study `{s}`: expected PATIENT:INDEX with a 1-based index"));
    let (p, i) = s.rsplit_once(':').ok_or_else(bad)?;
    let i: usize = i.parse().map_err(|_| bad())?;
    if p.is_empty() || i == 0 {
        return Err(bad());
    }
    Ok((p.to_string(), i))
}

fn cmd_generate(cfg: &mut RunConfig, a: GenerateArgs) -> Result<(), CliError> {
    let target = a.study.as_deref().map(parse_study).transpose()?;
    apply_decode_flags(cfg, &a.model);
    let run = load_run(&a.model)?;
    cfg.decode.validate(run.vocab.size()).map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = load_corpus(&a.model.corpus)?;
    let options = eval_options(cfg, &a.model, run.conditioning, Subset::All);
    let patients = match &target {
        None => corpus.split(a.model.split.into()).to_vec(),
        Some((pid, idx)) => {
            let patient = SplitName::ALL
                .into_iter()
                .flat_map(|n| corpus.split(n))
                .find(|p| &p.patient_id == pid && *idx <= p.studies.len())
                .ok_or_else(|| runtime(format!("unknown study {pid}:{idx}")))?;
            let mut p = patient.clone();
            p.studies.truncate(*idx);
            vec![p]
        }
    };
    let max_prompt = run.state.config.max_positions.saturating_sub(cfg.decode.max_new_tokens).min(crate::tokenizer::DEFAULT_MAX_PROMPT);
    let mut rec = Recorder {
        inner: ModelGenerator::new(&run.state, &run.vocab, cfg.decode.clone(), max_prompt),
        single_image: run.conditioning == Conditioning::SingleImage,
        rows: Vec::new(),
    };
    let encoder = crate::metrics::TfCosineEncoder::default();
    evaluate_split(&mut rec, &patients, options, &encoder).map_err(runtime)?;
    let rows: Vec<GeneratedRow> = match &target {
        None => rec.rows,
        Some((pid, idx)) => rec.rows.into_iter().filter(|r| &r.patient_id == pid && r.study_index == *idx).collect(),
    };
    emit(a.model.out.as_deref(), &serde_json::to_string_pretty(&rows).expect("rows serialize"))
}

fn cmd_evaluate(cfg: &mut RunConfig, a: EvaluateArgs) -> Result<(), CliError> {
    apply_decode_flags(cfg, &a.model);
    if a.reward_endpoint.is_some() {
        cfg.evaluate.reward_endpoint = a.reward_endpoint.clone();
    }
    let subset = match a.subset {
        Some(SubsetArg::All) => Subset::All,
        Some(SubsetArg::HasPrevious) => Subset::HasPrevious,
        None => cfg.evaluate.subset,
    };
    let run = load_run(&a.model)?;
    cfg.decode.validate(run.vocab.size()).map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = load_corpus(&a.model.corpus)?;
    let options = eval_options(cfg, &a.model, run.conditioning, subset);
    let encoder = pipeline::reward_encoder(cfg);
    let report = pipeline::evaluate(&run.state, &run.vocab, corpus.split(a.model.split.into()), options, &cfg.decode, encoder.as_ref())
        .map_err(runtime)?;
    let g = &report.aggregate;
    eprintln!(
        "{} studies: F1 {:.4}  P {:.4}  R {:.4}  BLEU-4 {:.4}  ROUGE-L {:.4}  CIDEr {:.4}  reward {:.4}  missing-sep {:.4}",
        g.studies, g.f1, g.precision, g.recall, g.bleu4, g.rouge_l, g.cider, g.reward, g.missing_sep_rate
    );
    emit(a.model.out.as_deref(), &serde_json::to_string_pretty(&report).expect("report serializes"))
}

fn print_comparison(c: &Comparison) {
    println!("{:<13} {:>16} {:>16} {:>16} {:>16}", "conditioning", "F1", "BLEU-4", "reward", "missing-sep");
    for r in &c.modes {
        let s = &r.summary;
        println!("{:<13} {:>16} {:>16} {:>16} {:>16}", conditioning_name(r.conditioning), s.f1.to_string(), s.bleu4.to_string(), s.reward.to_string(), s.missing_sep_rate.to_string());
    }
    println!("\nlongitudinal model on studies with a previous study");
    println!("{:<13} {:>16} {:>16} {:>16}", "prompt", "F1", "BLEU-4", "reward");
    for r in &c.prompts {
        let s = &r.summary;
        println!("{:<13} {:>16} {:>16} {:>16}", prompt_name(r.prompt), s.f1.to_string(), s.bleu4.to_string(), s.reward.to_string());
    }
}

fn cmd_compare(cfg: &mut RunConfig, a: CompareArgs) -> Result<(), CliError> {
    if let Some(n) = a.seeds {
        cfg.compare.seeds = n;
    }
    if cfg.compare.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let corpus = load_corpus(&a.corpus)?;
    create_dir(&a.out)?;
    let vocab = pipeline::train_vocabulary(&corpus, cfg.tokenizer.budget).map_err(runtime)?;
    let seeds: Vec<u64> = (0..cfg.compare.seeds as u64).map(|i| cfg.compare.first_seed + i).collect();
    let base = cfg.clone();
    let table = pipeline::compare(&corpus, &vocab, &base, &seeds, |m: &TrainedModel| {
        let dir = a.out.join(format!("{}-s{}", conditioning_name(m.conditioning), m.seed));
        let cfg = RunConfig { seed: m.seed, ..base.clone() };
        save_outcome(&dir, &cfg, &vocab, &m.outcome).map_err(|e| pipeline::PipelineError::Contract(e.to_string()))
    })
    .map_err(runtime)?;
    write_file(&a.out.join("comparison.json"), &serde_json::to_string_pretty(&table).expect("table serializes"))?;
    write_file(&a.out.join("conditioning.csv"), &table.modes_csv())?;
    write_file(&a.out.join("prompts.csv"), &table.prompts_csv())?;
    print_comparison(&table);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run(["longrep", "--help"]), EXIT_OK);
        assert_eq!(run(["longrep", "--version"]), EXIT_OK);
        assert_eq!(run(["longrep"]), EXIT_USAGE);
        assert_eq!(run(["longrep", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["longrep", "corpus", "--out", "x", "--persistence", "1.5"]), EXIT_USAGE);
        assert_eq!(run(["longrep", "corpus", "--out", "x", "--set", "nope"]), EXIT_USAGE);
        assert_eq!(run(["longrep", "train", "--corpus", "c", "--out", "o", "--conditioning", "multi", "--prompt", "generated"]), EXIT_USAGE);
    }

    #[test]
    fn study_ids_parse() {
        assert_eq!(parse_study("tr-0001:2").unwrap(), ("tr-0001".to_string(), 2));
        assert_eq!(parse_study("a:b:3").unwrap(), ("a:b".to_string(), 3));
        for bad in ["x", "x:0", ":1", "x:-1"] {
            assert!(matches!(parse_study(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }
}
