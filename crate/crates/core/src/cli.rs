//! Operator surface: data generation, training, evaluation, generation,
//! control studies, and gradient checks behind one subcommand-style binary.
//!
//! Every command resolves its configuration (file first, flags win) and
//! writes the resolved document next to its outputs, so any run can be
//! reproduced from that file alone. Randomized commands print their seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusError, CorpusManifest, Lexicon, SamplerConfig, Vocabulary};
use crate::decoder::{self, ControlVector, DecodeConfig, DecoderError, Generator, Polarity, Preset};
use crate::evaluation::{self, ControlSetting, EvalError, EvalReport};
use crate::model::{checkpoint, Model, ModelConfig, ModelError, Variant};
use crate::numerics::rng::derive_seed;
use crate::semantics::FEATURE_NAMES;
use crate::training::{self, EpochStats, TrainConfig, TrainingError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] CorpusError),
    #[error("data io: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("grammar: {0}")]
    Grammar(#[from] DecoderError),
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Decoder(d) => CliError::Grammar(d),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Distinct exit codes per error class; 0 is success.
pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Config(_) => 2,
        CliError::Data(_) | CliError::Io(_) => 3,
        CliError::Numeric(_) => 4,
        CliError::Grammar(_) => 5,
    }
}

/// Unified run configuration; a config file provides any subset, flags win.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            n_train: 8000,
            n_val: 1200,
            sampler: SamplerConfig::default(),
            model: ModelConfig::paper_default(Variant::Fusion),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{p:?}: {e}")))
            }
        }
    }

    fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "semfuse",
    about = "Train, evaluate, and steer a small Transformer LM with a fuzzy-semantic feature channel."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus (train.jsonl, val.jsonl, manifest.json).
    GenData(GenDataArgs),
    /// Train the baseline and/or fusion model on a generated corpus.
    Train(TrainArgs),
    /// Teacher-forced metrics for a checkpoint (JSON report + CE log).
    Eval(EvalArgs),
    /// Sample sentences from a checkpoint under a preset or a control file.
    Generate(GenerateArgs),
    /// Controlled-generation studies: accuracy, confusion, OOD hit rates.
    ControlEval(ControlEvalArgs),
    /// Compare reverse-mode gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Optional JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/data")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Also dump the semantic matrices of the first N training records as CSV.
    #[arg(long, default_value_t = 0)]
    pub dump_semantics: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.jsonl / val.jsonl.
    #[arg(long, default_value = "runs/data")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// baseline | fusion | both
    #[arg(long, default_value = "both")]
    pub variant: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "runs/data")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
    /// Comma-separated focus tokens ("comma" is an alias for ",").
    #[arg(long)]
    pub focus: Option<String>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// neutral | pos-strong | neg-question | baseline-fair | pos-soft | neg-soft
    #[arg(long, default_value = "neutral")]
    pub preset: String,
    /// JSON control file overriding the preset.
    #[arg(long)]
    pub control_file: Option<PathBuf>,
    /// Grammar-valid prefix to continue, e.g. "Carol starts the model ,".
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ControlEvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "runs/control")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of pos-hard,neg-question-hard,pos-soft,neg-soft.
    #[arg(long)]
    pub settings: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 64)]
    pub precision: u32,
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Generate(args) => cmd_generate(args),
        Command::ControlEval(args) => cmd_control_eval(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_val {
        cfg.n_val = n;
    }
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(CliError::Config("corpus sizes must be positive".into()));
    }
    let lex = Lexicon::standard();
    let vocab = Vocabulary::build(&lex)?;
    let (train, val) = corpus::generate_corpus(&lex, &cfg.sampler, cfg.seed, cfg.n_train, cfg.n_val);

    std::fs::create_dir_all(&args.out)?;
    corpus::write_jsonl(&args.out.join("train.jsonl"), &train.records)?;
    corpus::write_jsonl(&args.out.join("val.jsonl"), &val.records)?;
    let manifest = CorpusManifest {
        seed: cfg.seed,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        heldout_pos: lex.heldout_pos.clone(),
        heldout_neg: lex.heldout_neg.clone(),
        vocab_size: vocab.len(),
        sampler: cfg.sampler,
    };
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    cfg.write_resolved(&args.out)?;

    for i in 0..args.dump_semantics.min(train.records.len()) {
        let record = &train.records[i];
        let enc = corpus::encode(record, &vocab)?;
        let sem = crate::semantics::annotate(record, &enc, &lex, &vocab)
            .map_err(|e| CliError::Data(CorpusError::BadLexicon(e.to_string())))?;
        let mut text = FEATURE_NAMES.join(",");
        text.push('\n');
        for row in sem.degrees.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(args.out.join(format!("semantics_{i}.csv")), text)?;
    }

    println!(
        "gen-data: seed {} -> {} train / {} val records in {}",
        cfg.seed,
        train.records.len(),
        val.records.len(),
        args.out.display()
    );
    Ok(())
}

fn load_corpus(dir: &Path, cfg: &RunConfig) -> Result<training::PreparedCorpus, CliError> {
    let train_path = dir.join("train.jsonl");
    let val_path = dir.join("val.jsonl");
    if !train_path.exists() || !val_path.exists() {
        return Err(CliError::Data(CorpusError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("corpus files missing under {}", dir.display()),
        ))));
    }
    let lex = Lexicon::standard();
    let train = corpus::CorpusSplit {
        name: "train".into(),
        seed: cfg.seed,
        records: corpus::read_jsonl(&train_path)?,
    };
    let val = corpus::CorpusSplit {
        name: "val".into(),
        seed: cfg.seed,
        records: corpus::read_jsonl(&val_path)?,
    };
    Ok(training::prepare(&lex, &train, &val)?)
}

fn parse_variants(spec: &str) -> Result<Vec<Variant>, CliError> {
    match spec {
        "baseline" => Ok(vec![Variant::Baseline]),
        "fusion" => Ok(vec![Variant::Fusion]),
        "both" => Ok(vec![Variant::Baseline, Variant::Fusion]),
        other => Err(CliError::Config(format!(
            "unknown variant {other:?} (expected baseline|fusion|both)"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(batch) = args.batch {
        cfg.train.batch = batch;
    }
    let variants = parse_variants(&args.variant)?;
    let data = load_corpus(&args.data, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    cfg.write_resolved(&args.out)?;
    println!("train: seed {} on {} train / {} val sentences", cfg.train.seed, data.train.len(), data.val.len());

    let mut curve_rows: Vec<(String, EpochStats)> = Vec::new();
    for variant in variants {
        let model_cfg = ModelConfig { variant, ..cfg.model };
        let init_seed = derive_seed(cfg.train.seed, &format!("model-{variant}"));
        let mut model = Model::<f32>::init(model_cfg, init_seed)?;
        let ckpt_path = args.out.join(format!("{variant}.sflm"));
        let vocab_tokens = data.vocab.tokens().to_vec();
        let train_seed = cfg.train.seed;
        println!("[{variant}] {} parameters", model.parameter_count());
        let stats = training::train(&mut model, &data, &cfg.train, |m, s| {
            println!(
                "[{variant}] epoch {}: train_loss {:.4} val_ppl {:.3} seen_only {:.3}{}",
                s.epoch,
                s.train_loss,
                s.val_ppl,
                s.val_ppl_seen_only,
                s.sem_mse.map(|m| format!(" sem_mse {m:.5}")).unwrap_or_default()
            );
            checkpoint::save(
                &ckpt_path,
                m,
                &vocab_tokens,
                train_seed,
                s.epoch as u32,
                serde_json::json!({
                    "train_loss": s.train_loss,
                    "val_ppl": s.val_ppl,
                    "val_ppl_seen_only": s.val_ppl_seen_only,
                    "sem_mse": s.sem_mse,
                }),
            )
            .map_err(TrainingError::Model)?;
            Ok(())
        })?;
        for s in &stats {
            curve_rows.push((variant.to_string(), s.clone()));
        }
        println!("[{variant}] checkpoint written to {}", ckpt_path.display());
    }
    training::write_curve_csv(&args.out.join("curve.csv"), &curve_rows)?;
    Ok(())
}

fn parse_focus(raw: Option<&str>) -> Vec<String> {
    match raw {
        None => evaluation::default_focus_tokens(),
        Some(list) => list
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| if s == "comma" { ",".to_string() } else { s.to_string() })
            .collect(),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (model, header) = checkpoint::load(&args.checkpoint)?;
    let cfg = RunConfig { seed: header.seed, model: model.config, ..RunConfig::default() };
    let data = load_corpus(&args.data, &cfg)?;
    std::fs::create_dir_all(&args.out)?;

    let stats = evaluation::teacher_forced_stats(&model, &data.val, &data.heldout)?;
    let focus_tokens = parse_focus(args.focus.as_deref());
    let focus = evaluation::focus_ce_from_log(&stats.ce_log, &focus_tokens, &data.vocab);
    let sem_mse = match model.config.variant {
        Variant::Fusion => stats.sem_mse(),
        Variant::Baseline => {
            eprintln!("eval: sem_mse unsupported for the baseline variant; skipping that metric");
            None
        }
    };
    let report = EvalReport {
        variant: model.config.variant.to_string(),
        ppl: stats.ppl(),
        ppl_seen_only: stats.ppl_seen_only(),
        sem_mse,
        focus_ce: focus,
        control: Vec::new(),
    };
    evaluation::write_ce_log(&args.out.join("ce_log.bin"), &stats.ce_log)?;
    std::fs::write(
        args.out.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    cfg.write_resolved(&args.out)?;

    println!("eval [{}]: ppl {:.4} seen-only {:.4}", report.variant, report.ppl, report.ppl_seen_only);
    if let Some(m) = report.sem_mse {
        println!("sem_mse {m:.5}");
    }
    println!("focus CE (nats, per occurrence):");
    for f in &report.focus_ce {
        match f.mean_ce {
            Some(ce) => println!("  {:>10}  {:>7} occurrences  {:.5}", f.token, f.count, ce),
            None => println!("  {:>10}  absent from the split", f.token),
        }
    }
    Ok(())
}

/// JSON control file: named scalar controls plus sampling overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlFile {
    #[serde(default)]
    controls: std::collections::BTreeMap<String, f64>,
    hard_polarity: Option<String>,
    hard_punct: Option<String>,
    #[serde(rename = "T")]
    temperature: Option<f64>,
    rho: Option<f64>,
    alpha: Option<f64>,
    top_k: Option<usize>,
    rep_factor: Option<f64>,
    beta: Option<f64>,
    seed: Option<u64>,
    prefix: Option<String>,
}

fn apply_control_file(
    file: &ControlFile,
    controls: &mut ControlVector,
    decode: &mut DecodeConfig,
) -> Result<(), CliError> {
    for (name, value) in &file.controls {
        let v = *value;
        match name.as_str() {
            "pos_low" => controls.pos[0] = v,
            "pos_med" => controls.pos[1] = v,
            "pos_high" => controls.pos[2] = v,
            "neg_low" => controls.neg[0] = v,
            "neg_med" => controls.neg[1] = v,
            "neg_high" => controls.neg[2] = v,
            "str_low" => controls.strength[0] = v,
            "str_med" => controls.strength[1] = v,
            "str_high" => controls.strength[2] = v,
            "is_question" => controls.is_question = v,
            "is_exclaim" => controls.is_exclaim = v,
            other => return Err(CliError::Config(format!("unknown control {other:?}"))),
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Config(format!("control {name} = {v} outside [0, 1]")));
        }
    }
    match file.hard_polarity.as_deref() {
        None | Some("none") => {}
        Some("pos") => controls.hard_polarity = Some(Polarity::Pos),
        Some("neg") => controls.hard_polarity = Some(Polarity::Neg),
        Some(other) => return Err(CliError::Config(format!("hard_polarity {other:?}"))),
    }
    match file.hard_punct.as_deref() {
        None | Some("none") => {}
        Some(mark @ ("." | "!" | "?")) => controls.hard_punct = Some(mark.to_string()),
        Some(other) => return Err(CliError::Config(format!("hard_punct {other:?}"))),
    }
    if let Some(t) = file.temperature {
        decode.temperature = t;
    }
    if let Some(r) = file.rho {
        decode.nucleus_rho = r;
    }
    if let Some(a) = file.alpha {
        decode.alpha = a;
    }
    if let Some(k) = file.top_k {
        decode.top_k = k;
    }
    if let Some(f) = file.rep_factor {
        decode.rep_factor = f;
    }
    if let Some(b) = file.beta {
        decode.beta = b;
    }
    if let Some(s) = file.seed {
        decode.seed = s;
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let (model, _header) = checkpoint::load(&args.checkpoint)?;
    let lex = Lexicon::standard();
    let vocab = Vocabulary::build(&lex)?;
    let preset: Preset = args.preset.parse().map_err(CliError::Config)?;
    let mut controls = preset.controls();
    let mut decode = preset.decode_config(args.seed.unwrap_or(42));
    let mut prefix_text = args.prefix.clone();
    if let Some(path) = &args.control_file {
        let text = std::fs::read_to_string(path)?;
        let file: ControlFile =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{path:?}: {e}")))?;
        if prefix_text.is_none() {
            prefix_text = file.prefix.clone();
        }
        apply_control_file(&file, &mut controls, &mut decode)?;
    }
    if let Some(seed) = args.seed {
        decode.seed = seed;
    }

    let prefix = match &prefix_text {
        Some(text) => {
            let ids = decoder::tokenize_prefix(text, &vocab)?;
            let state = decoder::validate_prefix(&ids, &vocab)?;
            eprintln!("prefix accepted; decoding resumes at {state:?}");
            ids
        }
        None => Vec::new(),
    };
    let generator = Generator::new(&model, &vocab, &lex, controls, decode);
    println!("generate: preset {} seed {}", args.preset, decode.seed);
    for i in 0..args.n {
        let mut rng = crate::numerics::rng::chacha(derive_seed(decode.seed, &format!("generate-{i}")));
        let tokens = generator.generate(&prefix, &mut rng)?;
        println!("{}", decoder::format_surface(&tokens, &vocab));
    }
    Ok(())
}

fn cmd_control_eval(args: ControlEvalArgs) -> Result<(), CliError> {
    let (model, header) = checkpoint::load(&args.checkpoint)?;
    let lex = Lexicon::standard();
    let vocab = Vocabulary::build(&lex)?;
    let seed = args.seed.unwrap_or(header.seed);
    let settings: Vec<ControlSetting> = match args.settings.as_deref() {
        None => ControlSetting::all().to_vec(),
        Some(list) => list
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(CliError::Config))
            .collect::<Result<_, _>>()?,
    };
    std::fs::create_dir_all(&args.out)?;
    println!("control-eval: seed {seed}, {} runs per setting", args.n);

    let mut outcomes = Vec::new();
    for setting in settings {
        let out = evaluation::control_eval(&model, &vocab, &lex, setting, args.n, seed)?;
        println!(
            "{:>18}: adj acc {:.3} ({}/{})  punct acc {:.3}  ood hit {:.3}",
            out.setting,
            out.adj_accuracy,
            (out.adj_accuracy * out.n as f64).round() as usize,
            out.n,
            out.punct_accuracy,
            out.ood_hit
        );
        outcomes.push(out);
    }
    let hard_rows: Vec<(&str, [usize; 3], usize)> = outcomes
        .iter()
        .filter(|o| o.setting.ends_with("hard"))
        .map(|o| {
            let name = match o.intended {
                Polarity::Pos => "POS",
                Polarity::Neg => "NEG",
            };
            (name, o.confusion, o.n)
        })
        .collect();
    if !hard_rows.is_empty() {
        println!("{}", evaluation::format_confusion(&hard_rows));
    }
    std::fs::write(
        args.out.join("control_report.json"),
        serde_json::to_string_pretty(&outcomes)?,
    )?;
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<(), CliError> {
    match args.precision {
        64 => {}
        32 => eprintln!(
            "grad-check: 32-bit mode is advisory only; central differences are unreliable at f32"
        ),
        other => return Err(CliError::Config(format!("precision must be 32 or 64, got {other}"))),
    }
    let report = training::fusion_grad_check(args.seed, 4, args.coords, args.step)?;
    println!(
        "grad-check: {} coordinates, max relative error {:.3e}",
        report.coords_checked, report.max_rel_err
    );
    if let Some((name, idx, analytic, numeric)) = &report.worst {
        println!("worst: {name}[{idx}] analytic {analytic:.6e} vs numeric {numeric:.6e}");
    }
    if report.max_rel_err >= args.threshold {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {:.3e} >= threshold {:.3e}",
            report.max_rel_err, args.threshold
        )));
    }
    println!("grad-check: pass (threshold {:.1e})", args.threshold);
    Ok(())
}
