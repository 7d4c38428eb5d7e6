//! Command-line front end.
//!
//! Each subcommand wraps one library operation (or, for `pipeline`, the
//! whole sequence): corpus synthesis, training, adapter fitting, tracing,
//! differential analysis, circuit identification, summary scoring, and
//! report rendering. All paths are explicit flags — no working-directory
//! state — and every artifact directory receives a `manifest.json`
//! recording the command, configuration, seeds, and wall time.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data/format error,
//! 4 training divergence, 5 comparison/fingerprint mismatch. The
//! `CIRCUIT_LAB_THREADS` environment variable caps the worker pool
//! (0 or unset = one worker per core).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use circuit_lab::circuit::{
    identify_circuit, load_circuit, save_circuit, to_lora_targets, CircuitOptions, ScoreMode,
    DEFAULT_HEAD_QUANTILE, DEFAULT_TOP_K,
};
use circuit_lab::corpus::{
    encode_article_lm, encode_example, generate_synthetic, load_jsonl, save_jsonl, split, Example,
    EncodedExample, SyntheticSpec, Tokenizer,
};
use circuit_lab::error::{Error, Result};
use circuit_lab::lora::{self, load_adapters, train_lora, LoraConfig, Projection};
use circuit_lab::metrics::{
    diff_report, write_report_dir, ActivationSource, DiffOptions, DiffReport, DEFAULT_TOP_NEURONS,
};
use circuit_lab::model::{
    checkpoint::{load_checkpoint, save_checkpoint},
    CausalLm, GptModel, ModelConfig, DEFAULT_MAX_NEW,
};
use circuit_lab::pca::{coords_to_csv, pca3_project};
use circuit_lab::pipeline::{
    final_layer_latents, run_pipeline, write_scores, PipelineConfig, PCA_ITERATIONS,
};
use circuit_lab::report::{cmd_report, render_heatmap, HeatmapFormat, RunManifest};
use circuit_lab::rng::Rng;
use circuit_lab::rouge::evaluate_models;
use circuit_lab::trace::{
    load_traces, save_traces, trace_corpus, TraceConfig, TracePositions, TraceSet,
};
use circuit_lab::train::{train, write_history_csv, TrainConfig, TrainReport};

#[derive(Parser)]
#[command(
    name = "circuit-lab",
    version,
    about = "Locate summarization circuits in small GPT-style models",
    long_about = None,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an article/summary corpus, split it, and fit the tokenizer
    GenCorpus(GenCorpusArgs),
    /// Train a model from scratch on a corpus
    Train(TrainCmdArgs),
    /// Continue training a checkpoint on the summarization objective
    Finetune(FinetuneArgs),
    /// Fit low-rank adapters on a frozen checkpoint
    Lora(LoraArgs),
    /// Record attention and activation traces over a corpus slice
    Trace(TraceArgs),
    /// Compare two trace sets and write the differential metric tables
    Analyze(AnalyzeArgs),
    /// Identify the circuit implied by a pre/post trace comparison
    Circuit(CircuitArgs),
    /// Score model summaries against references (ROUGE-1/2/L)
    Eval(EvalArgs),
    /// Render an analysis directory as markdown (and optional heatmaps)
    Report(ReportArgs),
    /// Run the whole experiment end to end into one output directory
    Pipeline(PipelineArgs),
}

/// Which encoding a training or tracing corpus uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Objective {
    /// Next-token prediction over bare articles.
    Lm,
    /// Full `[article] TL;DR: [summary]` encoding, loss on the summary.
    Summarize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    /// MLP hidden activations (post-nonlinearity).
    MlpHidden,
    /// Post-block residual stream.
    Residual,
}

impl From<SourceArg> for ActivationSource {
    fn from(s: SourceArg) -> ActivationSource {
        match s {
            SourceArg::MlpHidden => ActivationSource::MlpHidden,
            SourceArg::Residual => ActivationSource::Residual,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    /// Binary grayscale image (P5).
    Pgm,
    /// Validated CSV passthrough.
    Csv,
}

impl From<FormatArg> for HeatmapFormat {
    fn from(f: FormatArg) -> HeatmapFormat {
        match f {
            FormatArg::Pgm => HeatmapFormat::Pgm,
            FormatArg::Csv => HeatmapFormat::Csv,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_workers().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Apply `CIRCUIT_LAB_THREADS` before any parallel work; 0 or unset leaves
/// the pool at one worker per core.
fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var("CIRCUIT_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Error::Config(format!(
            "CIRCUIT_LAB_THREADS must be a non-negative integer, got {raw:?}"
        ))
    })?;
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("could not size the worker pool: {e}")))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Lora(args) => cmd_lora(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Circuit(args) => cmd_circuit(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report_md(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_json<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Snapshot a config for the manifest. Serialization of these plain structs
/// cannot fail; `Null` is the defensive fallback.
fn config_value<C: serde::Serialize>(config: &C) -> serde_json::Value {
    serde_json::to_value(config).unwrap_or(serde_json::Value::Null)
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Manifest skeleton for a single-operation command.
fn new_manifest(command: &str, config: serde_json::Value) -> RunManifest {
    let mut manifest = RunManifest::new(command);
    manifest.config = config;
    manifest
}

/// Record outputs and wall time, then write `manifest.json` into `dir`.
fn finish_manifest(
    mut manifest: RunManifest,
    dir: &Path,
    started: Instant,
    outputs: &[&str],
) -> Result<()> {
    manifest.outputs = outputs.iter().map(|s| s.to_string()).collect();
    let stage = manifest.command.clone();
    manifest.completed_stages.push(stage);
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.save(dir)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Train/val/test splits plus the fitted tokenizer, as written by
/// `gen-corpus`.
struct CorpusDir {
    train: Vec<Example>,
    val: Vec<Example>,
    tokenizer: Tokenizer,
}

fn load_corpus_dir(dir: &Path) -> Result<CorpusDir> {
    Ok(CorpusDir {
        train: load_jsonl(&dir.join("train.jsonl"))?,
        val: load_jsonl(&dir.join("val.jsonl"))?,
        tokenizer: Tokenizer::load(&dir.join("tokenizer.json"))?,
    })
}

fn encode_set(
    tokenizer: &Tokenizer,
    examples: &[Example],
    max_len: usize,
    objective: Objective,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|ex| match objective {
            Objective::Lm => encode_article_lm(tokenizer, ex, max_len),
            Objective::Summarize => encode_example(tokenizer, ex, max_len),
        })
        .collect()
}

fn summarize_training(report: &TrainReport) -> String {
    let stopped = if report.stopped_early {
        " (stopped early)"
    } else {
        ""
    };
    format!(
        "{} epochs{}, best val loss {:.6} at epoch {}",
        report.history.len(),
        stopped,
        report.best_val_loss,
        report.best_epoch
    )
}

fn parse_splits(raw: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected three comma-separated fractions, got {raw:?}"
        ));
    }
    let mut out = [0.0f64; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad fraction {part:?}: {e}"))?;
    }
    Ok(out)
}

fn parse_projection(raw: &str) -> std::result::Result<Projection, String> {
    raw.parse().map_err(|e: Error| e.to_string())
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenCorpusArgs {
    /// Number of article/summary pairs to synthesize
    #[arg(long, default_value_t = 512)]
    examples: usize,
    /// Sentences per article
    #[arg(long, default_value_t = 8)]
    sentences: usize,
    /// Salient (summary-worthy) sentences per article
    #[arg(long, default_value_t = 2)]
    salient: usize,
    /// Content vocabulary size (topics, values, filler words)
    #[arg(long, default_value_t = 400)]
    vocab_words: usize,
    /// Filler-sentence pattern family (0 or 1)
    #[arg(long, default_value_t = 0)]
    family: u32,
    /// Cap the fitted tokenizer vocabulary (unlimited when omitted)
    #[arg(long)]
    vocab_limit: Option<usize>,
    /// Train/validation/test fractions, comma separated
    #[arg(long, value_parser = parse_splits, default_value = "0.8,0.1,0.1")]
    splits: [f64; 3],
    /// Generation seed; the split seed is derived from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the JSONL splits and tokenizer.json
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let started = Instant::now();
    let spec = SyntheticSpec {
        n_examples: args.examples,
        sentences_per_article: args.sentences,
        salient_per_article: args.salient,
        vocab_word_count: args.vocab_words,
        template_family: args.family,
        seed: args.seed,
    };
    let examples = generate_synthetic(&spec, &mut Rng::new(spec.seed))?;
    let tokenizer = Tokenizer::build(&examples, args.vocab_limit)?;
    let split_seed = Rng::derive(args.seed, "split").next_u64();
    let (train_x, val_x, test_x) = split(&examples, args.splits, &mut Rng::new(split_seed))?;

    ensure_dir(&args.out)?;
    save_jsonl(&args.out.join("train.jsonl"), &train_x)?;
    save_jsonl(&args.out.join("val.jsonl"), &val_x)?;
    save_jsonl(&args.out.join("test.jsonl"), &test_x)?;
    tokenizer.save(&args.out.join("tokenizer.json"))?;

    let mut manifest = new_manifest("gen-corpus", config_value(&spec));
    manifest.seeds.insert("corpus".into(), args.seed);
    manifest.seeds.insert("split".into(), split_seed);
    finish_manifest(
        manifest,
        &args.out,
        started,
        &["train.jsonl", "val.jsonl", "test.jsonl", "tokenizer.json"],
    )?;

    println!(
        "wrote {} examples ({} train / {} val / {} test), vocabulary {} -> {}",
        examples.len(),
        train_x.len(),
        val_x.len(),
        test_x.len(),
        tokenizer.vocab_size(),
        path_str(&args.out)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train / finetune
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainCmdArgs {
    /// Corpus directory holding train.jsonl, val.jsonl, and tokenizer.json
    #[arg(long)]
    corpus: PathBuf,
    /// Model shape as JSON; vocab_size 0 adopts the tokenizer's vocabulary
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Optimizer and schedule settings as JSON (library defaults when omitted)
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Training objective
    #[arg(long, value_enum, default_value_t = Objective::Lm)]
    objective: Objective,
    /// Directory for model.ckpt and history.csv
    #[arg(long)]
    out: PathBuf,
}

/// Resolve the model shape against the tokenizer that will feed it: the
/// vocabulary must cover every id the tokenizer can emit.
fn resolve_model_config(
    from_file: Option<ModelConfig>,
    tokenizer: &Tokenizer,
) -> Result<ModelConfig> {
    let mut config = from_file.unwrap_or_default();
    if config.vocab_size == 0 {
        config.vocab_size = tokenizer.vocab_size();
    } else if config.vocab_size < tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} cannot represent the tokenizer's {} entries",
            config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    Ok(config)
}

fn cmd_train(args: TrainCmdArgs) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus_dir(&args.corpus)?;
    let file_config = match &args.model_config {
        Some(path) => Some(load_json::<ModelConfig>(path)?),
        None => None,
    };
    let model_config = resolve_model_config(file_config, &corpus.tokenizer)?;
    let train_config = match &args.train_config {
        Some(path) => load_json::<TrainConfig>(path)?,
        None => TrainConfig::default(),
    };

    let max_len = model_config.max_seq_len;
    let train_set = encode_set(&corpus.tokenizer, &corpus.train, max_len, args.objective)?;
    let val_set = encode_set(&corpus.tokenizer, &corpus.val, max_len, args.objective)?;

    let mut model = GptModel::<f32>::init(model_config.clone(), &mut Rng::new(model_config.seed))?;
    let report = train(&mut model, &train_set, &val_set, &train_config)?;

    ensure_dir(&args.out)?;
    save_checkpoint(&args.out.join("model.ckpt"), &model)?;
    write_history_csv(&args.out.join("history.csv"), &report.history)?;

    let mut manifest = new_manifest(
        "train",
        serde_json::json!({
            "model": config_value(&model_config),
            "train": config_value(&train_config),
            "objective": match args.objective {
                Objective::Lm => "lm",
                Objective::Summarize => "summarize",
            },
        }),
    );
    manifest.seeds.insert("model-init".into(), model_config.seed);
    manifest.seeds.insert("train".into(), train_config.seed);
    manifest
        .inputs
        .insert("corpus".into(), path_str(&args.corpus));
    finish_manifest(manifest, &args.out, started, &["model.ckpt", "history.csv"])?;

    println!(
        "trained {} parameters: {}",
        model.n_params(),
        summarize_training(&report)
    );
    println!("checkpoint -> {}", path_str(&args.out.join("model.ckpt")));
    Ok(())
}

#[derive(Args)]
struct FinetuneArgs {
    /// Starting checkpoint; every parameter is unfrozen before training
    #[arg(long)]
    base: PathBuf,
    /// Corpus directory holding train.jsonl, val.jsonl, and tokenizer.json
    #[arg(long)]
    corpus: PathBuf,
    /// Optimizer and schedule settings as JSON (library defaults when omitted)
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Directory for model.ckpt and history.csv
    #[arg(long)]
    out: PathBuf,
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus_dir(&args.corpus)?;
    let mut model = load_checkpoint(&args.base)?;
    model.set_trainable_all(true);
    let train_config = match &args.train_config {
        Some(path) => load_json::<TrainConfig>(path)?,
        None => TrainConfig::default(),
    };

    let max_len = model.config.max_seq_len;
    let train_set = encode_set(&corpus.tokenizer, &corpus.train, max_len, Objective::Summarize)?;
    let val_set = encode_set(&corpus.tokenizer, &corpus.val, max_len, Objective::Summarize)?;
    let report = train(&mut model, &train_set, &val_set, &train_config)?;

    ensure_dir(&args.out)?;
    save_checkpoint(&args.out.join("model.ckpt"), &model)?;
    write_history_csv(&args.out.join("history.csv"), &report.history)?;

    let mut manifest = new_manifest("finetune", config_value(&train_config));
    manifest.seeds.insert("train".into(), train_config.seed);
    manifest.inputs.insert("base".into(), path_str(&args.base));
    manifest
        .inputs
        .insert("corpus".into(), path_str(&args.corpus));
    finish_manifest(manifest, &args.out, started, &["model.ckpt", "history.csv"])?;

    println!("fine-tuned: {}", summarize_training(&report));
    println!("checkpoint -> {}", path_str(&args.out.join("model.ckpt")));
    Ok(())
}

// ---------------------------------------------------------------------------
// lora
// ---------------------------------------------------------------------------

#[derive(Args)]
struct LoraArgs {
    /// Frozen checkpoint the adapters attach to
    #[arg(long)]
    base: PathBuf,
    /// Corpus directory holding train.jsonl, val.jsonl, and tokenizer.json
    #[arg(long)]
    corpus: PathBuf,
    /// Circuit description whose layers become the adapter targets
    #[arg(long, conflicts_with = "layers")]
    circuit: Option<PathBuf>,
    /// Explicit layer targets, comma separated (every layer when omitted)
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Adapter rank
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Adapter scale numerator (effective scale is alpha / rank)
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    /// Projections to adapt, comma separated (q, k, v, o)
    #[arg(long, value_delimiter = ',', value_parser = parse_projection,
          default_value = "q,v")]
    projections: Vec<Projection>,
    /// Adapter initialization seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimizer and schedule settings as JSON (library defaults when omitted)
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Directory for lora.adapters and history.csv
    #[arg(long)]
    out: PathBuf,
}

fn cmd_lora(args: LoraArgs) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus_dir(&args.corpus)?;
    let base = load_checkpoint(&args.base)?;

    let layers = match &args.circuit {
        Some(path) => to_lora_targets(&load_circuit(path)?)?.layers,
        None => args.layers.clone(),
    };
    let lora_config = LoraConfig {
        rank: args.rank,
        alpha: args.alpha,
        projections: args.projections.clone(),
        layers,
        seed: args.seed,
    };
    let train_config = match &args.train_config {
        Some(path) => load_json::<TrainConfig>(path)?,
        None => TrainConfig::default(),
    };

    let max_len = base.config.max_seq_len;
    let train_set = encode_set(&corpus.tokenizer, &corpus.train, max_len, Objective::Summarize)?;
    let val_set = encode_set(&corpus.tokenizer, &corpus.val, max_len, Objective::Summarize)?;

    let total = base.n_params();
    let mut adapted = lora::attach(base, lora_config.clone(), &mut Rng::new(args.seed))?;
    let trainable = adapted.count_trainable();
    let report = train_lora(&mut adapted, &train_set, &val_set, &train_config)?;

    ensure_dir(&args.out)?;
    adapted.save_adapters(&args.out.join("lora.adapters"))?;
    write_history_csv(&args.out.join("history.csv"), &report.history)?;

    let mut manifest = new_manifest(
        "lora",
        serde_json::json!({
            "lora": config_value(&lora_config),
            "train": config_value(&train_config),
        }),
    );
    manifest.seeds.insert("lora-init".into(), args.seed);
    manifest.seeds.insert("train".into(), train_config.seed);
    manifest.inputs.insert("base".into(), path_str(&args.base));
    manifest
        .inputs
        .insert("corpus".into(), path_str(&args.corpus));
    if let Some(path) = &args.circuit {
        manifest.inputs.insert("circuit".into(), path_str(path));
    }
    finish_manifest(
        manifest,
        &args.out,
        started,
        &["lora.adapters", "history.csv"],
    )?;

    println!(
        "adapted {trainable} of {total} parameters ({:.2}%): {}",
        100.0 * trainable as f64 / total as f64,
        summarize_training(&report)
    );
    println!("adapters -> {}", path_str(&args.out.join("lora.adapters")));
    Ok(())
}

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TraceArgs {
    /// Checkpoint to trace
    #[arg(long)]
    model: PathBuf,
    /// Adapter file layered onto the checkpoint before tracing
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// JSONL corpus slice to trace (typically the test split)
    #[arg(long)]
    corpus: PathBuf,
    /// Tokenizer fitted alongside the corpus
    #[arg(long)]
    tokenizer: PathBuf,
    /// Label stored inside the trace set (e.g. "base", "fine-tuned")
    #[arg(long)]
    tag: String,
    /// Encoding the traced sequences use
    #[arg(long, value_enum, default_value_t = Objective::Summarize)]
    objective: Objective,
    /// Trace only the first N examples
    #[arg(long)]
    limit: Option<usize>,
    /// Record only the final query position instead of every position
    #[arg(long)]
    last_only: bool,
    /// Skip the attention stream
    #[arg(long)]
    no_attention: bool,
    /// Skip the MLP hidden stream
    #[arg(long)]
    no_mlp_hidden: bool,
    /// Skip the residual stream
    #[arg(long)]
    no_residual: bool,
    /// Output trace file
    #[arg(long)]
    out: PathBuf,
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let tokenizer = Tokenizer::load(&args.tokenizer)?;
    let mut examples = load_jsonl(&args.corpus)?;
    if let Some(limit) = args.limit {
        examples.truncate(limit);
    }
    let model = load_checkpoint(&args.model)?;
    let encoded = encode_set(&tokenizer, &examples, model.config.max_seq_len, args.objective)?;

    let config = TraceConfig {
        capture_attention: !args.no_attention,
        capture_mlp_hidden: !args.no_mlp_hidden,
        capture_residual: !args.no_residual,
        positions: if args.last_only {
            TracePositions::LastOnly
        } else {
            TracePositions::All
        },
    };
    let set = match &args.adapters {
        Some(path) => {
            let adapted = load_adapters(model, path)?;
            trace_corpus(&adapted, &encoded, &config, &args.tag)?
        }
        None => trace_corpus(&model, &encoded, &config, &args.tag)?,
    };
    save_traces(&args.out, &set)?;

    println!(
        "traced {} examples as {:?} -> {}",
        set.traces.len(),
        set.tag,
        path_str(&args.out)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace set of the reference model state
    #[arg(long)]
    pre: PathBuf,
    /// Trace set of the changed model state
    #[arg(long)]
    post: PathBuf,
    /// Measure divergence of the reference from the changed state instead
    #[arg(long)]
    reverse_kl: bool,
    /// Activation stream for the magnitude profile
    #[arg(long, value_enum, default_value_t = SourceArg::MlpHidden)]
    activation_source: SourceArg,
    /// Neurons listed per layer in the shift tables
    #[arg(long, default_value_t = DEFAULT_TOP_NEURONS)]
    top_neurons: usize,
    /// Directory for the metric tables
    #[arg(long)]
    out: PathBuf,
}

fn diff_options(reverse_kl: bool, source: SourceArg, top_neurons: usize) -> DiffOptions {
    DiffOptions {
        reverse_kl,
        activation_source: source.into(),
        top_neurons,
    }
}

fn load_trace_pair(pre: &Path, post: &Path) -> Result<(TraceSet<f32>, TraceSet<f32>)> {
    Ok((load_traces(pre)?, load_traces(post)?))
}

fn print_diff_headline(report: &DiffReport) {
    println!(
        "fraction of heads with decreased entropy: {:.4}",
        report.fraction_entropy_decreased
    );
    if let Some((layer, head, kl)) = report.kl.ranked().first() {
        println!("most divergent head: L{layer}H{head} (KL {kl:.4})");
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let started = Instant::now();
    let (pre, post) = load_trace_pair(&args.pre, &args.post)?;
    let options = diff_options(args.reverse_kl, args.activation_source, args.top_neurons);
    let report = diff_report(&pre, &post, &options)?;
    write_report_dir(&args.out, &report)?;

    let mut outputs: Vec<String> = vec![
        "kl.csv".into(),
        "entropy_pre.csv".into(),
        "entropy_post.csv".into(),
        "entropy_diff.csv".into(),
        "entropy_fraction.csv".into(),
        "actmag.csv".into(),
        "layer_kl.csv".into(),
        "meta.json".into(),
    ];
    for layer in 0..report.meta.n_layers {
        outputs.push(format!("neurons_layer{layer}.csv"));
    }
    // Project the changed state's final-layer residual rows when the trace
    // captured them, mirroring the pipeline's analysis stage.
    if post.config.capture_residual {
        let (latents, dim) = final_layer_latents(&post);
        let pca = pca3_project(&latents, dim, PCA_ITERATIONS)?;
        let path = args.out.join("latents_pca3.csv");
        std::fs::write(&path, coords_to_csv(&pca)).map_err(|e| Error::io(&path, e))?;
        outputs.push("latents_pca3.csv".into());
    }

    let mut manifest = new_manifest("analyze", config_value(&options));
    manifest.inputs.insert("pre".into(), path_str(&args.pre));
    manifest.inputs.insert("post".into(), path_str(&args.post));
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    finish_manifest(manifest, &args.out, started, &refs)?;

    print_diff_headline(&report);
    println!("tables -> {}", path_str(&args.out));
    Ok(())
}

// ---------------------------------------------------------------------------
// circuit
// ---------------------------------------------------------------------------

#[derive(Args)]
struct CircuitArgs {
    /// Trace set of the reference model state
    #[arg(long)]
    pre: PathBuf,
    /// Trace set of the changed model state
    #[arg(long)]
    post: PathBuf,
    /// Number of layers to select
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Per-head KL quantile that defines a salient head
    #[arg(long, default_value_t = DEFAULT_HEAD_QUANTILE)]
    head_quantile: f64,
    /// Rank layers by standardized KL plus activation shift, not KL alone
    #[arg(long)]
    combined: bool,
    /// Measure divergence of the reference from the changed state instead
    #[arg(long)]
    reverse_kl: bool,
    /// Activation stream for the magnitude profile
    #[arg(long, value_enum, default_value_t = SourceArg::MlpHidden)]
    activation_source: SourceArg,
    /// Neurons recorded per selected layer
    #[arg(long, default_value_t = DEFAULT_TOP_NEURONS)]
    top_neurons: usize,
    /// Output circuit description (JSON)
    #[arg(long)]
    out: PathBuf,
}

fn cmd_circuit(args: CircuitArgs) -> Result<()> {
    let (pre, post) = load_trace_pair(&args.pre, &args.post)?;
    let options = diff_options(args.reverse_kl, args.activation_source, args.top_neurons);
    let report = diff_report(&pre, &post, &options)?;
    let circuit_options = CircuitOptions {
        k: args.k,
        head_quantile: args.head_quantile,
        score_mode: if args.combined {
            ScoreMode::Combined
        } else {
            ScoreMode::KlOnly
        },
    };
    let spec = identify_circuit(&report, &circuit_options)?;
    save_circuit(&args.out, &spec)?;

    let layers: Vec<String> = spec
        .layers
        .iter()
        .map(|l| format!("{} (score {:.4})", l.layer, l.score))
        .collect();
    println!("circuit layers: {}", layers.join(", "));
    let salient = spec.heads.iter().filter(|h| !h.auxiliary).count();
    println!(
        "{} salient heads ({} auxiliary) -> {}",
        salient,
        spec.heads.len() - salient,
        path_str(&args.out)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Test split (JSONL of article/summary pairs)
    #[arg(long)]
    corpus: PathBuf,
    /// Tokenizer fitted alongside the corpus
    #[arg(long)]
    tokenizer: PathBuf,
    /// Checkpoint scored as "Base"
    #[arg(long)]
    base: PathBuf,
    /// Checkpoint scored as "Fine-tuned"
    #[arg(long)]
    finetuned: Option<PathBuf>,
    /// Adapter file scored as "LoRA-targeted", layered onto --base
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Tokens generated per summary
    #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
    max_new: usize,
    /// Directory for rouge.csv and rouge.txt
    #[arg(long)]
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let tokenizer = Tokenizer::load(&args.tokenizer)?;
    let examples = load_jsonl(&args.corpus)?;
    let base = load_checkpoint(&args.base)?;
    let finetuned = match &args.finetuned {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let adapted = match &args.adapters {
        Some(path) => Some(load_adapters(base.clone(), path)?),
        None => None,
    };

    let mut roster: Vec<(&str, &dyn CausalLm<f32>)> = vec![("Base", &base)];
    if let Some(model) = &finetuned {
        roster.push(("Fine-tuned", model));
    }
    if let Some(model) = &adapted {
        roster.push(("LoRA-targeted", model));
    }
    let table = evaluate_models(&roster, &examples, &tokenizer, args.max_new)?;
    write_scores(&args.out, &table)?;

    let mut manifest = new_manifest(
        "eval",
        serde_json::json!({ "max_new": args.max_new, "models": roster.len() }),
    );
    manifest
        .inputs
        .insert("corpus".into(), path_str(&args.corpus));
    manifest.inputs.insert("base".into(), path_str(&args.base));
    if let Some(path) = &args.finetuned {
        manifest.inputs.insert("finetuned".into(), path_str(path));
    }
    if let Some(path) = &args.adapters {
        manifest.inputs.insert("adapters".into(), path_str(path));
    }
    finish_manifest(manifest, &args.out, started, &["rouge.csv", "rouge.txt"])?;

    print!("{}", table.to_text());
    for row in &table.rows {
        for warning in &row.warnings {
            eprintln!("warning [{}]: {}", row.label, warning);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ReportArgs {
    /// Analysis directory holding the metric tables
    #[arg(long)]
    dir: PathBuf,
    /// Markdown output path
    #[arg(long)]
    out: PathBuf,
    /// Also render the KL and entropy-shift matrices into this directory
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    /// Heatmap output format
    #[arg(long, value_enum, default_value_t = FormatArg::Pgm)]
    heatmap_format: FormatArg,
}

fn cmd_report_md(args: ReportArgs) -> Result<()> {
    let markdown = cmd_report(&args.dir)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    std::fs::write(&args.out, markdown).map_err(|e| Error::io(&args.out, e))?;
    println!("report -> {}", path_str(&args.out));

    if let Some(dir) = &args.heatmaps {
        ensure_dir(dir)?;
        let ext = match args.heatmap_format {
            FormatArg::Pgm => "pgm",
            FormatArg::Csv => "csv",
        };
        for name in ["kl", "entropy_diff"] {
            let source = args.dir.join(format!("{name}.csv"));
            let target = dir.join(format!("{name}.{ext}"));
            render_heatmap(&source, &target, args.heatmap_format.into())?;
        }
        println!("heatmaps -> {}", path_str(dir));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PipelineArgs {
    /// Full run configuration (JSON); defaults describe a small local run
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured master seed
    #[arg(long)]
    master_seed: Option<u64>,
    /// Skip the targeted-adapter stage regardless of the configuration
    #[arg(long)]
    skip_lora: bool,
    /// Output directory for every artifact
    #[arg(long)]
    out: PathBuf,
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => load_json::<PipelineConfig>(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.master_seed {
        config.master_seed = seed;
    }
    if args.skip_lora {
        config.skip_lora = true;
    }

    let outcome = run_pipeline(&config, &args.out)?;

    println!("base:       {}", summarize_training(&outcome.base_training));
    println!(
        "fine-tuned: {}",
        summarize_training(&outcome.finetune_training)
    );
    if let Some(report) = &outcome.lora_training {
        println!("adapters:   {}", summarize_training(report));
    }
    let layers: Vec<String> = outcome
        .circuit
        .layers
        .iter()
        .map(|l| l.layer.to_string())
        .collect();
    println!("circuit layers: [{}]", layers.join(", "));
    print!("{}", outcome.scores.to_text());
    println!(
        "artifacts -> {} ({:.1}s)",
        path_str(&outcome.out_dir),
        outcome.manifest.wall_time_secs
    );
    Ok(())
}
