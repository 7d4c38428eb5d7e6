//! End-to-end orchestration: synthesize a corpus, train a base language
//! model, fine-tune it for summarization, trace both states over the test
//! split, run the differential analysis, score summaries, identify the
//! circuit, optionally train a targeted adapter, and render every artifact
//! into one output directory.
//!
//! Each stage draws its seed from the master seed by name, so reruns with
//! the same configuration reproduce every artifact (bitwise for the f32
//! model/metric files). When a stage fails, everything produced so far
//! stays on disk and the manifest records which stage stopped the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::circuit::{identify_circuit, save_circuit, to_lora_targets, CircuitOptions, CircuitSpec, ScoreMode};
use crate::corpus::{
    encode_article_lm, encode_example, generate_synthetic, save_jsonl, split, Example,
    SyntheticSpec, Tokenizer,
};
use crate::error::{Error, Result};
use crate::lora::{self, train_lora};
use crate::metrics::{diff_report, write_report_dir, DiffOptions, DiffReport};
use crate::model::{checkpoint::save_checkpoint, CausalLm, GptModel, ModelConfig};
use crate::pca::{coords_to_csv, pca3_project};
use crate::report::{cmd_report, render_heatmap, HeatmapFormat, RunManifest};
use crate::rng::Rng;
use crate::rouge::{evaluate_models, ScoreTable};
use crate::trace::{save_traces, trace_corpus, TraceConfig, TraceSet};
use crate::train::{train, write_history_csv, TrainConfig, TrainReport};

/// Power-iteration steps for the latent projection.
pub const PCA_ITERATIONS: usize = 100;

/// Full configuration of one pipeline run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Synthetic corpus shape; its `seed` field is overridden by the
    /// derived per-stage seed.
    pub corpus: SyntheticSpec,
    pub model: ModelConfig,
    /// Language-model pretraining over bare articles (produces the base).
    pub pretrain: TrainConfig,
    /// Summarization fine-tuning over `[article] TL;DR: [summary]`.
    pub finetune: TrainConfig,
    pub trace: TraceConfig,
    /// Train/validation/test fractions.
    pub splits: [f64; 3],
    /// Circuit selection: top-k layers.
    pub circuit_k: usize,
    /// Circuit selection: head quantile.
    pub head_quantile: f64,
    /// Use the combined KL + ActMag layer score instead of KL only.
    pub combined_score: bool,
    /// Skip the targeted-adapter stage entirely.
    pub skip_lora: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Adapter training; seed overridden per stage.
    pub lora_train: TrainConfig,
    /// Generation budget for evaluation.
    pub max_new: usize,
    /// Master seed every stage seed is derived from.
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: SyntheticSpec { n_examples: 512, ..SyntheticSpec::default() },
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            trace: TraceConfig::default(),
            splits: [0.8, 0.1, 0.1],
            circuit_k: crate::circuit::DEFAULT_TOP_K,
            head_quantile: crate::circuit::DEFAULT_HEAD_QUANTILE,
            combined_score: false,
            skip_lora: false,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_train: TrainConfig::default(),
            max_new: crate::model::DEFAULT_MAX_NEW,
            master_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.trace.validate()?;
        if !self.skip_lora {
            self.lora_train.validate()?;
        }
        if self.max_new == 0 {
            return Err(Error::Config("generation budget must be positive".into()));
        }
        Ok(())
    }

    /// The seed a named stage runs with.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        Rng::derive(self.master_seed, stage).next_u64()
    }
}

/// Everything a completed (or attempted) run leaves behind in memory.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub base_training: TrainReport,
    pub finetune_training: TrainReport,
    pub lora_training: Option<TrainReport>,
    pub diff: DiffReport,
    pub circuit: CircuitSpec,
    pub scores: ScoreTable,
    pub manifest: RunManifest,
}

/// Tracks stage completion in the manifest, persisting it after every
/// stage so a failed run still documents how far it got.
struct StageTracker {
    manifest: RunManifest,
    out_dir: PathBuf,
    started: Instant,
}

impl StageTracker {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        match f() {
            Ok(value) => {
                self.manifest.completed_stages.push(name.to_string());
                self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
                self.manifest.save(&self.out_dir)?;
                Ok(value)
            }
            Err(err) => {
                self.manifest.failure_stage = Some(name.to_string());
                self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
                // Best effort: the original error outranks a manifest
                // write failure.
                let _ = self.manifest.save(&self.out_dir);
                Err(err)
            }
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Residual-stream rows of a trace set's final layer, flattened for the
/// latent projection: one row per traced position across all examples.
pub fn final_layer_latents(set: &TraceSet<f32>) -> (Vec<f64>, usize) {
    let d = set.dims;
    let layer = d.n_layers - 1;
    let mut out = Vec::new();
    for tr in &set.traces {
        for r in 0..tr.rows {
            out.extend(tr.residual_row(&d, layer, r).iter().map(|&x| x as f64));
        }
    }
    (out, d.d_model)
}

/// Run the full pipeline into `out_dir`. See the module docs for the stage
/// list; artifacts land under `corpus/`, `models/`, `history/`, `traces/`,
/// `analysis/`, `heatmaps/`, plus `report.md` and `manifest.json` at the
/// root.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    ensure_dir(out_dir)?;

    let mut manifest = RunManifest::new("pipeline");
    manifest.config = serde_json::to_value(config)
        .map_err(|e| Error::json(out_dir.join("manifest.json"), e))?;
    for stage in ["corpus", "split", "model-init", "pretrain", "finetune", "lora-init", "lora-train"] {
        manifest.seeds.insert(stage.to_string(), config.stage_seed(stage));
    }
    let mut tracker = StageTracker {
        manifest,
        out_dir: out_dir.to_path_buf(),
        started: Instant::now(),
    };

    let corpus_dir = out_dir.join("corpus");
    let models_dir = out_dir.join("models");
    let history_dir = out_dir.join("history");
    let traces_dir = out_dir.join("traces");
    let analysis_dir = out_dir.join("analysis");
    let heatmaps_dir = out_dir.join("heatmaps");

    // Stage 1: synthesize, split, tokenize, encode.
    let max_len = config.model.max_seq_len;
    let (tokenizer, test_examples, encoded) = tracker.run("gen-corpus", || {
        ensure_dir(&corpus_dir)?;
        let spec = SyntheticSpec {
            seed: config.stage_seed("corpus"),
            ..config.corpus.clone()
        };
        let examples = generate_synthetic(&spec, &mut Rng::new(spec.seed))?;
        let tokenizer = Tokenizer::build(&examples, Some(config.model.vocab_size))?;
        let mut split_rng = Rng::new(config.stage_seed("split"));
        let (train_x, val_x, test_x) = split(&examples, config.splits, &mut split_rng)?;
        save_jsonl(&corpus_dir.join("train.jsonl"), &train_x)?;
        save_jsonl(&corpus_dir.join("val.jsonl"), &val_x)?;
        save_jsonl(&corpus_dir.join("test.jsonl"), &test_x)?;
        tokenizer.save(&corpus_dir.join("tokenizer.json"))?;

        let lm = |xs: &[Example]| -> Result<Vec<_>> {
            xs.iter().map(|ex| encode_article_lm(&tokenizer, ex, max_len)).collect()
        };
        let sum = |xs: &[Example]| -> Result<Vec<_>> {
            xs.iter().map(|ex| encode_example(&tokenizer, ex, max_len)).collect()
        };
        let encoded = (
            lm(&train_x)?,  // .0 LM pretraining train
            lm(&val_x)?,    // .1 LM pretraining val
            sum(&train_x)?, // .2 summarization train
            sum(&val_x)?,   // .3 summarization val
            sum(&test_x)?,  // .4 summarization test (traced + scored)
        );
        Ok((tokenizer, test_x, encoded))
    })?;
    let (lm_train, lm_val, sum_train, sum_val, sum_test) = encoded;

    // Stage 2: train the base language model on bare articles.
    let (base, base_training) = tracker.run("train-base", || {
        ensure_dir(&models_dir)?;
        ensure_dir(&history_dir)?;
        let model_config = ModelConfig {
            seed: config.stage_seed("model-init"),
            ..config.model.clone()
        };
        let mut model = GptModel::<f32>::init(model_config, &mut Rng::new(config.stage_seed("model-init")))?;
        let train_config = TrainConfig {
            seed: config.stage_seed("pretrain"),
            ..config.pretrain.clone()
        };
        let report = train(&mut model, &lm_train, &lm_val, &train_config)?;
        save_checkpoint(&models_dir.join("base.ckpt"), &model)?;
        write_history_csv(&history_dir.join("base.csv"), &report.history)?;
        Ok((model, report))
    })?;

    // Stage 3: fine-tune a copy on the summarization objective.
    let (finetuned, finetune_training) = tracker.run("finetune", || {
        let mut model = base.clone();
        model.set_trainable_all(true);
        let train_config = TrainConfig {
            seed: config.stage_seed("finetune"),
            ..config.finetune.clone()
        };
        let report = train(&mut model, &sum_train, &sum_val, &train_config)?;
        save_checkpoint(&models_dir.join("finetuned.ckpt"), &model)?;
        write_history_csv(&history_dir.join("finetune.csv"), &report.history)?;
        Ok((model, report))
    })?;

    // Stage 4: trace both model states over the held-out test split.
    let (trace_base, trace_ft) = tracker.run("trace", || {
        ensure_dir(&traces_dir)?;
        let tb = trace_corpus(&base, &sum_test, &config.trace, "base")?;
        let tf = trace_corpus(&finetuned, &sum_test, &config.trace, "fine-tuned")?;
        save_traces(&traces_dir.join("base.trc"), &tb)?;
        save_traces(&traces_dir.join("finetuned.trc"), &tf)?;
        Ok((tb, tf))
    })?;

    // Stage 5: differential analysis.
    let diff = tracker.run("analyze", || {
        let report = diff_report(&trace_base, &trace_ft, &DiffOptions::default())?;
        write_report_dir(&analysis_dir, &report)?;
        if config.trace.capture_residual {
            let (latents, dim) = final_layer_latents(&trace_ft);
            let pca = pca3_project(&latents, dim, PCA_ITERATIONS)?;
            let path = analysis_dir.join("latents_pca3.csv");
            std::fs::write(&path, coords_to_csv(&pca)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(report)
    })?;

    // Stage 6: summary quality of base vs fine-tuned.
    let mut scores = tracker.run("evaluate", || {
        let table = evaluate_models(
            &[
                ("Base", &base as &dyn CausalLm<f32>),
                ("Fine-tuned", &finetuned as &dyn CausalLm<f32>),
            ],
            &test_examples,
            &tokenizer,
            config.max_new,
        )?;
        write_scores(&analysis_dir, &table)?;
        Ok(table)
    })?;

    // Stage 7: circuit identification.
    let circuit = tracker.run("circuit", || {
        let options = CircuitOptions {
            k: config.circuit_k,
            head_quantile: config.head_quantile,
            score_mode: if config.combined_score {
                ScoreMode::Combined
            } else {
                ScoreMode::KlOnly
            },
        };
        let spec = identify_circuit(&diff, &options)?;
        save_circuit(&analysis_dir.join("circuit.json"), &spec)?;
        Ok(spec)
    })?;

    // Stage 8 (optional): targeted adapter on the circuit layers, then
    // re-evaluate the full model roster.
    let lora_training = if config.skip_lora {
        None
    } else {
        let (adapted, report) = tracker.run("lora", || {
            let lora_config = lora::LoraConfig {
                rank: config.lora_rank,
                alpha: config.lora_alpha,
                seed: config.stage_seed("lora-init"),
                ..to_lora_targets(&circuit)?
            };
            let mut adapted = lora::attach(
                base.clone(),
                lora_config,
                &mut Rng::new(config.stage_seed("lora-init")),
            )?;
            let train_config = TrainConfig {
                seed: config.stage_seed("lora-train"),
                ..config.lora_train.clone()
            };
            let report = train_lora(&mut adapted, &sum_train, &sum_val, &train_config)?;
            adapted.save_adapters(&models_dir.join("lora.adapters"))?;
            write_history_csv(&history_dir.join("lora.csv"), &report.history)?;
            Ok((adapted, report))
        })?;
        scores = tracker.run("re-evaluate", || {
            let table = evaluate_models(
                &[
                    ("Base", &base as &dyn CausalLm<f32>),
                    ("Fine-tuned", &finetuned as &dyn CausalLm<f32>),
                    ("LoRA-targeted", &adapted as &dyn CausalLm<f32>),
                ],
                &test_examples,
                &tokenizer,
                config.max_new,
            )?;
            write_scores(&analysis_dir, &table)?;
            Ok(table)
        })?;
        Some(report)
    };

    // Stage 9: heatmaps of the headline matrices.
    tracker.run("render", || {
        ensure_dir(&heatmaps_dir)?;
        render_heatmap(
            &analysis_dir.join("kl.csv"),
            &heatmaps_dir.join("kl.pgm"),
            HeatmapFormat::Pgm,
        )?;
        render_heatmap(
            &analysis_dir.join("entropy_diff.csv"),
            &heatmaps_dir.join("entropy_diff.pgm"),
            HeatmapFormat::Pgm,
        )
    })?;

    // Stage 10: human-readable report.
    tracker.run("report", || {
        let md = cmd_report(&analysis_dir)?;
        let path = out_dir.join("report.md");
        std::fs::write(&path, md).map_err(|e| Error::io(&path, e))
    })?;

    // Final manifest: record outputs.
    let mut outputs: Vec<String> = Vec::new();
    for dir in [&corpus_dir, &models_dir, &history_dir, &traces_dir, &analysis_dir, &heatmaps_dir] {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| {
                format!(
                    "{}/{}",
                    dir.file_name().unwrap_or_default().to_string_lossy(),
                    e.file_name().to_string_lossy()
                )
            })
            .collect();
        entries.sort();
        outputs.extend(entries);
    }
    outputs.push("report.md".to_string());
    tracker.manifest.outputs = outputs;
    tracker.manifest.wall_time_secs = tracker.started.elapsed().as_secs_f64();
    tracker.manifest.save(out_dir)?;

    Ok(PipelineOutcome {
        out_dir: out_dir.to_path_buf(),
        base_training,
        finetune_training,
        lora_training,
        diff,
        circuit,
        scores,
        manifest: tracker.manifest,
    })
}

/// Write the score table as CSV and aligned text.
pub fn write_scores(analysis_dir: &Path, table: &ScoreTable) -> Result<()> {
    ensure_dir(analysis_dir)?;
    let csv = analysis_dir.join("rouge.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = analysis_dir.join("rouge.txt");
    std::fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))
}
