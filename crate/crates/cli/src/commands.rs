//! The `run`, `analyze` and `ablate-text` commands.

use std::path::{Path, PathBuf};

use elip_core::complexity::{flops_estimate, relative_gap, ComplexityReport, SeqLens};
use elip_core::metrics::{export_prune_masks, layer_metric_trace, layer_metrics_csv, LayerMetrics};
use elip_core::model::ElipModel;
use elip_core::tensor::counter::{count_ops, OpCounts};
use elip_core::text::{split_words, tokenize, TokenSequence, Vocab};
use elip_core::text_prune::TextPruneStrategy;
use elip_core::PruneSchedule;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::images::{load_dir, synthetic_image, synthetic_set, NamedImage};

pub const DEFAULT_OUT_DIR: &str = "elip_out";

/// A built model plus the vocabulary its text side was sized for.
pub struct Engine {
    pub model: ElipModel,
    pub vocab: Vocab,
}

impl Engine {
    pub fn build(cfg: &RunConfig) -> CliResult<Self> {
        let vocab = match &cfg.vocab {
            Some(p) => Vocab::from_file(p).map_err(|e| CliError::from_core(e, "vocab", Some(p)))?,
            None => Vocab::builtin(),
        };
        let vit = cfg.vit_config();
        let text = cfg.text_config(vocab.len());
        let model = match &cfg.weights {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
                ElipModel::load(vit, text, &bytes).map_err(|e| CliError::from_core(e, "weights", Some(p)))?
            }
            None => ElipModel::seeded(vit, text, cfg.seed).map_err(|e| CliError::from_core(e, "model", None))?,
        };
        if let Some(p) = &cfg.save_weights {
            let bytes = model.save().map_err(|e| CliError::from_core(e, "save_weights", Some(p)))?;
            write_file(p, &bytes)?;
        }
        Ok(Self { model, vocab })
    }

    pub fn tokenize(&self, cfg: &RunConfig) -> CliResult<TokenSequence> {
        let seq = tokenize(&cfg.text, &self.vocab);
        let max = self.model.text.config().max_len;
        if seq.len() > max {
            return Err(CliError::config(
                "text",
                format!("{} tokens with [CLS]/[SEP] exceed the limit of {max}", seq.len()),
            ));
        }
        Ok(seq)
    }

    /// Final text CLS feature for the configured caption.
    pub fn text_cls(&self, cfg: &RunConfig) -> CliResult<Vec<f64>> {
        let seq = self.tokenize(cfg)?;
        let feats = self
            .model
            .text
            .encode_text(&seq)
            .map_err(|e| CliError::from_core(e, "text", None))?;
        Ok(feats.row(0).to_vec())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s.into_bytes()
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("json.tmp");
    write_file(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageSummary {
    pub name: String,
    pub token_counts: Vec<usize>,
    pub pruned_ops: OpCounts,
    pub baseline_ops: OpCounts,
    pub measured_reduction: f64,
    pub estimated_vision_macs: u64,
    pub estimate_gap: f64,
    pub final_entropy: f64,
    pub final_mean_cosine: f64,
    pub baseline_final_entropy: f64,
    pub baseline_final_mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub text_tokens: usize,
    pub images: Vec<ImageSummary>,
    pub mean_measured_reduction: f64,
    pub token_layer_units: f64,
    pub reduction_pct: f64,
    pub vision_flops_reduction_pct: f64,
}

fn last_metrics(rows: &[LayerMetrics]) -> CliResult<&LayerMetrics> {
    rows.last().ok_or_else(|| CliError::Invariant("no layer metrics recorded".into()))
}

fn process_image(
    engine: &Engine,
    cfg: &RunConfig,
    xt_cls: &[f64],
    complexity: &ComplexityReport,
    item: &NamedImage,
    dir: &Path,
) -> CliResult<ImageSummary> {
    let vision = &engine.model.vision;
    let opts = cfg.prune_options();
    let core = |e| CliError::from_core(e, "model", None);

    let (result, pruned_ops) = count_ops(|| layer_metric_trace(vision, &item.image, xt_cls, &cfg.schedule, &opts));
    let (metrics, trace) = result.map_err(core)?;
    trace
        .validate()
        .map_err(|e| CliError::Invariant(format!("{}: {e}", item.name)))?;
    let unpruned = PruneSchedule::unpruned(cfg.num_layers).map_err(core)?;
    let (result, baseline_ops) = count_ops(|| layer_metric_trace(vision, &item.image, xt_cls, &unpruned, &opts));
    let (baseline_metrics, _) = result.map_err(core)?;
    let masks = export_prune_masks(&trace, cfg.grid_side()).map_err(core)?;

    let image_dir = dir.join(&item.name);
    write_file(&image_dir.join("trace.json"), &json_bytes(&trace))?;
    write_file(&image_dir.join("metrics.csv"), layer_metrics_csv(&metrics).as_bytes())?;
    write_file(&image_dir.join("metrics_baseline.csv"), layer_metrics_csv(&baseline_metrics).as_bytes())?;
    for grid in &masks.blocks {
        let name = format!("masks_block{}.csv", grid.block);
        write_file(&image_dir.join(name), grid.to_csv(cfg.grid_side()).as_bytes())?;
    }
    write_file(&image_dir.join("masks.json"), &json_bytes(&masks))?;

    let last = last_metrics(&metrics)?;
    let base_last = last_metrics(&baseline_metrics)?;
    Ok(ImageSummary {
        name: item.name.clone(),
        token_counts: trace.token_counts(),
        pruned_ops,
        baseline_ops,
        measured_reduction: 1.0 - pruned_ops.macs as f64 / baseline_ops.macs as f64,
        estimated_vision_macs: complexity.flops.vision,
        estimate_gap: relative_gap(pruned_ops.macs, complexity.flops.vision),
        final_entropy: last.entropy,
        final_mean_cosine: last.mean_cosine,
        baseline_final_entropy: base_last.entropy,
        baseline_final_mean_cosine: base_last.mean_cosine,
    })
}

/// Images named by the config: a directory of PPM files or a synthetic set.
pub fn collect_images(cfg: &RunConfig) -> CliResult<Vec<NamedImage>> {
    match &cfg.input_dir {
        Some(dir) => load_dir(dir, cfg.image_size),
        None => Ok(synthetic_set(cfg.image_size, cfg.seed, cfg.num_images)),
    }
}

pub fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Encodes every image with and without pruning. Per-image artifacts go to
/// `out_dir/<image>/`; `summary.json` and `complexity.json` are written
/// once at the end.
pub fn run(cfg: &RunConfig) -> CliResult<RunSummary> {
    let engine = Engine::build(cfg)?;
    let seq = engine.tokenize(cfg)?;
    let xt_cls = engine.text_cls(cfg)?;
    let images = collect_images(cfg)?;
    let complexity = analyze_report(cfg, seq.len())?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let results: Vec<ImageSummary> = images
        .par_iter()
        .map(|item| process_image(&engine, cfg, &xt_cls, &complexity, item, &dir))
        .collect::<CliResult<_>>()?;

    let mean = results.iter().map(|r| r.measured_reduction).sum::<f64>() / results.len() as f64;
    let summary = RunSummary {
        config: cfg.clone(),
        text_tokens: seq.len(),
        images: results,
        mean_measured_reduction: mean,
        token_layer_units: complexity.token_layer_units,
        reduction_pct: complexity.reduction_pct,
        vision_flops_reduction_pct: complexity.vision_flops_reduction_pct,
    };
    write_atomic(&dir.join("complexity.json"), &json_bytes(&complexity))?;
    write_atomic(&dir.join("summary.json"), &json_bytes(&summary))?;
    Ok(summary)
}

fn analyze_report(cfg: &RunConfig, text_tokens: usize) -> CliResult<ComplexityReport> {
    flops_estimate(&cfg.model_dims(), &cfg.schedule, &SeqLens { text_tokens })
        .map_err(|e| CliError::from_core(e, "schedule", None))
}

/// Pure arithmetic over the configured dimensions; no model is built.
/// Writes `complexity.json` only when `out_dir` is set.
pub fn analyze(cfg: &RunConfig) -> CliResult<ComplexityReport> {
    let text_tokens = split_words(&cfg.text).len() + 2;
    let report = analyze_report(cfg, text_tokens)?;
    if let Some(dir) = &cfg.out_dir {
        write_atomic(&dir.join("complexity.json"), &json_bytes(&report))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyReport {
    pub strategy: TextPruneStrategy,
    /// Surviving positions over `[CLS] t_1 … t_T [SEP]`.
    pub kept: Vec<usize>,
    pub kept_tokens: Vec<String>,
    pub dropped: usize,
    pub layer_tokens: Vec<usize>,
    pub output_shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub caption: String,
    pub content_tokens: usize,
    pub ratio: f64,
    pub seed: u64,
    pub strategies: Vec<StrategyReport>,
}

/// Runs each configured text-pruning strategy on the caption. The learned
/// strategy is guided by the vision CLS of the first synthetic image.
pub fn ablate_text(cfg: &RunConfig) -> CliResult<AblationReport> {
    let engine = Engine::build(cfg)?;
    let seq = engine.tokenize(cfg)?;
    if seq.content_len() == 0 {
        return Err(CliError::config("text", "caption has no tokens"));
    }
    let words = split_words(&cfg.text);
    let core = |e| CliError::from_core(e, "text", None);

    let xt_cls = engine.text_cls(cfg)?;
    let img = synthetic_image(cfg.image_size, cfg.seed, 0);
    let (vision_feats, _) = engine
        .model
        .vision
        .encode_with_elip_observed(&img, &xt_cls, &cfg.schedule, &cfg.prune_options(), &mut |_| {})
        .map_err(core)?;
    let xv_cls = vision_feats.row(0).to_vec();

    let last = seq.len() - 1;
    let mut strategies = Vec::new();
    for s in cfg.strategy.strategies() {
        let pruned = engine
            .model
            .text
            .encode_text_pruned(&seq, s, cfg.ratio, Some(&xv_cls), cfg.seed)
            .map_err(core)?;
        if pruned.kept.first() != Some(&0) || pruned.kept.last() != Some(&last) {
            return Err(CliError::Invariant(format!("{} pruning dropped [CLS] or [SEP]", s.name())));
        }
        let kept_tokens = pruned
            .kept
            .iter()
            .map(|&p| match p {
                0 => "[CLS]".to_string(),
                p if p == last => "[SEP]".to_string(),
                p => words[p - 1].clone(),
            })
            .collect();
        strategies.push(StrategyReport {
            strategy: s,
            dropped: seq.len() - pruned.kept.len(),
            kept: pruned.kept,
            kept_tokens,
            layer_tokens: pruned.layer_tokens,
            output_shape: [pruned.features.rows(), pruned.features.cols()],
        });
    }
    let report = AblationReport {
        caption: cfg.text.clone(),
        content_tokens: seq.content_len(),
        ratio: cfg.ratio,
        seed: cfg.seed,
        strategies,
    };
    if let Some(dir) = &cfg.out_dir {
        write_atomic(&dir.join("ablate_text.json"), &json_bytes(&report))?;
    }
    Ok(report)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    String::from_utf8(json_bytes(value)).expect("json is utf-8")
}
