//! Token-layer accounting and multiply-accumulate estimates.
//!
//! Two accounting modes are reported side by side:
//!
//! - continuous: `Σ layers_b · α_b` in units of one layer over the full
//!   patch set, ignoring the CLS and merged tokens (headline figure);
//! - exact: MACs summed over the integer token counts every layer sees.
//!
//! All `flops` figures are multiply-accumulates over matrix products and
//! merging. Softmax, normalization and activations are excluded; the
//! runtime counters track them separately as scalar ops.

use serde::{Deserialize, Serialize};

use crate::elip::PruneOptions;
use crate::error::Result;
use crate::schedule::PruneSchedule;
use crate::tensor::counter::{count_ops, OpCounts};
use crate::vit::{mlp_hidden, ImageTensor, VisionEncoder};

/// `Σ layers × ratio`, with ratio 1 for blocks that do not prune.
pub fn token_layer_units(schedule: &PruneSchedule) -> f64 {
    let ppm: u64 = schedule
        .blocks()
        .iter()
        .map(|b| b.layers as u64 * b.retain_ratio.map_or(1_000_000, |r| r.ppm() as u64))
        .sum();
    ppm as f64 / 1e6
}

/// `1 − units(schedule) / units(unpruned, same depth)`.
pub fn reduction_pct(schedule: &PruneSchedule) -> f64 {
    1.0 - token_layer_units(schedule) / schedule.total_layers() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub num_patches: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
}

impl ModelDims {
    /// ViT-Base vision tower, 4 text layers, 6 cross-attention fusion layers.
    pub fn vit_base() -> Self {
        Self {
            embed_dim: 768,
            mlp_ratio: 4.0,
            patch_size: 16,
            num_patches: 196,
            text_layers: 4,
            fusion_layers: 6,
        }
    }

    pub fn vit_tiny() -> Self {
        Self {
            embed_dim: 192,
            ..Self::vit_base()
        }
    }

    fn hidden(&self) -> u64 {
        mlp_hidden(self.embed_dim, self.mlp_ratio) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqLens {
    /// Text tokens including CLS and SEP.
    pub text_tokens: usize,
}

/// Self-attention layer over `n` tokens: `4nd² + 2n²d` for attention and
/// `2ndh` for the MLP.
pub fn layer_macs(n: usize, d: usize, hidden: usize) -> u64 {
    let (n, d, h) = (n as u64, d as u64, hidden as u64);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * h
}

/// Fusion layer: text self-attention, text-to-vision cross-attention, MLP.
pub fn fusion_layer_macs(text: usize, vision: usize, d: usize, hidden: usize) -> u64 {
    let (t, v, d, h) = (text as u64, vision as u64, d as u64, hidden as u64);
    let self_attn = 4 * t * d * d + 2 * t * t * d;
    let cross = 2 * t * d * d + 2 * v * d * d + 2 * t * v * d;
    self_attn + cross + 2 * t * d * h
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleFlops {
    pub vision: u64,
    pub text: u64,
    pub fusion: u64,
}

impl ModuleFlops {
    pub fn total(&self) -> u64 {
        self.vision + self.text + self.fusion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleShares {
    pub vision: f64,
    pub text: f64,
    pub fusion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub token_layer_units: f64,
    pub baseline_token_layer_units: f64,
    pub reduction_pct: f64,
    /// `Σ layers · tokens / (1 + M²)` over exact token counts.
    pub exact_token_layer_units: f64,
    pub exact_reduction_pct: f64,
    pub vision_layer_tokens: Vec<usize>,
    pub flops: ModuleFlops,
    pub baseline_flops: ModuleFlops,
    pub shares: ModuleShares,
    pub flops_reduction_pct: f64,
    pub vision_flops_reduction_pct: f64,
}

/// Token count seen by every vision layer, CLS and merged token included.
pub fn vision_layer_tokens(schedule: &PruneSchedule, num_patches: usize) -> Vec<usize> {
    schedule
        .blocks()
        .iter()
        .zip(schedule.block_token_counts(num_patches))
        .flat_map(|(b, n)| std::iter::repeat_n(n, b.layers))
        .collect()
}

fn vision_macs(dims: &ModelDims, schedule: &PruneSchedule) -> (u64, Vec<usize>) {
    let d = dims.embed_dim;
    let h = dims.hidden() as usize;
    let patch_dim = 3 * dims.patch_size * dims.patch_size;
    let mut total = (dims.num_patches * patch_dim * d) as u64;
    let counts = schedule.block_token_counts(dims.num_patches);
    let mut candidates = dims.num_patches;
    for (b, &n) in schedule.blocks().iter().zip(&counts) {
        if let Some(r) = b.retain_ratio {
            let residual = candidates - r.keep_count(dims.num_patches).min(candidates);
            total += (residual * d) as u64;
            candidates = n - 1;
        }
        total += b.layers as u64 * layer_macs(n, d, h);
    }
    (total, vision_layer_tokens(schedule, dims.num_patches))
}

fn module_flops(dims: &ModelDims, schedule: &PruneSchedule, seq: &SeqLens) -> (ModuleFlops, Vec<usize>) {
    let d = dims.embed_dim;
    let h = dims.hidden() as usize;
    let (vision, tokens) = vision_macs(dims, schedule);
    let final_vision = *tokens.last().unwrap_or(&(dims.num_patches + 1));
    let flops = ModuleFlops {
        vision,
        text: dims.text_layers as u64 * layer_macs(seq.text_tokens, d, h),
        fusion: dims.fusion_layers as u64 * fusion_layer_macs(seq.text_tokens, final_vision, d, h),
    };
    (flops, tokens)
}

pub fn flops_estimate(dims: &ModelDims, schedule: &PruneSchedule, seq: &SeqLens) -> Result<ComplexityReport> {
    let baseline_schedule = PruneSchedule::unpruned(schedule.total_layers())?;
    let (flops, tokens) = module_flops(dims, schedule, seq);
    let (baseline_flops, base_tokens) = module_flops(dims, &baseline_schedule, seq);

    let full = (dims.num_patches + 1) as f64;
    let exact_units = tokens.iter().sum::<usize>() as f64 / full;
    let base_units = base_tokens.iter().sum::<usize>() as f64 / full;
    let total = flops.total() as f64;
    let share = |v: u64| if total > 0.0 { v as f64 / total } else { 0.0 };

    Ok(ComplexityReport {
        token_layer_units: token_layer_units(schedule),
        baseline_token_layer_units: schedule.total_layers() as f64,
        reduction_pct: reduction_pct(schedule),
        exact_token_layer_units: exact_units,
        exact_reduction_pct: 1.0 - exact_units / base_units,
        vision_layer_tokens: tokens,
        shares: ModuleShares {
            vision: share(flops.vision),
            text: share(flops.text),
            fusion: share(flops.fusion),
        },
        flops_reduction_pct: 1.0 - total / baseline_flops.total() as f64,
        vision_flops_reduction_pct: 1.0 - flops.vision as f64 / baseline_flops.vision as f64,
        flops,
        baseline_flops,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredVision {
    pub pruned: OpCounts,
    pub baseline: OpCounts,
    /// `1 − pruned.macs / baseline.macs`.
    pub measured_reduction: f64,
}

/// Counts the work of one pruned and one unpruned vision pass over `img`.
pub fn measure_vision(
    encoder: &VisionEncoder,
    img: &ImageTensor,
    xt_cls: &[f64],
    schedule: &PruneSchedule,
    opts: &PruneOptions,
) -> Result<MeasuredVision> {
    let baseline_schedule = PruneSchedule::unpruned(schedule.total_layers())?;
    let (pruned, pruned_counts) = count_ops(|| encoder.encode_with_elip_observed(img, xt_cls, schedule, opts, &mut |_| {}));
    pruned?;
    let (base, baseline_counts) = count_ops(|| encoder.encode_with_elip_observed(img, xt_cls, &baseline_schedule, opts, &mut |_| {}));
    base?;
    Ok(MeasuredVision {
        pruned: pruned_counts,
        baseline: baseline_counts,
        measured_reduction: 1.0 - pruned_counts.macs as f64 / baseline_counts.macs as f64,
    })
}

/// `|measured − estimated| / estimated`.
pub fn relative_gap(measured: u64, estimated: u64) -> f64 {
    (measured as f64 - estimated as f64).abs() / estimated as f64
}
