//! Attention concentration, token similarity and pruning-mask export.
//!
//! With untrained weights these metrics carry no trend worth reading; they
//! are exact measurements of whatever the encoder produces.

use serde::Serialize;

use crate::elip::{PruneOptions, PruneTrace, TokenOrigin};
use crate::error::{Error, Result};
use crate::schedule::PruneSchedule;
use crate::tensor::FeatureMatrix;
use crate::vit::{cls_attention_row, ClsAttention, ImageTensor, VisionEncoder};

/// Shannon entropy (nats) of ξ after normalizing it to sum to one.
pub fn attention_entropy(xi: &ClsAttention) -> Result<f64> {
    if xi.is_empty() {
        return Err(Error::Degenerate("entropy of an empty attention vector".into()));
    }
    let total: f64 = xi.scores().iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Degenerate("entropy of an all-zero attention vector".into()));
    }
    Ok(xi
        .scores()
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CosineSummary {
    pub mean: f64,
    /// Zero rows skipped because their direction is undefined.
    pub zero_rows_excluded: usize,
}

/// Mean cosine similarity over all unordered pairs of non-CLS rows.
pub fn mean_pairwise_cosine(x: &FeatureMatrix) -> Result<CosineSummary> {
    let mut unit_rows = Vec::new();
    let mut zero = 0;
    for row in x.iter_rows().skip(1) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            unit_rows.push(row.iter().map(|v| v / norm).collect::<Vec<_>>());
        } else {
            zero += 1;
        }
    }
    if unit_rows.len() < 2 {
        return Err(Error::Degenerate(format!(
            "token similarity needs 2 nonzero non-CLS rows, got {}",
            unit_rows.len()
        )));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..unit_rows.len() {
        for j in i + 1..unit_rows.len() {
            sum += unit_rows[i].iter().zip(&unit_rows[j]).map(|(a, b)| a * b).sum::<f64>();
            pairs += 1;
        }
    }
    Ok(CosineSummary {
        mean: (sum / pairs as f64).clamp(-1.0, 1.0),
        zero_rows_excluded: zero,
    })
}

/// Terminal state of an original patch as of a given block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchState {
    Kept,
    /// Folded into the merged token created at this block.
    MergedAt(usize),
}

impl PatchState {
    /// `0` for kept, otherwise the block index that merged the patch.
    pub fn code(self) -> usize {
        match self {
            PatchState::Kept => 0,
            PatchState::MergedAt(b) => b,
        }
    }
}

impl Serialize for PatchState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.code() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MergedTokenState {
    /// Block that created the merged token.
    pub created_at: usize,
    /// Whether it is still a separate token after this block.
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskGrid {
    pub block: usize,
    /// Row-major `M × M` states.
    pub cells: Vec<PatchState>,
    pub merged_tokens: Vec<MergedTokenState>,
}

impl MaskGrid {
    pub fn count(&self, state: PatchState) -> usize {
        self.cells.iter().filter(|&&c| c == state).count()
    }

    /// Header `row,c0,…`, then one line per grid row of state codes.
    pub fn to_csv(&self, grid_side: usize) -> String {
        let mut out = String::from("row");
        for c in 0..grid_side {
            out.push_str(&format!(",c{c}"));
        }
        out.push('\n');
        for r in 0..grid_side {
            out.push_str(&r.to_string());
            for c in 0..grid_side {
                out.push(',');
                out.push_str(&self.cells[r * grid_side + c].code().to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneMasks {
    pub grid_side: usize,
    /// Cell codes: 0 = kept, k = merged at block k.
    pub legend: &'static str,
    pub blocks: Vec<MaskGrid>,
}

/// Replays the trace into one grid per pruning block.
pub fn export_prune_masks(trace: &PruneTrace, grid_side: usize) -> Result<PruneMasks> {
    if grid_side * grid_side != trace.num_patches {
        return Err(Error::shape("export_prune_masks", format!("grid {grid_side}x{grid_side}"), format!("{} patches", trace.num_patches)));
    }
    let mut cells = vec![PatchState::Kept; trace.num_patches];
    let mut merged: Vec<MergedTokenState> = Vec::new();
    let mut blocks = Vec::with_capacity(trace.blocks.len());
    for b in &trace.blocks {
        for origin in &b.merged {
            match *origin {
                TokenOrigin::Patch(i) => cells[i] = PatchState::MergedAt(b.block),
                TokenOrigin::Merged(k) => {
                    if let Some(m) = merged.iter_mut().find(|m| m.created_at == k) {
                        m.alive = false;
                    }
                }
            }
        }
        if !b.merged.is_empty() {
            merged.push(MergedTokenState {
                created_at: b.block,
                alive: true,
            });
        }
        blocks.push(MaskGrid {
            block: b.block,
            cells: cells.clone(),
            merged_tokens: merged.clone(),
        });
    }
    Ok(PruneMasks {
        grid_side,
        legend: "0 = kept, k = merged at block k",
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub tokens: usize,
    pub entropy: f64,
    pub mean_cosine: f64,
}

/// Runs the encoder and records ξ entropy and token similarity after every
/// layer.
pub fn layer_metric_trace(
    encoder: &VisionEncoder,
    img: &ImageTensor,
    xt_cls: &[f64],
    schedule: &PruneSchedule,
    opts: &PruneOptions,
) -> Result<(Vec<LayerMetrics>, PruneTrace)> {
    let mut records = Vec::new();
    let mut failure = None;
    let (_, trace) = encoder.encode_with_elip_observed(img, xt_cls, schedule, opts, &mut |r| {
        if failure.is_some() {
            return;
        }
        let metrics = cls_attention_row(r.attention)
            .and_then(|xi| attention_entropy(&xi))
            .and_then(|e| Ok((e, mean_pairwise_cosine(r.output)?.mean)));
        match metrics {
            Ok((entropy, mean_cosine)) => records.push(LayerMetrics {
                layer: r.layer,
                tokens: r.output.rows(),
                entropy,
                mean_cosine,
            }),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((records, trace))
}

pub fn layer_metrics_csv(rows: &[LayerMetrics]) -> String {
    let mut out = String::from("layer,tokens,entropy,mean_cosine\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.layer, r.tokens, format_sig9(r.entropy), format_sig9(r.mean_cosine)));
    }
    out
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros
/// trimmed, exponent form outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
