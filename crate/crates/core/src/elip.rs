//! Text-guided progressive vision-token pruning and merging.
//!
//! Each pruning block `k` starts from a reduced token set:
//!
//! 1. Before the preceding block runs, its CLS row is replaced with
//!    `λ·cls_v + (1 − λ)·cls_t` ([`fuse_cls`]).
//! 2. The preceding block runs; ξ is read off the CLS row of its final
//!    layer ([`VisionEncoder::run_block`]).
//! 3. The `floor(α_k · M²)` highest-scoring tokens are kept in original
//!    order ([`select_retained`]); the rest collapse into one token weighted
//!    by their renormalized scores ([`merge_residual`]).
//!
//! Block `k`'s layers then see `2 + floor(α_k · M²)` tokens: CLS, the kept
//! tokens and the merged token, in that order. A merged token from an
//! earlier block competes for retention like any patch.

use std::fmt;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::schedule::PruneSchedule;
use crate::tensor::{counter, softmax_in_place, FeatureMatrix};
use crate::vit::{cls_attention_row, ImageTensor, LayerRecord, VisionEncoder};

pub use crate::vit::ClsAttention;

pub const DEFAULT_LAMBDA: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    lambda: f64,
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// How residual scores are renormalized before merging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeNorm {
    /// Divide by the sum.
    #[default]
    Sum,
    /// Softmax over the residual scores.
    Softmax,
}

impl std::str::FromStr for MergeNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(Self::Sum),
            "softmax" => Ok(Self::Softmax),
            other => Err(Error::Config(format!("unknown merge norm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub fusion: FusionConfig,
    pub merge_norm: MergeNorm,
}

/// `λ·xv + (1 − λ)·xt`, elementwise.
pub fn fuse_cls(xv_cls: &[f64], xt_cls: &[f64], cfg: &FusionConfig) -> Result<Vec<f64>> {
    if xv_cls.len() != xt_cls.len() {
        return Err(Error::shape("fuse_cls", xv_cls.len(), xt_cls.len()));
    }
    let l = cfg.lambda;
    Ok(xv_cls.iter().zip(xt_cls).map(|(v, t)| l * v + (1.0 - l) * t).collect())
}

/// Indices of the `keep_count` largest scores (ascending), and the rest.
///
/// Ties go to the lower index.
pub fn select_retained(xi: &ClsAttention, keep_count: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = xi.len();
    if keep_count == 0 || keep_count > n {
        return Err(Error::Argument(format!(
            "keep_count {keep_count} outside 1..={n}"
        )));
    }
    let scores = xi.scores();
    let mut order: Vec<usize> = (0..n).collect();
    if keep_count < n {
        order.select_nth_unstable_by(keep_count - 1, |&a, &b| {
            scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
        });
    }
    let mut kept = order[..keep_count].to_vec();
    let mut residual = order[keep_count..].to_vec();
    kept.sort_unstable();
    residual.sort_unstable();
    Ok((kept, residual))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedToken {
    pub token: Vec<f64>,
    /// Renormalized weights, aligned with the residual indices.
    pub weights: Vec<f64>,
}

/// Collapses the residual tokens into one.
///
/// `residual` indexes ξ, so residual `j` is row `j + 1` of `x`. When every
/// residual score is zero the weights fall back to uniform.
pub fn merge_residual(x: &FeatureMatrix, xi: &ClsAttention, residual: &[usize], norm: MergeNorm) -> Result<MergedToken> {
    if residual.is_empty() {
        return Err(Error::Argument("merge_residual needs a nonempty residual set".into()));
    }
    if xi.len() + 1 != x.rows() {
        return Err(Error::shape("merge_residual", format!("{} rows", x.rows()), format!("{} scores", xi.len())));
    }
    let mut weights = Vec::with_capacity(residual.len());
    for &j in residual {
        let s = *xi.scores().get(j).ok_or_else(|| {
            Error::Argument(format!("residual index {j} outside {} scores", xi.len()))
        })?;
        weights.push(s);
    }
    match norm {
        MergeNorm::Sum => {
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                let u = 1.0 / weights.len() as f64;
                weights.iter_mut().for_each(|w| *w = u);
            }
        }
        MergeNorm::Softmax => softmax_in_place(&mut weights),
    }
    let mut token = vec![0.0; x.cols()];
    for (&j, &w) in residual.iter().zip(&weights) {
        for (t, v) in token.iter_mut().zip(x.row(j + 1)) {
            *t += w * v;
        }
    }
    counter::record_macs((residual.len() * x.cols()) as u64);
    Ok(MergedToken { token, weights })
}

/// Where a non-CLS vision token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenOrigin {
    /// Patch at this row-major grid position.
    Patch(usize),
    /// Token produced by merging at the start of this block.
    Merged(usize),
}

impl fmt::Display for TokenOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenOrigin::Patch(i) => write!(f, "{i}"),
            TokenOrigin::Merged(b) => write!(f, "merged@{b}"),
        }
    }
}

/// Patches serialize as their grid index, merged tokens as `"merged@<block>"`.
impl Serialize for TokenOrigin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TokenOrigin::Patch(i) => s.serialize_u64(*i as u64),
            TokenOrigin::Merged(_) => s.serialize_str(&self.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockTrace {
    /// Schedule position, 0-based.
    pub block: usize,
    pub retain_ratio: f64,
    pub keep_count: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub kept: Vec<TokenOrigin>,
    pub merged: Vec<TokenOrigin>,
    pub merge_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneTrace {
    pub grid_side: usize,
    pub num_patches: usize,
    pub lambda: f64,
    pub blocks: Vec<BlockTrace>,
}

impl PruneTrace {
    /// Re-checks the bookkeeping invariants of every block.
    pub fn validate(&self) -> Result<()> {
        let mut alive: Vec<TokenOrigin> = (0..self.num_patches).map(TokenOrigin::Patch).collect();
        for b in &self.blocks {
            let fail = |what: String| Err(Error::Degenerate(format!("trace block {}: {what}", b.block)));
            if b.tokens_in != alive.len() + 1 {
                return fail(format!("tokens_in {} but {} candidates", b.tokens_in, alive.len()));
            }
            let mut seen: Vec<TokenOrigin> = b.kept.iter().chain(&b.merged).copied().collect();
            let mut expected = alive.clone();
            let key = |o: &TokenOrigin| match o {
                TokenOrigin::Patch(i) => (0, *i),
                TokenOrigin::Merged(k) => (1, *k),
            };
            seen.sort_by_key(key);
            expected.sort_by_key(key);
            if seen != expected {
                return fail("kept and merged do not partition the candidates".into());
            }
            if b.kept.len() != b.keep_count {
                return fail(format!("{} kept, keep_count {}", b.kept.len(), b.keep_count));
            }
            let want_out = 1 + b.keep_count + usize::from(!b.merged.is_empty());
            if b.tokens_out != want_out {
                return fail(format!("tokens_out {} expected {want_out}", b.tokens_out));
            }
            if !b.merged.is_empty() {
                let sum: f64 = b.merge_weights.iter().sum();
                if b.merge_weights.len() != b.merged.len() || (sum - 1.0).abs() > 1e-9 || b.merge_weights.iter().any(|w| *w < 0.0) {
                    return fail(format!("merge weights sum to {sum}"));
                }
            }
            alive = b.kept.clone();
            if !b.merged.is_empty() {
                alive.push(TokenOrigin::Merged(b.block));
            }
        }
        Ok(())
    }

    /// Vision token count after each pruning block.
    pub fn token_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.tokens_out).collect()
    }
}

impl VisionEncoder {
    /// Runs every layer of block `block_index` and returns the features with
    /// ξ from the block's final layer.
    pub fn run_block(&self, x: FeatureMatrix, schedule: &PruneSchedule, block_index: usize) -> Result<(FeatureMatrix, ClsAttention)> {
        self.run_block_observed(x, schedule, block_index, &mut |_| {})
    }

    pub fn run_block_observed(
        &self,
        x: FeatureMatrix,
        schedule: &PruneSchedule,
        block_index: usize,
        observer: &mut dyn FnMut(LayerRecord<'_>),
    ) -> Result<(FeatureMatrix, ClsAttention)> {
        if block_index >= schedule.blocks().len() {
            return Err(Error::Argument(format!(
                "block {block_index} out of range for {} blocks",
                schedule.blocks().len()
            )));
        }
        let (x, attn) = self.run_layers(x, schedule.layer_range(block_index), observer)?;
        let attn = attn.ok_or_else(|| Error::Config(format!("block {block_index} has no layers")))?;
        Ok((x, cls_attention_row(&attn)?))
    }

    pub fn encode_with_elip(
        &self,
        img: &ImageTensor,
        xt_cls: &[f64],
        schedule: &PruneSchedule,
        fusion: &FusionConfig,
    ) -> Result<(FeatureMatrix, PruneTrace)> {
        let opts = PruneOptions {
            fusion: *fusion,
            merge_norm: MergeNorm::Sum,
        };
        self.encode_with_elip_observed(img, xt_cls, schedule, &opts, &mut |_| {})
    }

    pub fn encode_with_elip_observed(
        &self,
        img: &ImageTensor,
        xt_cls: &[f64],
        schedule: &PruneSchedule,
        opts: &PruneOptions,
        observer: &mut dyn FnMut(LayerRecord<'_>),
    ) -> Result<(FeatureMatrix, PruneTrace)> {
        let cfg = self.config();
        let num_patches = cfg.num_patches();
        schedule.validate_for(self.layers.len(), num_patches)?;
        if xt_cls.len() != cfg.embed_dim {
            return Err(Error::shape("encode_with_elip", format!("d = {}", cfg.embed_dim), format!("text CLS of {}", xt_cls.len())));
        }

        let mut x = self.patchify(img)?;
        let mut origins: Vec<TokenOrigin> = (0..num_patches).map(TokenOrigin::Patch).collect();
        let mut trace = PruneTrace {
            grid_side: cfg.grid_side(),
            num_patches,
            lambda: opts.fusion.lambda(),
            blocks: Vec::new(),
        };
        let blocks = schedule.blocks();

        for b in 0..blocks.len() {
            let next_ratio = blocks.get(b + 1).and_then(|n| n.retain_ratio);
            if next_ratio.is_some() {
                let fused = fuse_cls(x.row(0), xt_cls, &opts.fusion)?;
                x.row_mut(0).copy_from_slice(&fused);
            }
            let (y, xi) = self.run_block_observed(x, schedule, b, observer)?;
            x = y;

            let Some(ratio) = next_ratio else { continue };
            let target = b + 1;
            let keep = ratio.keep_count(num_patches);
            if keep > xi.len() {
                return Err(Error::Config(format!(
                    "block {target}: keeps {keep} tokens but only {} are available",
                    xi.len()
                )));
            }
            let tokens_in = x.rows();
            let (kept, residual) = select_retained(&xi, keep)?;

            let rows: Vec<usize> = std::iter::once(0).chain(kept.iter().map(|j| j + 1)).collect();
            let mut next = x.select_rows(&rows)?;
            let mut merge_weights = Vec::new();
            if !residual.is_empty() {
                let merged = merge_residual(&x, &xi, &residual, opts.merge_norm)?;
                next.push_row(&merged.token)?;
                merge_weights = merged.weights;
            }

            let kept_origins: Vec<TokenOrigin> = kept.iter().map(|&j| origins[j]).collect();
            let merged_origins: Vec<TokenOrigin> = residual.iter().map(|&j| origins[j]).collect();
            origins = kept_origins.clone();
            if !residual.is_empty() {
                origins.push(TokenOrigin::Merged(target));
            }
            trace.blocks.push(BlockTrace {
                block: target,
                retain_ratio: ratio.as_f64(),
                keep_count: keep,
                tokens_in,
                tokens_out: next.rows(),
                kept: kept_origins,
                merged: merged_origins,
                merge_weights,
            });
            x = next;
        }
        Ok((x, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::BlockSpec;
    use crate::vit::VitConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn xi(v: &[f64]) -> ClsAttention {
        ClsAttention(v.to_vec())
    }

    #[test]
    fn fuse_endpoints_and_default() {
        let xv = [1.0, 0.0];
        let xt = [0.0, 1.0];
        assert_eq!(fuse_cls(&xv, &xt, &FusionConfig::new(1.0).unwrap()).unwrap(), xv);
        assert_eq!(fuse_cls(&xv, &xt, &FusionConfig::new(0.0).unwrap()).unwrap(), xt);
        let mixed = fuse_cls(&xv, &xt, &FusionConfig::default()).unwrap();
        assert!((mixed[0] - 0.8).abs() < 1e-15 && (mixed[1] - 0.2).abs() < 1e-15);
        assert!(fuse_cls(&xv, &[1.0], &FusionConfig::default()).is_err());
        assert!(FusionConfig::new(1.5).is_err());
    }

    #[test]
    fn select_examples() {
        let (k, r) = select_retained(&xi(&[0.1, 0.4, 0.2, 0.3]), 2).unwrap();
        assert_eq!((k, r), (vec![1, 3], vec![0, 2]));
        let (k, r) = select_retained(&xi(&[0.1, 0.4, 0.2]), 3).unwrap();
        assert_eq!((k, r), (vec![0, 1, 2], vec![]));
        let (k, _) = select_retained(&xi(&[0.5, 0.2, 0.5, 0.5]), 2).unwrap();
        assert_eq!(k, vec![0, 2]);
        assert!(select_retained(&xi(&[0.1]), 0).is_err());
        assert!(select_retained(&xi(&[0.1]), 2).is_err());
    }

    fn matrix(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn merge_examples() {
        let x = matrix(&[&[9.0, 9.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let m = merge_residual(&x, &xi(&[0.2, 0.6]), &[0, 1], MergeNorm::Sum).unwrap();
        assert!((m.weights[0] - 0.25).abs() < 1e-15 && (m.weights[1] - 0.75).abs() < 1e-15);
        assert!((m.token[0] - 0.25).abs() < 1e-15 && (m.token[1] - 0.75).abs() < 1e-15);

        let m = merge_residual(&x, &xi(&[0.2, 0.6]), &[1], MergeNorm::Sum).unwrap();
        assert_eq!(m.token, vec![0.0, 1.0]);
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn merge_degenerate_rules() {
        let x = matrix(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let m = merge_residual(&x, &xi(&[0.0, 0.0]), &[0, 1], MergeNorm::Sum).unwrap();
        assert_eq!(m.weights, vec![0.5, 0.5]);
        assert!(merge_residual(&x, &xi(&[0.0, 0.0]), &[], MergeNorm::Sum).is_err());
    }

    #[test]
    fn softmax_norm_differs_from_sum() {
        let x = matrix(&[&[0.0], &[1.0], &[0.0]]);
        let m = merge_residual(&x, &xi(&[0.2, 0.6]), &[0, 1], MergeNorm::Softmax).unwrap();
        let e = (0.2f64).exp() / ((0.2f64).exp() + (0.6f64).exp());
        assert!((m.weights[0] - e).abs() < 1e-15);
    }

    fn tiny_encoder(seed: u64) -> VisionEncoder {
        let cfg = VitConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 4,
            mlp_ratio: 2.0,
            block_layout: PruneSchedule::parse("1:1.0,1:0.75,1:0.5,1:0.25", 4).unwrap(),
        };
        VisionEncoder::seeded(cfg, seed).unwrap()
    }

    fn image(seed: u64, size: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(size, size, (0..3 * size * size).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn run_block_zero_weights_gives_uniform_xi() {
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 4,
            num_heads: 1,
            num_layers: 1,
            mlp_ratio: 1.0,
            block_layout: PruneSchedule::unpruned(1).unwrap(),
        };
        let enc = VisionEncoder::zeros(cfg).unwrap();
        let x = FeatureMatrix::new(5, 4, (0..20).map(|v| v as f64).collect()).unwrap();
        let schedule = PruneSchedule::unpruned(1).unwrap();
        let (y, xi) = enc.run_block(x.clone(), &schedule, 0).unwrap();
        assert_eq!(y, x);
        assert_eq!(xi.0, vec![0.2; 4]);
        assert!(matches!(enc.run_block(x, &schedule, 1), Err(Error::Argument(_))));
        assert!(matches!(PruneSchedule::new(vec![BlockSpec::unpruned(0)]), Err(Error::Config(_))));
    }

    #[test]
    fn token_counts_follow_the_law() {
        let enc = tiny_encoder(1);
        let schedule = enc.config().block_layout.clone();
        let xt = vec![0.1; 8];
        let (out, trace) = enc.encode_with_elip(&image(2, 16), &xt, &schedule, &FusionConfig::default()).unwrap();
        assert_eq!(trace.token_counts(), vec![2 + 12, 2 + 8, 2 + 4]);
        assert_eq!(out.rows(), 6);
        trace.validate().unwrap();
    }

    #[test]
    fn lambda_one_ignores_text() {
        let enc = tiny_encoder(3);
        let schedule = enc.config().block_layout.clone();
        let img = image(4, 16);
        let f = FusionConfig::new(1.0).unwrap();
        let (a, ta) = enc.encode_with_elip(&img, &[0.3; 8], &schedule, &f).unwrap();
        let (b, tb) = enc.encode_with_elip(&img, &[-5.0; 8], &schedule, &f).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_zero_ignores_vision_cls() {
        let mut enc = tiny_encoder(5);
        let schedule = enc.config().block_layout.clone();
        let img = image(6, 16);
        let f = FusionConfig::new(0.0).unwrap();
        let xt: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let (_, ta) = enc.encode_with_elip(&img, &xt, &schedule, &f).unwrap();
        enc.cls_token.iter_mut().for_each(|v| *v += 3.0);
        enc.pos_embed.row_mut(0).iter_mut().for_each(|v| *v -= 1.0);
        let (_, tb) = enc.encode_with_elip(&img, &xt, &schedule, &f).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn merged_tokens_compete_in_later_blocks() {
        // With enough seeds a merged token must be retained at least once.
        let schedule = PruneSchedule::parse("1:1.0,1:0.75,1:0.5,1:0.25", 4).unwrap();
        let mut retained = false;
        for seed in 0..40 {
            let enc = tiny_encoder(seed);
            let (_, trace) = enc.encode_with_elip(&image(seed + 100, 16), &[0.0; 8], &schedule, &FusionConfig::default()).unwrap();
            trace.validate().unwrap();
            retained |= trace.blocks[1..].iter().any(|b| b.kept.iter().any(|o| matches!(o, TokenOrigin::Merged(_))));
        }
        assert!(retained);
    }

    #[test]
    fn trace_json_shape() {
        let enc = tiny_encoder(7);
        let schedule = enc.config().block_layout.clone();
        let (_, trace) = enc.encode_with_elip(&image(8, 16), &[0.0; 8], &schedule, &FusionConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&trace).unwrap();
        assert_eq!(v["blocks"][0]["block"], 1);
        assert_eq!(v["blocks"][0]["tokens_out"], 14);
        assert!(v["blocks"][0]["kept"][0].is_u64());
    }

    proptest! {
        #[test]
        fn selection_ignores_positive_scaling(
            scores in prop::collection::vec(0.0f64..1.0, 2..60),
            keep_frac in 0.01f64..1.0,
            factor in prop::sample::select(vec![0.1, 3.0, 1e6]),
        ) {
            let keep = ((scores.len() as f64 * keep_frac) as usize).max(1);
            let scaled: Vec<f64> = scores.iter().map(|s| s * factor).collect();
            let (a, _) = select_retained(&ClsAttention(scores), keep).unwrap();
            let (b, _) = select_retained(&ClsAttention(scaled), keep).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn merged_token_lies_in_envelope(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..12),
            raw in prop::collection::vec(0.0f64..1.0, 12),
        ) {
            let x = FeatureMatrix::from_rows(&rows).unwrap();
            let scores = ClsAttention(raw[..rows.len() - 1].to_vec());
            let residual: Vec<usize> = (0..rows.len() - 1).collect();
            let m = merge_residual(&x, &scores, &residual, MergeNorm::Sum).unwrap();
            prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for c in 0..4 {
                let lo = residual.iter().map(|&j| x.get(j + 1, c)).fold(f64::INFINITY, f64::min);
                let hi = residual.iter().map(|&j| x.get(j + 1, c)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m.token[c] >= lo - 1e-12 && m.token[c] <= hi + 1e-12);
            }
        }
    }
}
