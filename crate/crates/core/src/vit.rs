//! Vision encoder: patch embedding and a stack of pre-norm Transformer
//! layers that expose their attention tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{WeightFileError, WeightSet};
use crate::rng::ParamInit;
use crate::schedule::PruneSchedule;
use crate::tensor::{self, affine, gelu, layer_norm, matmul, FeatureMatrix, DEFAULT_LN_EPS};

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input("image has zero extent".into()));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(
                "ImageTensor::new",
                format!("3x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
    pub block_layout: PruneSchedule,
}

impl VitConfig {
    /// ViT-Tiny geometry: 224px, 16px patches, d = 192, 3 heads, 12 layers.
    pub fn tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 192,
            num_heads: 3,
            num_layers: 12,
            mlp_ratio: 4.0,
            block_layout: PruneSchedule::elip_default(),
        }
    }

    /// ViT-Base geometry: d = 768, 12 heads.
    pub fn base() -> Self {
        Self {
            embed_dim: 768,
            num_heads: 12,
            ..Self::tiny()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        ImageTensor::CHANNELS * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        mlp_hidden(self.embed_dim, self.mlp_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(Error::Config("image_size and patch_size must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        validate_dims(self.embed_dim, self.num_heads, self.mlp_ratio)?;
        self.block_layout.validate_for(self.num_layers, self.num_patches())
    }
}

pub(crate) fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    (dim as f64 * ratio).round() as usize
}

pub(crate) fn validate_dims(dim: usize, heads: usize, mlp_ratio: f64) -> Result<()> {
    if dim == 0 || heads == 0 {
        return Err(Error::Config("embed_dim and num_heads must be positive".into()));
    }
    if !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embed_dim {dim} is not divisible by num_heads {heads}"
        )));
    }
    if !(mlp_ratio.is_finite() && mlp_hidden(dim, mlp_ratio) >= 1) {
        return Err(Error::Config(format!("mlp_ratio {mlp_ratio} gives an empty MLP")));
    }
    Ok(())
}

/// `heads × queries × keys` attention probabilities of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    heads: usize,
    tokens: usize,
    data: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(heads: usize, tokens: usize, data: Vec<f64>) -> Result<Self> {
        if heads == 0 || tokens == 0 || data.len() != heads * tokens * tokens {
            return Err(Error::shape(
                "AttentionTensor::new",
                format!("{heads}x{tokens}x{tokens}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { heads, tokens, data })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.tokens + query) * self.tokens;
        &self.data[start..start + self.tokens]
    }

    pub fn get(&self, head: usize, query: usize, key: usize) -> f64 {
        self.row(head, query)[key]
    }
}

/// CLS-query attention mass over the non-CLS tokens (ξ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClsAttention(pub Vec<f64>);

impl ClsAttention {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }
}

/// Head-mean of the CLS-query row with the CLS→CLS entry removed.
///
/// Not renormalized: downstream selection only needs the ordering and
/// merging renormalizes its own subset.
pub fn cls_attention_row(attn: &AttentionTensor) -> Result<ClsAttention> {
    if attn.tokens < 2 {
        return Err(Error::Degenerate(format!(
            "CLS attention needs at least 2 tokens, got {}",
            attn.tokens
        )));
    }
    let mut scores = vec![0.0; attn.tokens - 1];
    for h in 0..attn.heads {
        for (s, v) in scores.iter_mut().zip(&attn.row(h, 0)[1..]) {
            *s += v;
        }
    }
    let heads = attn.heads as f64;
    scores.iter_mut().for_each(|s| *s /= heads);
    Ok(ClsAttention(scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub weight: FeatureMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn seeded(init: &mut ParamInit, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: init.matrix(fan_in, fan_out),
            bias: init.vector(fan_out, 0.02),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: FeatureMatrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        affine(x, &self.weight, &self.bias)
    }

    fn export(&self, prefix: &str, out: &mut WeightSet) -> Result<(), WeightFileError> {
        out.insert_matrix(format!("{prefix}.weight"), &self.weight)?;
        out.insert_f64(format!("{prefix}.bias"), vec![self.bias.len()], &self.bias)
    }

    fn import(prefix: &str, fan_in: usize, fan_out: usize, src: &WeightSet) -> Result<Self, WeightFileError> {
        Ok(Self {
            weight: src.matrix(&format!("{prefix}.weight"), fan_in, fan_out)?,
            bias: src.vector(&format!("{prefix}.bias"), fan_out)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        layer_norm(x, &self.gamma, &self.beta, DEFAULT_LN_EPS)
    }

    fn export(&self, prefix: &str, out: &mut WeightSet) -> Result<(), WeightFileError> {
        out.insert_f64(format!("{prefix}.gamma"), vec![self.gamma.len()], &self.gamma)?;
        out.insert_f64(format!("{prefix}.beta"), vec![self.beta.len()], &self.beta)
    }

    fn import(prefix: &str, dim: usize, src: &WeightSet) -> Result<Self, WeightFileError> {
        Ok(Self {
            gamma: src.vector(&format!("{prefix}.gamma"), dim)?,
            beta: src.vector(&format!("{prefix}.beta"), dim)?,
        })
    }
}

/// Pre-norm Transformer layer: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub num_heads: usize,
    pub ln1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn seeded(init: &mut ParamInit, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            num_heads: heads,
            ln1: LayerNormParams::identity(dim),
            query: Linear::seeded(init, dim, dim),
            key: Linear::seeded(init, dim, dim),
            value: Linear::seeded(init, dim, dim),
            out: Linear::seeded(init, dim, dim),
            ln2: LayerNormParams::identity(dim),
            fc1: Linear::seeded(init, dim, hidden),
            fc2: Linear::seeded(init, hidden, dim),
        }
    }

    /// All projections zero and identity layer norms: the layer is the
    /// residual identity.
    pub fn zeros(dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            num_heads: heads,
            ln1: LayerNormParams::identity(dim),
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            out: Linear::zeros(dim, dim),
            ln2: LayerNormParams::identity(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.weight.rows()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.weight.cols()
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<(FeatureMatrix, AttentionTensor)> {
        let dim = self.dim();
        if x.cols() != dim {
            return Err(Error::shape("layer_forward", format!("{} cols", x.cols()), format!("d = {dim}")));
        }
        let n = x.rows();
        let head_dim = dim / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let normed = self.ln1.forward(x)?;
        let q = self.query.forward(&normed)?;
        let k = self.key.forward(&normed)?;
        let v = self.value.forward(&normed)?;

        let mut context = FeatureMatrix::zeros(n, dim);
        let mut probs = Vec::with_capacity(self.num_heads * n * n);
        for h in 0..self.num_heads {
            let start = h * head_dim;
            let qh = q.column_block(start, head_dim);
            let kh = k.column_block(start, head_dim);
            let vh = v.column_block(start, head_dim);
            let scores = matmul(&qh, &kh.transpose())?.scale(scale);
            let attn = tensor::softmax_rows(&scores);
            context.set_column_block(start, &matmul(&attn, &vh)?);
            probs.extend_from_slice(attn.data());
        }
        let x = x.add(&self.out.forward(&context)?)?;

        let hidden = gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?);
        let x = x.add(&self.fc2.forward(&hidden)?)?;
        Ok((x, AttentionTensor::new(self.num_heads, n, probs)?))
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut WeightSet) -> Result<(), WeightFileError> {
        self.ln1.export(&format!("{prefix}.ln1"), out)?;
        self.query.export(&format!("{prefix}.attn.query"), out)?;
        self.key.export(&format!("{prefix}.attn.key"), out)?;
        self.value.export(&format!("{prefix}.attn.value"), out)?;
        self.out.export(&format!("{prefix}.attn.out"), out)?;
        self.ln2.export(&format!("{prefix}.ln2"), out)?;
        self.fc1.export(&format!("{prefix}.mlp.fc1"), out)?;
        self.fc2.export(&format!("{prefix}.mlp.fc2"), out)
    }

    pub(crate) fn import(prefix: &str, dim: usize, heads: usize, hidden: usize, src: &WeightSet) -> Result<Self, WeightFileError> {
        Ok(Self {
            num_heads: heads,
            ln1: LayerNormParams::import(&format!("{prefix}.ln1"), dim, src)?,
            query: Linear::import(&format!("{prefix}.attn.query"), dim, dim, src)?,
            key: Linear::import(&format!("{prefix}.attn.key"), dim, dim, src)?,
            value: Linear::import(&format!("{prefix}.attn.value"), dim, dim, src)?,
            out: Linear::import(&format!("{prefix}.attn.out"), dim, dim, src)?,
            ln2: LayerNormParams::import(&format!("{prefix}.ln2"), dim, src)?,
            fc1: Linear::import(&format!("{prefix}.mlp.fc1"), dim, hidden, src)?,
            fc2: Linear::import(&format!("{prefix}.mlp.fc2"), hidden, dim, src)?,
        })
    }
}

/// Per-layer observation handed to encoder observers.
pub struct LayerRecord<'a> {
    pub layer: usize,
    pub output: &'a FeatureMatrix,
    pub attention: &'a AttentionTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    cfg: VitConfig,
    pub patch_embed: Linear,
    pub cls_token: Vec<f64>,
    /// `(1 + M²) × d`, row 0 belongs to CLS.
    pub pos_embed: FeatureMatrix,
    pub layers: Vec<TransformerLayer>,
}

impl VisionEncoder {
    pub fn seeded(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = ParamInit::new(seed);
        let d = cfg.embed_dim;
        let patch_embed = Linear::seeded(&mut init, cfg.patch_dim(), d);
        let cls_token = init.vector(d, 1.0 / (d as f64).sqrt());
        let pos_embed = init.table(1 + cfg.num_patches(), d);
        let layers = (0..cfg.num_layers)
            .map(|_| TransformerLayer::seeded(&mut init, d, cfg.num_heads, cfg.mlp_hidden()))
            .collect();
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            pos_embed,
            layers,
        })
    }

    /// Every parameter zero except identity layer norms.
    pub fn zeros(cfg: VitConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(Self {
            patch_embed: Linear::zeros(cfg.patch_dim(), d),
            cls_token: vec![0.0; d],
            pos_embed: FeatureMatrix::zeros(1 + cfg.num_patches(), d),
            layers: (0..cfg.num_layers)
                .map(|_| TransformerLayer::zeros(d, cfg.num_heads, cfg.mlp_hidden()))
                .collect(),
            cfg,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Cuts the image into `M × M` patches (row-major grid order), embeds
    /// each, prepends CLS and adds position embeddings: `(1 + M²) × d`.
    pub fn patchify(&self, img: &ImageTensor) -> Result<FeatureMatrix> {
        let patches = extract_patches(img, self.cfg.patch_size)?;
        if img.height != self.cfg.image_size || img.width != self.cfg.image_size {
            return Err(Error::Config(format!(
                "image is {}x{} but the encoder expects {}x{}",
                img.height, img.width, self.cfg.image_size, self.cfg.image_size
            )));
        }
        let embedded = self.patch_embed.forward(&patches)?;
        let mut x = FeatureMatrix::new(1, self.cfg.embed_dim, self.cls_token.clone())?;
        for row in embedded.iter_rows() {
            x.push_row(row)?;
        }
        x.add(&self.pos_embed)
    }

    pub fn layer_forward(&self, x: &FeatureMatrix, layer_index: usize) -> Result<(FeatureMatrix, AttentionTensor)> {
        let layer = self.layers.get(layer_index).ok_or_else(|| {
            Error::Argument(format!(
                "layer {layer_index} out of range for {} layers",
                self.layers.len()
            ))
        })?;
        layer.forward(x)
    }

    /// Runs the layers of `range` in order, reporting each to `observer`.
    pub fn run_layers(
        &self,
        x: FeatureMatrix,
        range: std::ops::Range<usize>,
        observer: &mut dyn FnMut(LayerRecord<'_>),
    ) -> Result<(FeatureMatrix, Option<AttentionTensor>)> {
        let mut x = x;
        let mut last = None;
        for layer in range {
            let (y, attn) = self.layer_forward(&x, layer)?;
            observer(LayerRecord {
                layer,
                output: &y,
                attention: &attn,
            });
            x = y;
            last = Some(attn);
        }
        Ok((x, last))
    }

    pub(crate) fn export(&self, out: &mut WeightSet) -> Result<(), WeightFileError> {
        self.patch_embed.export("vision.patch_embed", out)?;
        out.insert_f64("vision.cls_token", vec![self.cls_token.len()], &self.cls_token)?;
        out.insert_matrix("vision.pos_embed", &self.pos_embed)?;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.export(&format!("vision.layers.{i}"), out)?;
        }
        Ok(())
    }

    pub(crate) fn import(cfg: VitConfig, src: &WeightSet) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|i| TransformerLayer::import(&format!("vision.layers.{i}"), d, cfg.num_heads, cfg.mlp_hidden(), src))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            patch_embed: Linear::import("vision.patch_embed", cfg.patch_dim(), d, src)?,
            cls_token: src.vector("vision.cls_token", d)?,
            pos_embed: src.matrix("vision.pos_embed", 1 + cfg.num_patches(), d)?,
            layers,
            cfg,
        })
    }
}

/// Flattened patches, one row per grid cell in row-major order. Each row is
/// channel-major then row-major within the patch.
pub fn extract_patches(img: &ImageTensor, patch_size: usize) -> Result<FeatureMatrix> {
    if patch_size == 0 || !img.height.is_multiple_of(patch_size) || !img.width.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "image {}x{} is not divisible by patch_size {patch_size}",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / patch_size, img.width / patch_size);
    let patch_dim = ImageTensor::CHANNELS * patch_size * patch_size;
    let mut data = Vec::with_capacity(gh * gw * patch_dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..ImageTensor::CHANNELS {
                for py in 0..patch_size {
                    let y = gy * patch_size + py;
                    let start = (c * img.height + y) * img.width + gx * patch_size;
                    data.extend_from_slice(&img.data[start..start + patch_size]);
                }
            }
        }
    }
    FeatureMatrix::new(gh * gw, patch_dim, data)
}
