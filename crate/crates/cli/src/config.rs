//! Flat `key = value` run configuration.
//!
//! Values come from an optional config file and are then overridden by
//! command-line flags carrying the same key names. Everything is parsed in
//! one place so that every failure names the offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use elip_core::complexity::ModelDims;
use elip_core::elip::{FusionConfig, MergeNorm, PruneOptions};
use elip_core::text::TextConfig;
use elip_core::text_prune::TextPruneStrategy;
use elip_core::vit::VitConfig;
use elip_core::PruneSchedule;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "embed_dim",
    "num_heads",
    "num_layers",
    "mlp_ratio",
    "text_layers",
    "fusion_layers",
    "lambda",
    "schedule",
    "merge_norm",
    "seed",
    "strategy",
    "ratio",
    "text",
    "input_dir",
    "synthetic",
    "num_images",
    "out_dir",
    "weights",
    "save_weights",
    "vocab",
];

pub const DEFAULT_CAPTION: &str =
    "a small red ball rests on the green grass next to a white dog in a sunny park near two tall trees";

/// Key/value pairs in the order they were supplied; later entries win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// skipped; repeating a key is an error.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut raw = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::config(line, format!("line {}: expected `key = value`", lineno + 1)));
            };
            let key = key.trim();
            if raw.values.contains_key(key) {
                return Err(CliError::config(key, format!("line {}: duplicate key", lineno + 1)));
            }
            raw.set(key, value.trim())?;
        }
        Ok(raw)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one value, rejecting unknown keys.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> CliResult<()> {
        if !KEYS.contains(&key) {
            return Err(CliError::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| CliError::config(key, format!("`{v}`: {e}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }
}

/// Which text-pruning strategies an ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyChoice {
    All,
    One(TextPruneStrategy),
}

impl StrategyChoice {
    pub fn strategies(self) -> Vec<TextPruneStrategy> {
        match self {
            Self::All => TextPruneStrategy::ALL.to_vec(),
            Self::One(s) => vec![s],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub lambda: f64,
    #[serde(serialize_with = "as_display")]
    pub schedule: PruneSchedule,
    #[serde(skip)]
    pub merge_norm: MergeNorm,
    pub seed: u64,
    #[serde(skip)]
    pub strategy: StrategyChoice,
    pub ratio: f64,
    pub text: String,
    pub input_dir: Option<PathBuf>,
    pub synthetic: bool,
    pub num_images: usize,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub save_weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

fn as_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(CliError::config(key, format!("`{v}` is not a boolean"))),
    }
}

fn positive(key: &str, v: usize) -> CliResult<usize> {
    if v == 0 {
        return Err(CliError::config(key, "must be positive"));
    }
    Ok(v)
}

impl RunConfig {
    /// Defaults: a 64px image in 8px patches, d = 64, 4 heads, 12 layers.
    pub fn from_raw(raw: &RawConfig) -> CliResult<Self> {
        let image_size = positive("image_size", raw.parsed("image_size", 64)?)?;
        let patch_size = positive("patch_size", raw.parsed("patch_size", 8)?)?;
        if image_size % patch_size != 0 {
            return Err(CliError::config(
                "patch_size",
                format!("{patch_size} does not divide image_size {image_size}"),
            ));
        }
        let embed_dim = positive("embed_dim", raw.parsed("embed_dim", 64)?)?;
        let num_heads = positive("num_heads", raw.parsed("num_heads", 4)?)?;
        if embed_dim % num_heads != 0 {
            return Err(CliError::config(
                "num_heads",
                format!("{num_heads} does not divide embed_dim {embed_dim}"),
            ));
        }
        let num_layers = positive("num_layers", raw.parsed("num_layers", 12)?)?;
        let mlp_ratio: f64 = raw.parsed("mlp_ratio", 4.0)?;
        if !(mlp_ratio.is_finite() && mlp_ratio > 0.0) {
            return Err(CliError::config("mlp_ratio", "must be a positive number"));
        }
        let text_layers = positive("text_layers", raw.parsed("text_layers", 4)?)?;
        let fusion_layers = raw.parsed("fusion_layers", 6)?;

        let lambda: f64 = raw.parsed("lambda", elip_core::elip::DEFAULT_LAMBDA)?;
        FusionConfig::new(lambda).map_err(|e| CliError::config("lambda", e))?;

        let schedule_text = raw.get("schedule").unwrap_or("default");
        let schedule = PruneSchedule::parse(schedule_text, num_layers).map_err(|e| CliError::config("schedule", e))?;
        let grid = image_size / patch_size;
        schedule
            .validate_for(num_layers, grid * grid)
            .map_err(|e| CliError::config("schedule", e))?;

        let merge_norm = raw.parsed("merge_norm", MergeNorm::Sum)?;
        let strategy = match raw.get("strategy").map(str::trim) {
            None | Some("all") => StrategyChoice::All,
            Some(s) => StrategyChoice::One(s.parse().map_err(|e| CliError::config("strategy", e))?),
        };
        let ratio: f64 = raw.parsed("ratio", 0.4)?;
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(CliError::config("ratio", format!("{ratio} outside (0, 1)")));
        }

        let input_dir = raw.path("input_dir");
        let synthetic = match raw.get("synthetic") {
            Some(v) => parse_bool("synthetic", v)?,
            None => input_dir.is_none(),
        };
        if synthetic && input_dir.is_some() {
            return Err(CliError::config("synthetic", "conflicts with input_dir"));
        }
        if !synthetic && input_dir.is_none() {
            return Err(CliError::config("input_dir", "required unless synthetic is set"));
        }

        Ok(Self {
            image_size,
            patch_size,
            embed_dim,
            num_heads,
            num_layers,
            mlp_ratio,
            text_layers,
            fusion_layers,
            lambda,
            schedule,
            merge_norm,
            seed: raw.parsed("seed", 0)?,
            strategy,
            ratio,
            text: raw.get("text").unwrap_or(DEFAULT_CAPTION).to_string(),
            input_dir,
            synthetic,
            num_images: positive("num_images", raw.parsed("num_images", 2)?)?,
            out_dir: raw.path("out_dir"),
            weights: raw.path("weights"),
            save_weights: raw.path("save_weights"),
            vocab: raw.path("vocab"),
        })
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            mlp_ratio: self.mlp_ratio,
            block_layout: self.schedule.clone(),
        }
    }

    pub fn text_config(&self, vocab_size: usize) -> TextConfig {
        TextConfig {
            num_layers: self.text_layers,
            ..TextConfig::matching(vocab_size, self.embed_dim, self.num_heads, self.mlp_ratio)
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            embed_dim: self.embed_dim,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
            num_patches: self.grid_side() * self.grid_side(),
            text_layers: self.text_layers,
            fusion_layers: self.fusion_layers,
        }
    }

    pub fn prune_options(&self) -> PruneOptions {
        PruneOptions {
            fusion: FusionConfig::new(self.lambda).expect("lambda validated"),
            merge_norm: self.merge_norm,
        }
    }
}
