//! Command-line flags. Each value flag mirrors a config key and overrides
//! the config file; values stay strings here so that parse errors name the
//! key the same way for flags and files.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{RawConfig, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "elip", version, about = "Text-guided vision-token pruning encoder harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode images with and without pruning and write traces, metrics and masks.
    Run(ConfigArgs),
    /// Print the complexity report for a schedule without building a model.
    Analyze(ConfigArgs),
    /// Compare text-token pruning strategies on one caption.
    AblateText(ConfigArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<String>,
    #[arg(long)]
    pub patch_size: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<String>,
    #[arg(long)]
    pub num_heads: Option<String>,
    #[arg(long)]
    pub num_layers: Option<String>,
    #[arg(long)]
    pub mlp_ratio: Option<String>,
    #[arg(long)]
    pub text_layers: Option<String>,
    #[arg(long)]
    pub fusion_layers: Option<String>,
    /// Vision weight in the CLS fusion, in [0, 1].
    #[arg(long)]
    pub lambda: Option<String>,
    /// `default`, `unpruned`, or `layers:ratio,...` such as `2:1.0,2:0.9,6:0.65,2:0.4`.
    #[arg(long)]
    pub schedule: Option<String>,
    /// `sum` or `softmax`.
    #[arg(long)]
    pub merge_norm: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// `random`, `post`, `learned` or `all`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Share of text content tokens to drop.
    #[arg(long)]
    pub ratio: Option<String>,
    /// Caption used for text guidance.
    #[arg(long)]
    pub text: Option<String>,
    /// Directory of binary PPM images.
    #[arg(long)]
    pub input_dir: Option<String>,
    /// Use seeded synthetic images.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub num_images: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
    /// Load model weights from an ELIPW01 file.
    #[arg(long)]
    pub weights: Option<String>,
    /// Write the model weights to an ELIPW01 file.
    #[arg(long)]
    pub save_weights: Option<String>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let pairs: [(&'static str, &Option<String>); 21] = [
            ("image_size", &self.image_size),
            ("patch_size", &self.patch_size),
            ("embed_dim", &self.embed_dim),
            ("num_heads", &self.num_heads),
            ("num_layers", &self.num_layers),
            ("mlp_ratio", &self.mlp_ratio),
            ("text_layers", &self.text_layers),
            ("fusion_layers", &self.fusion_layers),
            ("lambda", &self.lambda),
            ("schedule", &self.schedule),
            ("merge_norm", &self.merge_norm),
            ("seed", &self.seed),
            ("strategy", &self.strategy),
            ("ratio", &self.ratio),
            ("text", &self.text),
            ("input_dir", &self.input_dir),
            ("num_images", &self.num_images),
            ("out_dir", &self.out_dir),
            ("weights", &self.weights),
            ("save_weights", &self.save_weights),
            ("vocab", &self.vocab),
        ];
        let mut out: Vec<(&'static str, String)> =
            pairs.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect();
        if self.synthetic {
            out.push(("synthetic", "true".into()));
        }
        out
    }

    /// Config file entries first, then flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::default(),
        };
        for (k, v) in self.overrides() {
            raw.set(k, v)?;
        }
        // A synthetic flag replaces a configured input directory and vice versa.
        if self.synthetic && self.input_dir.is_none() {
            raw.set("input_dir", "")?;
        }
        if self.input_dir.is_some() && !self.synthetic && raw.get("synthetic").is_some() {
            raw.set("synthetic", "false")?;
        }
        RunConfig::from_raw(&raw)
    }
}

/// Runs one parsed command, printing its JSON report to stdout.
pub fn execute(cli: &Cli) -> CliResult<String> {
    use crate::commands::{ablate_text, analyze, run, to_json};
    match &cli.command {
        Command::Run(a) => run(&a.resolve()?).map(|s| to_json(&s)),
        Command::Analyze(a) => analyze(&a.resolve()?).map(|r| to_json(&r)),
        Command::AblateText(a) => ablate_text(&a.resolve()?).map(|r| to_json(&r)),
    }
}

