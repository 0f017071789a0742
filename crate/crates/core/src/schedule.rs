//! Block layout of the vision encoder and the retain ratio of each block.
//!
//! A schedule splits the `N` encoder layers into contiguous blocks. A block
//! either runs on whatever tokens reach it (no ratio) or starts by reducing
//! the vision tokens to `floor(α · M²)` retained patches plus one merged
//! token, where `M²` is the ORIGINAL patch count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PPM: u64 = 1_000_000;

/// A retain ratio in `(0, 1)`, held exactly in parts per million.
///
/// Parsing from decimal text is exact up to six decimals, so accounting such
/// as `2·1 + 2·0.9 + 6·0.65 + 2·0.4` sums without rounding drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RetainRatio(u32);

impl RetainRatio {
    /// Rounds `value` to the nearest millionth.
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 || value >= 1.0 {
            return Err(Error::Config(format!(
                "retain_ratio must lie in (0, 1), got {value}"
            )));
        }
        let ppm = (value * PPM as f64).round() as u64;
        if ppm == 0 || ppm >= PPM {
            return Err(Error::Config(format!(
                "retain_ratio {value} rounds outside (0, 1)"
            )));
        }
        Ok(Self(ppm as u32))
    }

    pub fn from_ppm(ppm: u32) -> Result<Self> {
        if ppm == 0 || ppm as u64 >= PPM {
            return Err(Error::Config(format!(
                "retain_ratio must lie in (0, 1), got {ppm} ppm"
            )));
        }
        Ok(Self(ppm))
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / PPM as f64
    }

    /// `floor(α · total)` computed in integers.
    pub fn keep_count(self, total: usize) -> usize {
        (self.0 as u64 * total as u64 / PPM) as usize
    }
}

impl TryFrom<f64> for RetainRatio {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<RetainRatio> for f64 {
    fn from(r: RetainRatio) -> f64 {
        r.as_f64()
    }
}

impl fmt::Display for RetainRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

/// Parses a decimal such as `0.65` or `1.0` into millionths, exactly.
fn parse_ppm(text: &str) -> Option<u64> {
    let text = text.trim();
    let (int, frac) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if frac.len() > 6 {
        // Beyond ppm precision: fall back to rounding.
        let v: f64 = text.parse().ok()?;
        return Some((v * PPM as f64).round() as u64);
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let mut frac_ppm: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    for _ in frac.len()..6 {
        frac_ppm *= 10;
    }
    int.checked_mul(PPM)?.checked_add(frac_ppm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub layers: usize,
    pub retain_ratio: Option<RetainRatio>,
}

impl BlockSpec {
    pub fn unpruned(layers: usize) -> Self {
        Self {
            layers,
            retain_ratio: None,
        }
    }

    pub fn pruned(layers: usize, ratio: RetainRatio) -> Self {
        Self {
            layers,
            retain_ratio: Some(ratio),
        }
    }

    pub fn is_pruning(&self) -> bool {
        self.retain_ratio.is_some()
    }
}

/// Validated block layout.
///
/// Invariants: at least one block; every block has at least one layer; the
/// first block has no ratio; blocks without a ratio only appear before the
/// first pruning block; pruning ratios strictly decrease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BlockSpec>", into = "Vec<BlockSpec>")]
pub struct PruneSchedule {
    blocks: Vec<BlockSpec>,
}

impl TryFrom<Vec<BlockSpec>> for PruneSchedule {
    type Error = Error;
    fn try_from(blocks: Vec<BlockSpec>) -> Result<Self> {
        Self::new(blocks)
    }
}

impl From<PruneSchedule> for Vec<BlockSpec> {
    fn from(s: PruneSchedule) -> Self {
        s.blocks
    }
}

impl PruneSchedule {
    pub fn new(blocks: Vec<BlockSpec>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("schedule has no blocks".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.layers == 0 {
                return Err(Error::Config(format!("block {} has 0 layers", i + 1)));
            }
        }
        if blocks[0].is_pruning() {
            return Err(Error::Config(
                "block 1 must not carry a retain_ratio".into(),
            ));
        }
        let mut previous: Option<RetainRatio> = None;
        let mut pruning_started = false;
        for (i, b) in blocks.iter().enumerate() {
            match b.retain_ratio {
                None if pruning_started => {
                    return Err(Error::Config(format!(
                        "block {} lacks a retain_ratio after pruning started",
                        i + 1
                    )));
                }
                None => {}
                Some(r) => {
                    if let Some(p) = previous {
                        if r >= p {
                            return Err(Error::Config(format!(
                                "retain_ratio must strictly decrease: block {} has {} after {}",
                                i + 1,
                                r,
                                p
                            )));
                        }
                    }
                    previous = Some(r);
                    pruning_started = true;
                }
            }
        }
        Ok(Self { blocks })
    }

    /// Four blocks of 2/2/6/2 layers retaining 90%, 65% and 40% of the
    /// original patches in the last three.
    pub fn elip_default() -> Self {
        let r = |ppm| RetainRatio::from_ppm(ppm).expect("valid ratio");
        Self::new(vec![
            BlockSpec::unpruned(2),
            BlockSpec::pruned(2, r(900_000)),
            BlockSpec::pruned(6, r(650_000)),
            BlockSpec::pruned(2, r(400_000)),
        ])
        .expect("valid default schedule")
    }

    pub fn unpruned(layers: usize) -> Result<Self> {
        Self::new(vec![BlockSpec::unpruned(layers)])
    }

    /// Parses `"2:1.0,2:0.9,6:0.65,2:0.4"`, `"default"` or `"unpruned"`.
    ///
    /// A ratio of exactly `1.0` marks a block without pruning. `unpruned`
    /// needs the encoder depth.
    pub fn parse(text: &str, num_layers: usize) -> Result<Self> {
        match text.trim() {
            "default" => return Ok(Self::elip_default()),
            "unpruned" => return Self::unpruned(num_layers),
            _ => {}
        }
        let mut blocks = Vec::new();
        for (i, part) in text.split(',').enumerate() {
            let part = part.trim();
            let Some((layers, ratio)) = part.split_once(':') else {
                return Err(Error::Config(format!(
                    "block {} (`{part}`) is missing retain_ratio; expected layers:ratio",
                    i + 1
                )));
            };
            let layers: usize = layers.trim().parse().map_err(|_| {
                Error::Config(format!("block {}: bad layer count `{layers}`", i + 1))
            })?;
            let ppm = parse_ppm(ratio).ok_or_else(|| {
                Error::Config(format!("block {}: bad retain_ratio `{ratio}`", i + 1))
            })?;
            let retain_ratio = match ppm {
                PPM => None,
                p if p == 0 || p > PPM => {
                    return Err(Error::Config(format!(
                        "block {}: retain_ratio `{}` outside (0, 1]",
                        i + 1,
                        ratio.trim()
                    )))
                }
                p => Some(RetainRatio(p as u32)),
            };
            blocks.push(BlockSpec {
                layers,
                retain_ratio,
            });
        }
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn total_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.layers).sum()
    }

    pub fn has_pruning(&self) -> bool {
        self.blocks.iter().any(BlockSpec::is_pruning)
    }

    /// Layer index range covered by block `index`.
    pub fn layer_range(&self, index: usize) -> std::ops::Range<usize> {
        let start: usize = self.blocks[..index].iter().map(|b| b.layers).sum();
        start..start + self.blocks[index].layers
    }

    /// Checks the schedule against an encoder of `num_layers` layers and
    /// `num_patches` patch tokens.
    pub fn validate_for(&self, num_layers: usize, num_patches: usize) -> Result<()> {
        if self.total_layers() != num_layers {
            return Err(Error::Config(format!(
                "schedule covers {} layers but the encoder has {num_layers}",
                self.total_layers()
            )));
        }
        let mut candidates = num_patches;
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(r) = b.retain_ratio {
                let keep = r.keep_count(num_patches);
                if keep == 0 {
                    return Err(Error::Config(format!(
                        "block {}: retain_ratio {r} keeps no patch out of {num_patches}",
                        i + 1
                    )));
                }
                if keep > candidates {
                    return Err(Error::Config(format!(
                        "block {}: keeps {keep} tokens but only {candidates} are available",
                        i + 1
                    )));
                }
                candidates = keep + usize::from(keep < candidates);
            }
        }
        Ok(())
    }

    /// Vision token count (CLS included) processed by each block's layers.
    pub fn block_token_counts(&self, num_patches: usize) -> Vec<usize> {
        let mut tokens = 1 + num_patches;
        self.blocks
            .iter()
            .map(|b| {
                if let Some(r) = b.retain_ratio {
                    let keep = r.keep_count(num_patches);
                    let has_residual = keep < tokens - 1;
                    tokens = 1 + keep + usize::from(has_residual);
                }
                tokens
            })
            .collect()
    }
}

impl fmt::Display for PruneSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match b.retain_ratio {
                Some(r) => write!(f, "{}:{}", b.layers, r)?,
                None => write!(f, "{}:1.0", b.layers)?,
            }
        }
        Ok(())
    }
}

impl FromStr for PruneSchedule {
    type Err = Error;
    /// Explicit `layers:ratio` lists only; keywords need [`PruneSchedule::parse`].
    fn from_str(s: &str) -> Result<Self> {
        let total = s
            .split(',')
            .filter_map(|p| p.split(':').next()?.trim().parse::<usize>().ok())
            .sum();
        Self::parse(s, total)
    }
}
