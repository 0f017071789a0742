//! Text-token pruning ablations: the first half of the text layers run on
//! the full sequence, then a fixed share of content tokens is dropped once
//! and the remaining layers run on the shorter sequence.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMatrix;
use crate::text::{TextEncoder, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextPruneStrategy {
    /// Seeded uniform choice of content tokens.
    Random,
    /// Trailing content tokens.
    Post,
    /// Content tokens least aligned (dot product) with the vision CLS.
    Learned,
}

impl TextPruneStrategy {
    pub const ALL: [TextPruneStrategy; 3] = [Self::Random, Self::Post, Self::Learned];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Post => "post",
            Self::Learned => "learned",
        }
    }
}

impl FromStr for TextPruneStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "post" => Ok(Self::Post),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Config(format!("unknown text prune strategy `{other}`"))),
        }
    }
}

/// `floor(ratio · T)`.
pub fn prune_count(content_len: usize, ratio: f64) -> usize {
    // Ratios come from decimal text; a tiny bias absorbs binary
    // representation error such as 0.3 * 10 = 2.9999999999999996.
    ((ratio * content_len as f64) + 1e-9).floor() as usize
}

/// Indices (ascending, over the full `2 + T` sequence) that survive.
///
/// Position 0 (CLS) and the last position (SEP) always survive.
pub fn plan_text_prune(
    seq_len: usize,
    strategy: TextPruneStrategy,
    ratio: f64,
    xv_cls: Option<&[f64]>,
    token_feats: Option<&FeatureMatrix>,
    seed: u64,
) -> Result<Vec<usize>> {
    if seq_len < 2 {
        return Err(Error::Argument(format!("sequence of {seq_len} lacks [CLS]/[SEP]")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("text prune ratio must lie in (0, 1), got {ratio}")));
    }
    let content = seq_len - 2;
    let drop = prune_count(content, ratio);

    let dropped: Vec<usize> = match strategy {
        TextPruneStrategy::Post => (content + 1 - drop..=content).collect(),
        TextPruneStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, content, drop)
                .into_iter()
                .map(|i| i + 1)
                .collect()
        }
        TextPruneStrategy::Learned => {
            let (Some(cls), Some(feats)) = (xv_cls, token_feats) else {
                return Err(Error::Argument(
                    "learned text pruning needs the vision CLS and token features".into(),
                ));
            };
            if feats.rows() != seq_len || feats.cols() != cls.len() {
                return Err(Error::shape(
                    "plan_text_prune",
                    format!("{seq_len}x{}", cls.len()),
                    format!("{}x{}", feats.rows(), feats.cols()),
                ));
            }
            let mut scored: Vec<(f64, usize)> = (1..=content)
                .map(|p| (feats.row(p).iter().zip(cls).map(|(a, b)| a * b).sum(), p))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored[..drop].iter().map(|&(_, p)| p).collect()
        }
    };

    let mut keep = vec![true; seq_len];
    for p in dropped {
        keep[p] = false;
    }
    Ok((0..seq_len).filter(|&i| keep[i]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedText {
    pub features: FeatureMatrix,
    /// Surviving sequence positions.
    pub kept: Vec<usize>,
    /// Token count seen by each text layer.
    pub layer_tokens: Vec<usize>,
}

impl TextEncoder {
    /// Runs `ceil(L / 2)` layers on the full sequence, prunes once, then runs
    /// the rest on the kept tokens.
    pub fn encode_text_pruned(
        &self,
        seq: &TokenSequence,
        strategy: TextPruneStrategy,
        ratio: f64,
        xv_cls: Option<&[f64]>,
        seed: u64,
    ) -> Result<PrunedText> {
        let layers = self.layers.len();
        let half = layers.div_ceil(2);
        let mut layer_tokens = Vec::with_capacity(layers);

        let x = self.embed(seq)?;
        let x = self.run_layers(x, 0..half, &mut |r| layer_tokens.push(r.output.rows()))?;
        let kept = plan_text_prune(seq.len(), strategy, ratio, xv_cls, Some(&x), seed)?;
        let x = if kept.len() == x.rows() { x } else { x.select_rows(&kept)? };
        let features = self.run_layers(x, half..layers, &mut |r| layer_tokens.push(r.output.rows()))?;
        Ok(PrunedText {
            features,
            kept,
            layer_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, TextConfig, Vocab};
    use rand::Rng;

    #[test]
    fn post_drops_the_tail() {
        let kept = plan_text_prune(12, TextPruneStrategy::Post, 0.4, None, None, 0).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 3, 4, 5, 6, 11]);
    }

    #[test]
    fn single_token_floor_edge() {
        for s in TextPruneStrategy::ALL {
            let feats = FeatureMatrix::zeros(3, 2);
            let kept = plan_text_prune(3, s, 0.4, Some(&[1.0, 0.0]), Some(&feats), 1).unwrap();
            assert_eq!(kept, vec![0, 1, 2]);
        }
    }

    #[test]
    fn learned_requires_inputs() {
        assert!(matches!(
            plan_text_prune(6, TextPruneStrategy::Learned, 0.4, None, None, 0),
            Err(Error::Argument(_))
        ));
        assert!(plan_text_prune(6, TextPruneStrategy::Post, 1.0, None, None, 0).is_err());
        assert!(plan_text_prune(6, TextPruneStrategy::Post, 0.0, None, None, 0).is_err());
    }

    #[test]
    fn learned_ties_drop_lower_index_first() {
        let feats = FeatureMatrix::from_rows(&[[9.0], [1.0], [1.0], [2.0], [9.0]]).unwrap();
        // T = 3, ratio 0.67 drops 2: the two tied lowest, positions 1 and 2.
        let kept = plan_text_prune(5, TextPruneStrategy::Learned, 0.67, Some(&[1.0]), Some(&feats), 0).unwrap();
        assert_eq!(kept, vec![0, 3, 4]);
        let kept = plan_text_prune(5, TextPruneStrategy::Learned, 0.34, Some(&[1.0]), Some(&feats), 0).unwrap();
        assert_eq!(kept, vec![0, 2, 3, 4]);
    }

    #[test]
    fn random_is_seeded_and_content_blind() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = FeatureMatrix::new(22, 4, (0..88).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let b = FeatureMatrix::zeros(22, 4);
        let cls = [1.0, 2.0, 3.0, 4.0];
        for s in [TextPruneStrategy::Random, TextPruneStrategy::Post] {
            let ka = plan_text_prune(22, s, 0.4, Some(&cls), Some(&a), 9).unwrap();
            let kb = plan_text_prune(22, s, 0.4, Some(&cls), Some(&b), 9).unwrap();
            assert_eq!(ka, kb);
            assert_eq!(ka.len(), 14);
            assert_eq!((ka[0], ka[13]), (0, 21));
        }
        assert_ne!(
            plan_text_prune(22, TextPruneStrategy::Random, 0.4, None, None, 9).unwrap(),
            plan_text_prune(22, TextPruneStrategy::Random, 0.4, None, None, 10).unwrap()
        );
    }

    fn encoder() -> (TextEncoder, Vocab) {
        let vocab = Vocab::builtin();
        (TextEncoder::seeded(TextConfig::matching(vocab.len(), 8, 2, 2.0), 4).unwrap(), vocab)
    }

    #[test]
    fn zero_drop_matches_plain_encoding() {
        let (enc, vocab) = encoder();
        let seq = tokenize("a dog runs on the beach", &vocab);
        let pruned = enc.encode_text_pruned(&seq, TextPruneStrategy::Post, 0.1, None, 0).unwrap();
        assert_eq!(pruned.features, enc.encode_text(&seq).unwrap());
        assert_eq!(pruned.kept.len(), seq.len());
    }

    #[test]
    fn second_half_sees_reduced_sequence() {
        let (enc, vocab) = encoder();
        let caption = "a man in a red shirt rides a brown horse along the beach while two dogs run behind him today";
        let seq = tokenize(caption, &vocab);
        assert_eq!(seq.content_len(), 20);
        let cls = vec![0.5; 8];
        for s in TextPruneStrategy::ALL {
            let p = enc.encode_text_pruned(&seq, s, 0.4, Some(&cls), 3).unwrap();
            assert_eq!(p.layer_tokens, vec![22, 22, 14, 14]);
            assert_eq!(p.features.rows(), 14);
        }
    }
}
