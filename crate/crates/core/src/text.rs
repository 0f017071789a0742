//! Word-level tokenizer and a small BERT-style text encoder producing
//! `(2 + T) × d` features delimited by CLS and SEP.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{WeightFileError, WeightSet};
use crate::rng::ParamInit;
use crate::tensor::FeatureMatrix;
use crate::vit::{mlp_hidden, validate_dims, AttentionTensor, LayerRecord, TransformerLayer};

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const BUILTIN_WORDS: &str = include_str!("vocab.txt");

/// Token list where the line number is the id; ids 0/1/2 are CLS/SEP/UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// One token per line. The first three lines are the reserved ids
    /// whatever their text; later duplicates keep the first id.
    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        if lines.len() < 3 {
            return Err(Error::Input(format!(
                "vocabulary needs the 3 reserved entries, got {} lines",
                lines.len()
            )));
        }
        let tokens: Vec<String> = lines.iter().map(|l| l.as_ref().trim().to_string()).collect();
        let mut lookup = HashMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(3) {
            if !tok.is_empty() {
                lookup.entry(tok.to_lowercase()).or_insert(id as u32);
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines(&text.lines().collect::<Vec<_>>())
    }

    /// Small built-in caption vocabulary.
    pub fn builtin() -> Self {
        Self::from_lines(&BUILTIN_WORDS.lines().collect::<Vec<_>>()).expect("builtin vocabulary")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.lookup.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// `[CLS] t_1 … t_T [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of content tokens `T`.
    pub fn content_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }
}

/// Splits on whitespace, peels punctuation into separate tokens and folds
/// to lowercase.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                if !ch.is_control() {
                    words.push(ch.to_string());
                }
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut ids = vec![CLS_ID];
    ids.extend(split_words(text).iter().map(|w| vocab.id(w)));
    ids.push(SEP_ID);
    TokenSequence { ids }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
}

impl TextConfig {
    /// Four layers at the vision width, so the text CLS fuses without a
    /// projection.
    pub fn matching(vocab_size: usize, embed_dim: usize, num_heads: usize, mlp_ratio: f64) -> Self {
        Self {
            vocab_size,
            max_len: 64,
            embed_dim,
            num_heads,
            num_layers: 4,
            mlp_ratio,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        mlp_hidden(self.embed_dim, self.mlp_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must fit [CLS] and [SEP]".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("text encoder needs at least one layer".into()));
        }
        validate_dims(self.embed_dim, self.num_heads, self.mlp_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    cfg: TextConfig,
    pub token_embed: FeatureMatrix,
    pub pos_embed: FeatureMatrix,
    pub layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    pub fn seeded(cfg: TextConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = ParamInit::new(seed);
        let d = cfg.embed_dim;
        Ok(Self {
            token_embed: init.table(cfg.vocab_size, d),
            pos_embed: init.table(cfg.max_len, d),
            layers: (0..cfg.num_layers)
                .map(|_| TransformerLayer::seeded(&mut init, d, cfg.num_heads, cfg.mlp_hidden()))
                .collect(),
            cfg,
        })
    }

    pub fn zeros_with_embeddings(cfg: TextConfig, token_embed: FeatureMatrix, pos_embed: FeatureMatrix) -> Result<Self> {
        cfg.validate()?;
        if token_embed.shape() != (cfg.vocab_size, cfg.embed_dim) || pos_embed.shape() != (cfg.max_len, cfg.embed_dim) {
            return Err(Error::shape(
                "TextEncoder",
                format!("{}x{} / {}x{}", cfg.vocab_size, cfg.embed_dim, cfg.max_len, cfg.embed_dim),
                format!("{:?} / {:?}", token_embed.shape(), pos_embed.shape()),
            ));
        }
        Ok(Self {
            layers: (0..cfg.num_layers)
                .map(|_| TransformerLayer::zeros(cfg.embed_dim, cfg.num_heads, cfg.mlp_hidden()))
                .collect(),
            token_embed,
            pos_embed,
            cfg,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// Token plus position embeddings, before any layer.
    pub fn embed(&self, seq: &TokenSequence) -> Result<FeatureMatrix> {
        if seq.len() < 2 {
            return Err(Error::Input("token sequence lacks [CLS]/[SEP]".into()));
        }
        if seq.len() > self.cfg.max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_len {}",
                seq.len(),
                self.cfg.max_len
            )));
        }
        let d = self.cfg.embed_dim;
        let mut data = Vec::with_capacity(seq.len() * d);
        for (pos, &id) in seq.ids.iter().enumerate() {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::Input(format!(
                    "token id {id} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            let tok = self.token_embed.row(id as usize);
            let p = self.pos_embed.row(pos);
            data.extend(tok.iter().zip(p).map(|(a, b)| a + b));
        }
        FeatureMatrix::new(seq.len(), d, data)
    }

    pub fn layer_forward(&self, x: &FeatureMatrix, layer_index: usize) -> Result<(FeatureMatrix, AttentionTensor)> {
        let layer = self.layers.get(layer_index).ok_or_else(|| {
            Error::Argument(format!("text layer {layer_index} out of range for {}", self.layers.len()))
        })?;
        layer.forward(x)
    }

    pub fn run_layers(
        &self,
        mut x: FeatureMatrix,
        range: std::ops::Range<usize>,
        observer: &mut dyn FnMut(LayerRecord<'_>),
    ) -> Result<FeatureMatrix> {
        for layer in range {
            let (y, attn) = self.layer_forward(&x, layer)?;
            observer(LayerRecord {
                layer,
                output: &y,
                attention: &attn,
            });
            x = y;
        }
        Ok(x)
    }

    /// Full `(2 + T) × d` encoding; row 0 is the text CLS.
    pub fn encode_text(&self, seq: &TokenSequence) -> Result<FeatureMatrix> {
        let x = self.embed(seq)?;
        self.run_layers(x, 0..self.layers.len(), &mut |_| {})
    }

    pub(crate) fn export(&self, out: &mut WeightSet) -> Result<(), WeightFileError> {
        out.insert_matrix("text.token_embed", &self.token_embed)?;
        out.insert_matrix("text.pos_embed", &self.pos_embed)?;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.export(&format!("text.layers.{i}"), out)?;
        }
        Ok(())
    }

    pub(crate) fn import(cfg: TextConfig, src: &WeightSet) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|i| TransformerLayer::import(&format!("text.layers.{i}"), d, cfg.num_heads, cfg.mlp_hidden(), src))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            token_embed: src.matrix("text.token_embed", cfg.vocab_size, d)?,
            pos_embed: src.matrix("text.pos_embed", cfg.max_len, d)?,
            layers,
            cfg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(vocab: &Vocab) -> TextConfig {
        TextConfig::matching(vocab.len(), 8, 2, 2.0)
    }

    #[test]
    fn empty_text() {
        let seq = tokenize("", &Vocab::builtin());
        assert_eq!(seq.ids, vec![CLS_ID, SEP_ID]);
        assert_eq!(seq.content_len(), 0);
    }

    #[test]
    fn known_words() {
        let vocab = Vocab::builtin();
        let seq = tokenize("a sheep grazes", &vocab);
        assert_eq!(seq.len(), 5);
        assert!(seq.ids[1..4].iter().all(|&id| id > UNK_ID));
    }

    #[test]
    fn twenty_word_caption() {
        let vocab = Vocab::builtin();
        let caption = "a man in a red shirt is riding a brown horse along the beach while two dogs run behind him in the sand";
        let seq = tokenize(caption, &vocab);
        assert_eq!(seq.content_len(), 23);
        let twenty = "a man in a red shirt rides a brown horse along the beach while two dogs run behind him today";
        let seq = tokenize(twenty, &vocab);
        assert_eq!(seq.content_len(), 20);
        assert_eq!(seq.len(), 22);
    }

    #[test]
    fn case_folding_punctuation_and_unknowns() {
        let vocab = Vocab::from_lines(&["[CLS]", "[SEP]", "[UNK]", "dog", ","]).unwrap();
        assert_eq!(split_words("Dog,DOG  zebra!"), vec!["dog", ",", "dog", "zebra", "!"]);
        let seq = tokenize("Dog,DOG  zebra!", &vocab);
        assert_eq!(seq.ids, vec![CLS_ID, 3, 4, 3, UNK_ID, UNK_ID, SEP_ID]);
    }

    #[test]
    fn vocab_needs_reserved_lines() {
        assert!(Vocab::from_lines(&["[CLS]", "[SEP]"]).is_err());
    }

    #[test]
    fn zero_layers_keep_embeddings() {
        let vocab = Vocab::builtin();
        let seeded = TextEncoder::seeded(cfg(&vocab), 3).unwrap();
        let enc = TextEncoder::zeros_with_embeddings(cfg(&vocab), seeded.token_embed.clone(), seeded.pos_embed.clone()).unwrap();
        let seq = tokenize("a dog on grass", &vocab);
        assert_eq!(enc.encode_text(&seq).unwrap(), enc.embed(&seq).unwrap());
    }

    #[test]
    fn shapes_and_errors() {
        let vocab = Vocab::builtin();
        let enc = TextEncoder::seeded(cfg(&vocab), 3).unwrap();
        assert_eq!(enc.encode_text(&tokenize("", &vocab)).unwrap().shape(), (2, 8));
        let bad = TokenSequence {
            ids: vec![CLS_ID, vocab.len() as u32, SEP_ID],
        };
        assert!(matches!(enc.encode_text(&bad), Err(Error::Input(_))));
        let long = TokenSequence {
            ids: vec![UNK_ID; 65],
        };
        assert!(matches!(enc.encode_text(&long), Err(Error::Input(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let vocab = Vocab::builtin();
        let seq = tokenize("two cats sleep on a sofa", &vocab);
        let a = TextEncoder::seeded(cfg(&vocab), 11).unwrap().encode_text(&seq).unwrap();
        let b = TextEncoder::seeded(cfg(&vocab), 11).unwrap().encode_text(&seq).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.rows(), 2 + seq.content_len());
    }
}
