//! The two encoders bundled as one model, with weight-file conversion.

use crate::error::Result;
use crate::model_io::{self, WeightSet};
use crate::text::{TextConfig, TextEncoder};
use crate::vit::{VisionEncoder, VitConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ElipModel {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
}

impl ElipModel {
    /// Vision weights from `seed`, text weights from `seed + 1`.
    pub fn seeded(vit: VitConfig, text: TextConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            vision: VisionEncoder::seeded(vit, seed)?,
            text: TextEncoder::seeded(text, seed.wrapping_add(1))?,
        })
    }

    pub fn to_weights(&self) -> Result<WeightSet> {
        let mut set = WeightSet::new();
        self.vision.export(&mut set)?;
        self.text.export(&mut set)?;
        Ok(set)
    }

    pub fn from_weights(vit: VitConfig, text: TextConfig, weights: &WeightSet) -> Result<Self> {
        Ok(Self {
            vision: VisionEncoder::import(vit, weights)?,
            text: TextEncoder::import(text, weights)?,
        })
    }

    pub fn save(&self) -> Result<Vec<u8>> {
        Ok(model_io::save_weights(&self.to_weights()?)?)
    }

    pub fn load(vit: VitConfig, text: TextConfig, bytes: &[u8]) -> Result<Self> {
        Self::from_weights(vit, text, &model_io::load_weights(bytes)?)
    }
}
