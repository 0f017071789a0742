//! Seeded parameter initialization.
//!
//! Synthetic weights come from ChaCha8 seeded with a `u64`. Every sampled
//! value is rounded to the nearest `f32` so that a saved and reloaded model
//! is bit-identical to the freshly initialized one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::FeatureMatrix;

pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn sample(&mut self, scale: f64) -> f64 {
        let v: f64 = self.rng.gen_range(-1.0..1.0) * scale;
        v as f32 as f64
    }

    /// Uniform in `[-1, 1) / sqrt(fan_in)`.
    pub fn matrix(&mut self, fan_in: usize, fan_out: usize) -> FeatureMatrix {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.sample(scale)).collect();
        FeatureMatrix::new(fan_in, fan_out, data).expect("nonempty shape")
    }

    /// `rows × dim` embedding table scaled by `1 / sqrt(dim)`.
    pub fn table(&mut self, rows: usize, dim: usize) -> FeatureMatrix {
        let scale = 1.0 / (dim as f64).sqrt();
        let data = (0..rows * dim).map(|_| self.sample(scale)).collect();
        FeatureMatrix::new(rows, dim, data).expect("nonempty shape")
    }

    pub fn vector(&mut self, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| self.sample(scale)).collect()
    }
}
