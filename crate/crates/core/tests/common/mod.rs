//! Small deterministic models shared by the integration tests.
#![allow(dead_code)]

use fae_core::alignment::{Aligner, AlignerConfig};
use fae_core::encoder::FeatureGrid;
use fae_core::explainer::{ContextScale, Explainer, ExplainerConfig};
use fae_core::training::CaptionExample;
use fae_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vocabulary of 12 (8 words), K = 4, D = 8.
pub fn toy_config() -> (ExplainerConfig, AlignerConfig) {
    let e = ExplainerConfig {
        vocab_size: 12,
        embed_dim: 4,
        hidden_dim: 8,
        att_dim: 4,
        feature_dim: 3,
        locations: 4,
        context_scale: ContextScale::PerPaper,
        max_len: 6,
    };
    let a = AlignerConfig {
        vocab_size: 12,
        embed_dim: 4,
        hidden_dim: 8,
    };
    (e, a)
}

pub fn toy_models<T: Real>(seed: u64) -> (Explainer<T>, Aligner<T>) {
    let (e, a) = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Explainer::new(e, &mut rng).unwrap(), Aligner::new(a, &mut rng).unwrap())
}

pub fn random_grid<T: Real>(rng: &mut impl Rng, side: usize, channels: usize) -> FeatureGrid<T> {
    let data = (0..side * side * channels).map(|_| T::lit(rng.gen_range(0.0..1.5))).collect();
    FeatureGrid::new(side, side, channels, data).unwrap()
}

/// Two classes, one caption each, of different lengths.
pub fn toy_batch<T: Real>(seed: u64) -> Vec<CaptionExample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        CaptionExample {
            features: random_grid(&mut rng, 2, 3),
            tokens: vec![4, 5, 6],
        },
        CaptionExample {
            features: random_grid(&mut rng, 2, 3),
            tokens: vec![7, 8],
        },
    ]
}
