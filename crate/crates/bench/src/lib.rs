//! Shared fixtures for the criterion benches.

use fae_core::alignment::Aligner;
use fae_core::encoder::{Classifier, ClassifierConfig, FeatureGrid, Image};
use fae_core::explainer::Explainer;
use fae_core::training::{init_classifier, init_explainer, CaptionExample, ExplainerDims, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_images(seed: u64, n: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen::<f32>()).collect()).expect("32×32×3"))
        .collect()
}

/// Reference classifier (8 classes) with random weights.
pub fn classifier() -> Classifier {
    init_classifier(ClassifierConfig::reference(8), 7)
}

/// Reference-size explainer and aligner over a 30-word vocabulary, with a
/// feature grid to decode from.
pub fn explainer() -> (Explainer, Aligner, FeatureGrid<f32>) {
    let features = classifier().classify_batch(&[&random_images(1, 1)[0]]).expect("forward").remove(0).1;
    let (e, a) = init_explainer(30, &features, &ExplainerDims::default(), &TrainConfig::default()).expect("valid dims");
    (e, a, features)
}

/// A batch of caption examples of length 8..=13.
pub fn caption_batch(size: usize) -> Vec<CaptionExample<f32>> {
    let clf = classifier();
    let images = random_images(2, size);
    let refs: Vec<&Image> = images.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    clf.classify_batch(&refs)
        .expect("forward")
        .into_iter()
        .map(|(_, features)| CaptionExample {
            features,
            tokens: (0..rng.gen_range(8..=13)).map(|_| rng.gen_range(4..30)).collect(),
        })
        .collect()
}
