//! Faithful attention explanations for a small convolutional classifier.
//!
//! The crate couples a classifier (the [`encoder`]) with an attention LSTM
//! decoder (the [`explainer`]) that verbalizes what the classifier looked at.
//! Training adds an [`alignment`] regularizer that re-grounds each step's
//! attention using the whole output sentence. At inference, extrinsic saliency
//! maps (GradCAM, gaze, hand-made) can replace the model's own attention.
//! The [`metrics`] module scores captions with BLEU-4, ROUGE-L, CIDEr-D and the
//! faithful explanation rate (FER).

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Precision, Real, Tensor};
pub mod encoder;
pub mod pnm;
pub mod metrics;
pub mod synthdata;
pub mod explainer;
pub mod alignment;
pub mod training;
