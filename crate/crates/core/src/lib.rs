//! Single-ended speech quality prediction with a CNN, self-attention and
//! attention-pooling network that outputs overall quality plus four quality
//! dimensions.

pub mod audio;
mod error;
pub mod evaluate;
pub mod features;
pub mod manifest;
pub mod model;
mod scores;
pub mod simulate;
pub mod train;

pub use audio::{load_audio, resample, write_audio, AudioBuffer};
pub use error::{Error, Result};
pub use evaluate::{evaluate_model, pearson, rmse_first_order, EvalReport};
pub use features::{compute_melspec, segment_melspec, zero_pad_segments, MelSegments, MelSpectrogram};
pub use manifest::{DatasetManifest, ManifestRow};
pub use model::{load_bundle, predict, save_bundle, Model, ModelConfig, WeightBundle};
pub use scores::{QualityScores, Task};
pub use simulate::{apply_degradation, build_corpus, label_sample, ConditionGrid, Degradation, DegradationSpec};
pub use train::{train_model, TrainConfig};
