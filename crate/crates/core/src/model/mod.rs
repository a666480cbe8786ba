//! Framewise model, time-dependency model and per-task pooling heads, plus
//! the weight-bundle format.

mod bundle;
mod config;
mod network;

pub use bundle::{load_bundle, save_bundle, NamedTensor, WeightBundle, FORMAT_VERSION, MAGIC};
pub use config::{Framewise, ModelConfig, Pooling, TimeDependency};
pub use network::{param_specs, ForwardOutput, Model, ParamSpec, SegmentBatch, ShapeTrace, CNN_OUT};

use crate::audio::AudioBuffer;
use crate::error::Result;
use crate::features::extract_segments;
use crate::scores::QualityScores;

/// Full pipeline for one signal: features, network, five scores.
pub fn predict(buffer: &AudioBuffer, bundle: &WeightBundle) -> Result<QualityScores> {
    let model: Model<f32> = bundle.to_model()?;
    model.predict_segments(&extract_segments(buffer)?)
}
