//! Synthetic labelled corpora: speech-like clean signals, seeded
//! degradations and rule-based quality labels.

mod corpus;
mod degrade;
mod labels;
mod speech;

pub use corpus::{build_corpus, list_wavs, plan_corpus, ConditionGrid, GridAxes, LabeledSample, RandomConditions};
pub use degrade::{
    active_frames, active_power, apply_chain, apply_degradation, bandpass_gain, derive_seed, erasure_pattern,
    noise_for_snr, Degradation, DegradationSpec, FRAME,
};
pub use labels::{label_sample, summarize, tables, ChainSummary, LabelTables, Table};
pub use speech::{synthesize_speech, write_clean_set, Talker, ACTIVE_LEVEL_DBFS};
