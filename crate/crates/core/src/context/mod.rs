//! Conditioning inputs and the synthetic scene dataset.

mod assemble;
mod store;
mod synth;

pub use assemble::{
    apply_data_dropout, dropout_mask, previous_frames, ContextConfig, ContextEncoder,
    ContextLayout, ContextVector, EncoderKind, RawBuilder, RawContext, Segment, Variant,
};
pub use store::{load_dataset, save_dataset, DatasetManifest, DATASET_VERSION};
pub use synth::{
    audio_energy, clamped_window, synth_audio, synth_dataset, AudioFeatureProvider, CoeffSequence,
    FileAudio, SceneSpec, SignalAudio,
};
