//! Dataset synthesis and I/O, run configuration, two-stage training,
//! generation, evaluation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod generate;
mod train;

pub use checkpoint::{Checkpoint, StoredTensor, FORMAT_VERSION};
pub use config::RunConfig;
pub use dataset::{
    load_dataset, name_seed, sample_names, synth_sample, synthesize, DatasetEntry, DatasetManifest,
    Sample, SynthConfig,
};
pub use generate::{evaluate, generate, Generated};
pub use train::{
    checkpoint_name, codec_checksum, prepare_samples, run_training, train_stage_one,
    train_stage_two, StepView, TrainOutcome, TrainedModel, CODEC_LOG, FINAL_CHECKPOINT, LOSS_LOG,
    STAGE1_CHECKPOINT,
};
