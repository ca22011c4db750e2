//! Corpus generation, augmentation, checkpoints, run configuration and the
//! stage runners behind the command-line tool.

mod augment;
mod checkpoint;
mod config;
mod dataset;
mod selfcheck;
mod stages;

pub use augment::{augment, zoom_center};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};
pub use config::{
    EvaluateStage, FinetuneStage, RunConfig, SampleStage, ScalesStage, TokenizerStage, VarStage,
    WeightsStage,
};
pub use dataset::{
    color, generate_synthetic_dataset, Dataset, Sample, ShapeClass, SubjectSpec, SyntheticSpec,
};
pub use selfcheck::{micro_model, model_gradcheck, random_tokens, selfcheck, Check};
pub use stages::{
    load_model, load_tokenizer, run_stage, subject_set, StageReport, MODEL_FILE, TOKENIZER_FILE,
    TUNED_FILE,
};
