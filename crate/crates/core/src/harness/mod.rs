//! Training, evaluation, inference and gradient checks on top of the
//! network, plus the weights file format.

mod adam;
mod config;
mod data;
mod eval;
pub mod gradcheck_suite;
mod train;
mod weights_io;

pub use adam::{adam_step, AdamParams, AdamState};
pub use config::{learning_rate, TrainConfig};
pub use data::{
    augment, file_name, list_pngs, load_png, quantize, rgb_to_tensor, sample_batch, sample_training_pair,
    save_png, synthetic_image, tensor_to_rgb, write_synthetic_dataset, HrPool, TrainingPair,
};
pub use eval::{
    degrade_dataset, evaluate, evaluate_bicubic, evaluate_weights, evaluate_with, infer, write_report, EvalOptions,
    DEFAULT_GAUSSIAN8_INDEX,
};
pub use train::{train, train_on_pool, TrainLog, Trainer};
pub use weights_io::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};
