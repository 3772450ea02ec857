//! Network assembly, parameter counting, receptive-field analysis and checkpoints.

mod analysis;
mod checkpoint;
mod config;
mod gradcheck;
mod network;

pub use analysis::{
    compose, count_parameters, deepest_path, receptive_field, receptive_field_of, LayerParams, ParamReport, ReceptiveField,
    RfLayer,
};
pub use checkpoint::{load_model, load_model_checked, save_model, Checkpoint, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Preset, LAYERS, OUTPUT_STRIDE, SMALL_KERNEL};
pub use gradcheck::{end_to_end_gradcheck, loss_and_grads, micro_config, GroupCheck};
pub use network::{Block, ConvLayer, ForwardVars, HeadOutputs, NormLayer, PoseNet};
