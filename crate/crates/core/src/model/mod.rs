//! Split U-Net, optimizer and loss evaluation.

mod adam;
mod checkpoint;
mod params;
mod split;
mod unet;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ManifestEntry, CHECKPOINT_FORMAT_VERSION};
pub use params::{ClientWeights, Param, ParamSet, SplitModelWeights};
pub use split::{
    dice_value, monolithic_predict, monolithic_train_step, per_sample_losses, predict_labels, split_predict,
    split_train_step, SplitGrads, StepOutput,
};
pub use unet::{
    build_split_unet, forward_back, forward_front, forward_server, ArchConfig, BoundParams, ConvLayer, Stage, StageRun,
};
