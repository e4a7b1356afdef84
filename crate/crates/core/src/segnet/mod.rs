//! The segmentation model family and its losses.

mod config;
mod loss;
mod model;

pub use config::{ModelConfig, PriorKind};
pub use loss::{ce_dice_loss, negative_learning_loss, one_hot_batch, supervised_losses, DICE_EPS, NL_EPS};
pub use model::{HeadOutputs, SegNet};
