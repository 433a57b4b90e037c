//! Minimal CPU neural-network stack: tensors live in [`crate::tensor`],
//! parameters in a [`ParamStore`], and each layer implements an explicit
//! forward/backward pair. No external ML framework.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod init;
pub mod layers;
pub mod store;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, softmax_rows, split_channels,
    BatchNorm2d, Dense, Dropout, MaxPool2d, SpatialAttention,
};
pub use store::{ParamId, ParamStore};
