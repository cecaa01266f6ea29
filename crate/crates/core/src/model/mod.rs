//! U-Net encoder-decoder with batch norm and channel dropout.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DropoutSites, UNetConfig};
pub use forward::{binarize, probability_maps, StatUpdate, UNet};
pub use params::{manifest, ParamKind, ParamSpec, ParameterSet};
