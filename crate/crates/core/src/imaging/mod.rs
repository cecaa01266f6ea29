//! Rasters, Netpbm I/O, preprocessing, and augmentation.

mod augment;
mod netpbm;
mod preprocess;
mod types;

pub use augment::{
    augment_dataset, format_augment_manifest, parse_augment_manifest, AugmentKind, AugmentOp, AugmentRecord, AugmentSpec,
    AugmentedPair,
};
pub use netpbm::{decode_netpbm, encode_netpbm, read_netpbm, write_netpbm};
pub use preprocess::{
    clahe, clahe_tile_maps, clip_histogram, clip_limit, equalization_map, hflip, normalize, preprocess_image,
    preprocess_mask, resize_image, resize_mask, rotate, rotate_point, tile_bounds, to_grayscale, vflip,
    ClaheConfig, PreprocessConfig, Raster, CLAHE_BINS,
};
pub use types::{BinaryMask, GrayImage, ImageU8, ProbabilityMap};
