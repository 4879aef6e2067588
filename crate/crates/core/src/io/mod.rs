//! File formats: PNG images, the binary checkpoint container and JSON run
//! configuration.

pub mod checkpoint;
pub mod config;
pub mod image;

pub use checkpoint::{Checkpoint, CheckpointMetadata};
pub use config::RunConfig;
pub use image::{list_pngs, load_dir, load_png, save_gray_png, save_png};
