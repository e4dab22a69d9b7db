//! Binary formats, dataset manifests and the engine configuration file.

pub mod config;
pub mod formats;
pub mod manifest;

pub use config::EngineConfig;
pub use formats::{
    decode_field, decode_grid, decode_mask, decode_model, encode_field, encode_grid, encode_grid_packed,
    encode_mask, encode_model,
};
pub use manifest::{load_manifest, write_dataset, Manifest, ManifestEntry};
