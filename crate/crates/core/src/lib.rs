//! Place recognition by naive-Bayes nearest-neighbour scene matching,
//! with a localization-difficulty benchmark built on view overlap.

pub mod bench;
pub mod binary;
mod codec;
pub mod error;
pub mod geometry;
pub mod index;
pub mod overlap;
pub mod pca;
pub mod scene;

use sha2::{Digest, Sha256};

pub use error::{Error, Result};
pub use scene::{DescriptorPack, ImageId, SceneModel, Viewpoint};

/// Lowercase hex SHA-256 of `bytes`.
pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
