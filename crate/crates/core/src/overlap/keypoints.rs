//! Keypoint sets and their file format.
//!
//! A keypoint file is a sequence of records. Each record is one JSON header
//! line followed by `count * (2 + dim)` little-endian `f32` values: `x, y`
//! then the descriptor, per keypoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::scene::{ImageExtent, ImageId};

pub const KEYPOINT_FORMAT: &str = "NBKP";
pub const KEYPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    /// Pixel position `(u, v)`.
    pub position: [f32; 2],
    pub descriptor: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub image_id: ImageId,
    pub extent: ImageExtent,
    pub dim: usize,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    format: String,
    version: u32,
    image_id: u64,
    width: u32,
    height: u32,
    count: usize,
    dim: usize,
}

impl KeypointSet {
    pub fn new(image_id: ImageId, extent: ImageExtent, dim: usize, keypoints: Vec<Keypoint>) -> Result<Self> {
        let set = Self {
            image_id,
            extent,
            dim,
            keypoints,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.extent.width as f32, self.extent.height as f32);
        for (i, k) in self.keypoints.iter().enumerate() {
            let [u, v] = k.position;
            if !(u >= 0.0 && u <= w && v >= 0.0 && v <= h) {
                return Err(Error::Validation(format!(
                    "image {}: keypoint {i} at ({u}, {v}) outside {}x{}",
                    self.image_id, self.extent.width, self.extent.height
                )));
            }
            if k.descriptor.len() != self.dim {
                return Err(Error::Validation(format!(
                    "image {}: keypoint {i} descriptor has dimension {}, expected {}",
                    self.image_id,
                    k.descriptor.len(),
                    self.dim
                )));
            }
            if k.descriptor.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "image {}: keypoint {i} has a non-finite descriptor entry",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        self.validate()?;
        let header = RecordHeader {
            format: KEYPOINT_FORMAT.into(),
            version: KEYPOINT_VERSION,
            image_id: self.image_id.0,
            width: self.extent.width,
            height: self.extent.height,
            count: self.keypoints.len(),
            dim: self.dim,
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.push(b'\n');
        for k in &self.keypoints {
            out.extend_from_slice(&k.position[0].to_le_bytes());
            out.extend_from_slice(&k.position[1].to_le_bytes());
            for x in &k.descriptor {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(())
    }
}

pub fn encode_keypoint_sets(sets: &[KeypointSet]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in sets {
        s.encode_into(&mut out)?;
    }
    Ok(out)
}

pub fn decode_keypoint_sets(bytes: &[u8]) -> Result<Vec<KeypointSet>> {
    let mut r = ByteReader::new(bytes);
    let mut sets = Vec::new();
    while !r.is_empty() {
        let at = r.offset();
        let rest = r.remaining();
        let nl = rest.iter().position(|b| *b == b'\n').ok_or_else(|| Error::Corrupt {
            offset: at,
            reason: "keypoint header line not terminated".into(),
        })?;
        let header: RecordHeader = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::Format(format!("keypoint header at byte {at}: {e}")))?;
        if header.format != KEYPOINT_FORMAT {
            return Err(Error::Format(format!(
                "keypoint header at byte {at}: format {:?}, expected {KEYPOINT_FORMAT:?}",
                header.format
            )));
        }
        if header.version != KEYPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported keypoint version {}",
                header.version
            )));
        }
        r.advance(nl + 1);
        let mut keypoints = Vec::with_capacity(header.count.min(r.remaining().len() / 8 + 1));
        for _ in 0..header.count {
            let pos = r.f32_vec(2, "keypoint position")?;
            let descriptor = r.f32_vec(header.dim, "keypoint descriptor")?;
            keypoints.push(Keypoint {
                position: [pos[0], pos[1]],
                descriptor,
            });
        }
        sets.push(KeypointSet::new(
            ImageId(header.image_id),
            ImageExtent {
                width: header.width,
                height: header.height,
            },
            header.dim,
            keypoints,
        )?);
    }
    Ok(sets)
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<Vec<KeypointSet>> {
    decode_keypoint_sets(&read_file(path.as_ref())?)
}

pub fn save_keypoints(sets: &[KeypointSet], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_keypoint_sets(sets)?)
}
