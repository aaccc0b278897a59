//! Descriptor encoders shared by the database and query side.

use std::fmt;
use std::str::FromStr;

use crate::binary::{BinaryCode, ProjectionModel};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::pca::PcaModel;
use crate::scene::{Level, SceneModel};

/// Maps raw descriptors to the space the index compares in.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// Raw vectors, squared Euclidean distance.
    Raw { dim: usize },
    /// PCA-compressed vectors, squared Euclidean distance.
    Pca(PcaModel),
    /// Optional PCA followed by random projection to binary codes, Hamming distance.
    Binary {
        pca: Option<PcaModel>,
        projection: ProjectionModel,
    },
}

/// Which descriptors of a scene take part in retrieval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scope {
    /// The image-level descriptor only.
    ImageLevel,
    /// Image-level and part descriptors.
    #[default]
    AllParts,
}

impl Scope {
    fn to_byte(self) -> u8 {
        match self {
            Scope::ImageLevel => 0,
            Scope::AllParts => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Scope::ImageLevel),
            1 => Some(Scope::AllParts),
            _ => None,
        }
    }

    pub(crate) fn write(self, w: &mut ByteWriter) {
        w.u8(self.to_byte());
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::ImageLevel => "image",
            Scope::AllParts => "parts",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Scope::ImageLevel),
            "parts" => Ok(Scope::AllParts),
            other => Err(Error::Validation(format!("unknown scope {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureValue {
    Vector(Vec<f64>),
    Code(BinaryCode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeature {
    pub level: Level,
    pub value: FeatureValue,
}

/// A scene after encoding, tagged with the digest of the encoder used.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedScene {
    pub image_id: crate::scene::ImageId,
    pub encoder_digest: String,
    pub features: Vec<EncodedFeature>,
}

impl EncodedScene {
    pub fn image_level(&self) -> impl Iterator<Item = &EncodedFeature> {
        self.features.iter().filter(|f| f.level == Level::Image)
    }
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Raw { dim } => *dim,
            Encoder::Pca(p) => p.input_dim,
            Encoder::Binary { pca: Some(p), .. } => p.input_dim,
            Encoder::Binary { pca: None, projection } => projection.input_dim,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Encoder::Binary { .. })
    }

    pub fn bits(&self) -> Option<u32> {
        match self {
            Encoder::Binary { projection, .. } => Some(projection.bits),
            _ => None,
        }
    }

    pub fn encode_vector(&self, v: &[f32]) -> Result<FeatureValue> {
        match self {
            Encoder::Raw { dim } => {
                if v.len() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        actual: v.len(),
                    });
                }
                Ok(FeatureValue::Vector(v.iter().map(|x| f64::from(*x)).collect()))
            }
            Encoder::Pca(p) => Ok(FeatureValue::Vector(p.project(v)?)),
            Encoder::Binary { pca, projection } => {
                let short = match pca {
                    Some(p) => p.project(v)?,
                    None => v.iter().map(|x| f64::from(*x)).collect(),
                };
                Ok(FeatureValue::Code(projection.encode(&short)?))
            }
        }
    }

    /// Encodes the descriptors of `scene` selected by `scope`, in scene order.
    pub fn encode_scene(&self, scene: &SceneModel, scope: Scope) -> Result<EncodedScene> {
        let features = scene
            .parts
            .iter()
            .filter(|p| scope == Scope::AllParts || p.level == Level::Image)
            .map(|p| {
                Ok(EncodedFeature {
                    level: p.level,
                    value: self.encode_vector(&p.vector)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedScene {
            image_id: scene.image_id,
            encoder_digest: self.digest(),
            features,
        })
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        match self {
            Encoder::Raw { dim } => {
                w.u8(0);
                w.u32(*dim as u32);
            }
            Encoder::Pca(p) => {
                w.u8(1);
                w.bytes(&p.encode());
            }
            Encoder::Binary { pca, projection } => {
                w.u8(2);
                match pca {
                    Some(p) => {
                        w.u8(1);
                        w.bytes(&p.encode());
                    }
                    None => w.u8(0),
                }
                w.bytes(&projection.to_bytes());
            }
        }
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let at = r.offset();
        match r.u8("encoder kind")? {
            0 => Ok(Encoder::Raw {
                dim: r.u32("raw dim")? as usize,
            }),
            1 => Ok(Encoder::Pca(PcaModel::read(r)?)),
            2 => {
                let pca = match r.u8("pca flag")? {
                    0 => None,
                    _ => Some(PcaModel::read(r)?),
                };
                let projection = ProjectionModel::read(r)?;
                let e = Encoder::Binary { pca, projection };
                e.check()
                    .map_err(|e| Error::Corrupt { offset: at, reason: e.to_string() })?;
                Ok(e)
            }
            k => Err(Error::Corrupt {
                offset: at,
                reason: format!("unknown encoder kind {k}"),
            }),
        }
    }

    /// Checks that chained stages agree on dimensions.
    pub fn check(&self) -> Result<()> {
        if let Encoder::Binary {
            pca: Some(p),
            projection,
        } = self
        {
            if p.output_dim != projection.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: p.output_dim,
                    actual: projection.input_dim,
                });
            }
        }
        Ok(())
    }

    /// Hex SHA-256 identifying this encoder; equal digests mean equal encodings.
    pub fn digest(&self) -> String {
        let mut w = ByteWriter::new();
        self.write(&mut w);
        crate::digest_hex(&w.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binary::train_projection;
    use crate::scene::{BoundingBox, ImageExtent, ImageId, PartDescriptor};

    fn scene() -> SceneModel {
        let extent = ImageExtent::default();
        SceneModel {
            image_id: ImageId(4),
            viewpoint: None,
            parts: vec![
                PartDescriptor {
                    bbox: BoundingBox::full(extent),
                    level: Level::Image,
                    vector: vec![1.0, -2.0, 0.5],
                },
                PartDescriptor {
                    bbox: BoundingBox { left: 0, top: 0, width: 10, height: 10 },
                    level: Level::Part,
                    vector: vec![0.0, 1.0, 3.0],
                },
            ],
        }
    }

    #[test]
    fn scope_filters_parts() {
        let e = Encoder::Raw { dim: 3 };
        assert_eq!(e.encode_scene(&scene(), Scope::ImageLevel).unwrap().features.len(), 1);
        assert_eq!(e.encode_scene(&scene(), Scope::AllParts).unwrap().features.len(), 2);
        assert!(Encoder::Raw { dim: 4 }.encode_scene(&scene(), Scope::AllParts).is_err());
    }

    #[test]
    fn digest_separates_encoders() {
        let a = Encoder::Binary {
            pca: None,
            projection: train_projection::<Vec<f64>>(1, 3, 16, &[]).unwrap(),
        };
        let b = Encoder::Binary {
            pca: None,
            projection: train_projection::<Vec<f64>>(2, 3, 16, &[]).unwrap(),
        };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
        let mut w = ByteWriter::new();
        a.write(&mut w);
        let bytes = w.into_inner();
        assert_eq!(Encoder::read(&mut ByteReader::new(&bytes)).unwrap(), a);
    }
}
