//! The benchmark's method matrix and the models the methods share.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binary::{train_projection, ProjectionModel};
use crate::error::{Error, Result};
use crate::index::{Encoder, Scope};
use crate::pca::{train_pca, PcaModel};
use crate::scene::DescriptorPack;

/// PCA width feeding every binarized and bag-of-parts method.
pub const SHORT_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MethodConfig {
    /// Raw image-level descriptors.
    Dcnn,
    /// PCA-compressed image-level descriptors.
    Pca(usize),
    /// Binarized image-level descriptors.
    Bin(u32),
    /// Binarized image-level and part descriptors.
    Bodw(u32),
    /// PCA-compressed image-level and part descriptors.
    Bodf,
}

impl MethodConfig {
    pub const ALL: [MethodConfig; 11] = [
        MethodConfig::Dcnn,
        MethodConfig::Pca(128),
        MethodConfig::Pca(256),
        MethodConfig::Pca(512),
        MethodConfig::Bin(20),
        MethodConfig::Bin(16),
        MethodConfig::Bin(12),
        MethodConfig::Bodw(20),
        MethodConfig::Bodw(16),
        MethodConfig::Bodw(12),
        MethodConfig::Bodf,
    ];

    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn scope(&self) -> Scope {
        match self {
            MethodConfig::Bodw(_) | MethodConfig::Bodf => Scope::AllParts,
            _ => Scope::ImageLevel,
        }
    }

    /// Requested PCA width, if the method compresses.
    pub fn pca_dim(&self) -> Option<usize> {
        match self {
            MethodConfig::Dcnn => None,
            MethodConfig::Pca(k) => Some(*k),
            _ => Some(SHORT_DIM),
        }
    }

    pub fn bits(&self) -> Option<u32> {
        match self {
            MethodConfig::Bin(b) | MethodConfig::Bodw(b) => Some(*b),
            _ => None,
        }
    }
}

impl fmt::Display for MethodConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodConfig::Dcnn => write!(f, "dcnn"),
            MethodConfig::Pca(k) => write!(f, "pca{k}"),
            MethodConfig::Bin(b) => write!(f, "bin{b}"),
            MethodConfig::Bodw(b) => write!(f, "bodw{b}"),
            MethodConfig::Bodf => write!(f, "bodf"),
        }
    }
}

impl FromStr for MethodConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodConfig::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<String> = MethodConfig::ALL.iter().map(|m| m.name()).collect();
                Error::Validation(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl TryFrom<String> for MethodConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodConfig> for String {
    fn from(m: MethodConfig) -> String {
        m.name()
    }
}

/// Parses a comma-separated method list; `all` selects the full matrix.
pub fn parse_methods(s: &str) -> Result<Vec<MethodConfig>> {
    if s.trim() == "all" {
        return Ok(MethodConfig::ALL.to_vec());
    }
    s.split(',').map(|t| t.trim().parse()).collect()
}

/// Independent seed for one named purpose.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    crate::geometry::task_seed(seed, crate::scene::ImageId(tag))
}

/// PCA and projection models trained once on the database and shared by all methods.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedModels {
    pub input_dim: usize,
    /// Widest model needed, or `None` when no method compresses.
    pub pca: Option<PcaModel>,
    pub projections: BTreeMap<u32, ProjectionModel>,
}

impl SharedModels {
    /// Trains one joint PCA over image-level and part descriptors of the
    /// database, wide enough for every requested method, plus one projection
    /// per bit width with median thresholds on the short vectors.
    pub fn train(database: &DescriptorPack, methods: &[MethodConfig], seed: u64) -> Result<Self> {
        let vectors: Vec<&[f32]> = database
            .models
            .iter()
            .flat_map(|m| m.parts.iter().map(|p| p.vector.as_slice()))
            .collect();
        let d = database.dim;
        let wanted = methods.iter().filter_map(|m| m.pca_dim()).max();
        let pca = match wanted {
            Some(k) => {
                let cap = d.min(vectors.len().saturating_sub(1));
                if cap == 0 {
                    return Err(Error::InsufficientData(format!(
                        "{} training vectors of dimension {d} cannot train PCA",
                        vectors.len()
                    )));
                }
                if k > cap {
                    log::warn!("PCA width {k} exceeds the data ({d} dims, {} vectors); using {cap}", vectors.len());
                }
                Some(train_pca(&vectors, k.min(cap))?)
            }
            None => None,
        };
        let mut projections = BTreeMap::new();
        let bit_widths: Vec<u32> = methods.iter().filter_map(|m| m.bits()).collect();
        if !bit_widths.is_empty() {
            let short = effective(pca.as_ref().expect("binary methods compress"), SHORT_DIM)?;
            let training: Vec<Vec<f64>> = vectors.iter().map(|v| short.project(v)).collect::<Result<_>>()?;
            for b in bit_widths {
                if let std::collections::btree_map::Entry::Vacant(e) = projections.entry(b) {
                    e.insert(train_projection(derive_seed(seed, u64::from(b)), short.output_dim, b, &training)?);
                }
            }
        }
        Ok(Self {
            input_dim: d,
            pca,
            projections,
        })
    }

    /// Output width a method actually gets after capping by the data.
    pub fn effective_dim(&self, method: MethodConfig) -> Option<usize> {
        let k = method.pca_dim()?;
        self.pca.as_ref().map(|p| k.min(p.output_dim))
    }

    pub fn encoder(&self, method: MethodConfig) -> Result<Encoder> {
        let missing = || Error::Validation(format!("models were not trained for {method}"));
        Ok(match method {
            MethodConfig::Dcnn => Encoder::Raw { dim: self.input_dim },
            MethodConfig::Pca(k) => Encoder::Pca(effective(self.pca.as_ref().ok_or_else(missing)?, k)?),
            MethodConfig::Bodf => Encoder::Pca(effective(self.pca.as_ref().ok_or_else(missing)?, SHORT_DIM)?),
            MethodConfig::Bin(b) | MethodConfig::Bodw(b) => Encoder::Binary {
                pca: Some(effective(self.pca.as_ref().ok_or_else(missing)?, SHORT_DIM)?),
                projection: self.projections.get(&b).ok_or_else(missing)?.clone(),
            },
        })
    }
}

fn effective(pca: &PcaModel, k: usize) -> Result<PcaModel> {
    pca.truncate(k.min(pca.output_dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in MethodConfig::ALL {
            assert_eq!(m.name().parse::<MethodConfig>().unwrap(), m);
        }
        assert!("bin24".parse::<MethodConfig>().is_err());
        assert_eq!(parse_methods("all").unwrap().len(), 11);
        assert_eq!(parse_methods("bodw20, dcnn").unwrap(), vec![MethodConfig::Bodw(20), MethodConfig::Dcnn]);
        let json = serde_json::to_string(&MethodConfig::Pca(256)).unwrap();
        assert_eq!(json, "\"pca256\"");
    }

    #[test]
    fn pipelines() {
        assert_eq!(MethodConfig::Bodw(16).scope(), Scope::AllParts);
        assert_eq!(MethodConfig::Bin(16).scope(), Scope::ImageLevel);
        assert_eq!(MethodConfig::Bodf.bits(), None);
        assert_eq!(MethodConfig::Bin(12).pca_dim(), Some(128));
    }
}
