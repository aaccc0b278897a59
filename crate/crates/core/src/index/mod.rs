//! Experience index: place classes mined from a library, an inverted file
//! over library features, and NBNN image-to-class ranking.
//!
//! The distance from a query `I` to an indexed image `C` is
//! `sum over f in I of min over f' in C of dist(f, f')`, with Hamming
//! distance for binary encoders and squared Euclidean distance otherwise.
//! Only database features are mined into the library; query features are
//! compared directly.

pub mod encoder;
pub mod library;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary::BinaryCode;
use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scene::{ImageId, Level, SceneModel};

pub use encoder::{EncodedFeature, EncodedScene, Encoder, FeatureValue, Scope};
pub use library::{load_library, save_library, FeatureId, Library};

pub const INDEX_MAGIC: &[u8; 4] = b"NBIX";
pub const INDEX_VERSION: u32 = 1;

/// Library features mined for one database descriptor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedDescriptor {
    pub level: Level,
    /// Nearest library features, nearest first.
    pub neighbors: Vec<FeatureId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredVector {
    pub level: Level,
    pub vector: Vec<f64>,
}

/// The library features approximating one database image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaceClass {
    pub image_id: ImageId,
    pub member_ids: BTreeSet<FeatureId>,
}

#[derive(Clone, Debug, PartialEq)]
enum Store {
    Vectors(BTreeMap<ImageId, Vec<StoredVector>>),
    Codes {
        library: Library,
        n_p: usize,
        classes: BTreeMap<ImageId, Vec<MinedDescriptor>>,
        /// Feature ID to the sorted images whose class contains it.
        postings: BTreeMap<FeatureId, Vec<ImageId>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexConfig {
    pub scope: Scope,
    /// Library features mined per descriptor.
    pub n_p: usize,
    /// Library for binary encoders; `None` selects the implicit full library.
    pub library: Option<Library>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            scope: Scope::AllParts,
            n_p: 1,
            library: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QueryMode {
    /// Every library feature of every class is considered.
    #[default]
    Exact,
    /// Only library features within this Hamming radius of the query code;
    /// an empty ball costs `bits + 1`.
    Probe(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: ImageId,
    pub distance: f64,
}

/// Indexed images by ascending distance, ties by image id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn from_scores(scores: impl IntoIterator<Item = (ImageId, f64)>) -> Self {
        let mut entries: Vec<RankedEntry> = scores
            .into_iter()
            .map(|(image_id, distance)| RankedEntry { image_id, distance })
            .collect();
        entries.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.image_id.cmp(&b.image_id)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One-based rank of `id`.
    pub fn rank_of(&self, id: ImageId) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == id).map(|p| p + 1)
    }

    pub fn distance_of(&self, id: ImageId) -> Option<f64> {
        self.entries.iter().find(|e| e.image_id == id).map(|e| e.distance)
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.entries.iter().map(|e| e.image_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceIndex {
    encoder: Encoder,
    digest: String,
    scope: Scope,
    store: Store,
}

fn vector_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ExperienceIndex {
    pub fn new(encoder: Encoder, config: IndexConfig) -> Result<Self> {
        encoder.check()?;
        let store = match encoder.bits() {
            Some(bits) => {
                if config.n_p == 0 {
                    return Err(Error::Validation("n_p must be at least 1".into()));
                }
                let library = match config.library {
                    Some(l) => l,
                    None => Library::implicit(bits)?,
                };
                if library.bits() != bits {
                    return Err(Error::DimensionMismatch {
                        expected: bits as usize,
                        actual: library.bits() as usize,
                    });
                }
                Store::Codes {
                    library,
                    n_p: config.n_p,
                    classes: BTreeMap::new(),
                    postings: BTreeMap::new(),
                }
            }
            None => {
                if config.library.is_some() {
                    return Err(Error::Validation(
                        "a library only applies to binary encoders".into(),
                    ));
                }
                Store::Vectors(BTreeMap::new())
            }
        };
        Ok(Self {
            digest: encoder.digest(),
            encoder,
            scope: config.scope,
            store,
        })
    }

    /// Fresh index over `scenes`.
    pub fn build(encoder: Encoder, config: IndexConfig, scenes: &[SceneModel]) -> Result<Self> {
        let mut index = Self::new(encoder, config)?;
        let encoded = scenes
            .par_iter()
            .map(|s| index.encode(s))
            .collect::<Result<Vec<_>>>()?;
        for e in &encoded {
            index.insert_encoded(e)?;
        }
        Ok(index)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_digest(&self) -> &str {
        &self.digest
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn library(&self) -> Option<&Library> {
        match &self.store {
            Store::Codes { library, .. } => Some(library),
            Store::Vectors(_) => None,
        }
    }

    pub fn n_p(&self) -> Option<usize> {
        match &self.store {
            Store::Codes { n_p, .. } => Some(*n_p),
            Store::Vectors(_) => None,
        }
    }

    pub fn postings(&self) -> Option<&BTreeMap<FeatureId, Vec<ImageId>>> {
        match &self.store {
            Store::Codes { postings, .. } => Some(postings),
            Store::Vectors(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Vectors(m) => m.len(),
            Store::Codes { classes, .. } => classes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: ImageId) -> bool {
        match &self.store {
            Store::Vectors(m) => m.contains_key(&id),
            Store::Codes { classes, .. } => classes.contains_key(&id),
        }
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        match &self.store {
            Store::Vectors(m) => m.keys().copied().collect(),
            Store::Codes { classes, .. } => classes.keys().copied().collect(),
        }
    }

    pub fn mined(&self, id: ImageId) -> Option<&[MinedDescriptor]> {
        match &self.store {
            Store::Codes { classes, .. } => classes.get(&id).map(Vec::as_slice),
            Store::Vectors(_) => None,
        }
    }

    pub fn place_class(&self, id: ImageId) -> Option<PlaceClass> {
        let mined = self.mined(id)?;
        Some(PlaceClass {
            image_id: id,
            member_ids: mined.iter().flat_map(|m| m.neighbors.iter().copied()).collect(),
        })
    }

    pub fn encode(&self, scene: &SceneModel) -> Result<EncodedScene> {
        self.encoder.encode_scene(scene, self.scope)
    }

    fn check_digest(&self, scene: &EncodedScene) -> Result<()> {
        if scene.encoder_digest != self.digest {
            return Err(Error::EncoderMismatch {
                expected: self.digest.clone(),
                actual: scene.encoder_digest.clone(),
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, scene: &SceneModel) -> Result<()> {
        let e = self.encode(scene)?;
        self.insert_encoded(&e)
    }

    pub fn insert_encoded(&mut self, scene: &EncodedScene) -> Result<()> {
        self.check_digest(scene)?;
        let id = scene.image_id;
        if self.contains(id) {
            return Err(Error::DuplicateImage(id.0));
        }
        if scene.features.is_empty() {
            return Err(Error::Validation(format!("image {id} has no descriptors")));
        }
        match &mut self.store {
            Store::Vectors(m) => {
                let stored = scene
                    .features
                    .iter()
                    .map(|f| match &f.value {
                        FeatureValue::Vector(v) => Ok(StoredVector {
                            level: f.level,
                            vector: v.clone(),
                        }),
                        FeatureValue::Code(_) => Err(Error::Validation(
                            "binary feature given to a vector index".into(),
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?;
                m.insert(id, stored);
            }
            Store::Codes {
                library,
                n_p,
                classes,
                postings,
            } => {
                let mined = scene
                    .features
                    .iter()
                    .map(|f| match &f.value {
                        FeatureValue::Code(c) => Ok(MinedDescriptor {
                            level: f.level,
                            neighbors: library.nearest(c, *n_p)?,
                        }),
                        FeatureValue::Vector(_) => Err(Error::Validation(
                            "vector feature given to a binary index".into(),
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let members: BTreeSet<FeatureId> =
                    mined.iter().flat_map(|m| m.neighbors.iter().copied()).collect();
                for fid in members {
                    let list = postings.entry(fid).or_default();
                    if let Err(pos) = list.binary_search(&id) {
                        list.insert(pos, id);
                    }
                }
                classes.insert(id, mined);
            }
        }
        Ok(())
    }

    pub fn delete(&mut self, id: ImageId) -> Result<()> {
        match &mut self.store {
            Store::Vectors(m) => {
                m.remove(&id).ok_or(Error::UnknownImage(id.0))?;
            }
            Store::Codes {
                classes, postings, ..
            } => {
                let mined = classes.remove(&id).ok_or(Error::UnknownImage(id.0))?;
                let members: BTreeSet<FeatureId> =
                    mined.iter().flat_map(|m| m.neighbors.iter().copied()).collect();
                for fid in members {
                    if let Some(list) = postings.get_mut(&fid) {
                        if let Ok(pos) = list.binary_search(&id) {
                            list.remove(pos);
                        }
                        if list.is_empty() {
                            postings.remove(&fid);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn check_query(&self, query: &EncodedScene) -> Result<()> {
        self.check_digest(query)?;
        if self.is_empty() {
            return Err(Error::Validation("index is empty".into()));
        }
        Ok(())
    }

    /// NBNN ranking of every indexed image against all query features.
    pub fn query_nbnn(&self, query: &EncodedScene, mode: QueryMode) -> Result<RankedList> {
        self.check_query(query)?;
        match &self.store {
            Store::Vectors(m) => {
                if mode != QueryMode::Exact {
                    return Err(Error::Validation(
                        "probe mode needs a binary encoder".into(),
                    ));
                }
                let q = query_vectors(query.features.iter())?;
                Ok(rank_vectors(m, &q, |_| true))
            }
            Store::Codes {
                library,
                classes,
                postings,
                ..
            } => {
                let q = query_codes(query.features.iter(), library.bits())?;
                Ok(rank_codes(library, classes, postings, &q, mode))
            }
        }
    }

    /// Ranking by image-level descriptors alone.
    pub fn query_global(&self, query: &EncodedScene) -> Result<RankedList> {
        self.check_query(query)?;
        let image_level = query.image_level();
        match &self.store {
            Store::Vectors(m) => {
                let q = query_vectors(image_level)?;
                Ok(rank_vectors(m, &q, |l| l == Level::Image))
            }
            Store::Codes {
                library, classes, ..
            } => {
                let q = query_codes(image_level, library.bits())?;
                let scores = classes.iter().map(|(id, mined)| {
                    let total: u64 = q
                        .iter()
                        .map(|code| {
                            mined
                                .iter()
                                .filter(|m| m.level == Level::Image)
                                .flat_map(|m| m.neighbors.iter())
                                .map(|&fid| library.distance(code, fid))
                                .min()
                                .unwrap_or(library.bits() + 1) as u64
                        })
                        .sum();
                    (*id, total as f64)
                });
                Ok(RankedList::from_scores(scores))
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        self.encoder.write(&mut w);
        w.u32(self.digest.len() as u32);
        w.bytes(self.digest.as_bytes());
        self.scope.write(&mut w);
        match &self.store {
            Store::Vectors(m) => {
                w.u8(0);
                w.u32(m.len() as u32);
                for (id, vs) in m {
                    w.u64(id.0);
                    w.u32(vs.len() as u32);
                    for v in vs {
                        w.u8(v.level.to_byte());
                        w.u32(v.vector.len() as u32);
                        w.f64_slice(&v.vector);
                    }
                }
            }
            Store::Codes {
                library,
                n_p,
                classes,
                postings,
            } => {
                w.u8(1);
                library.write(&mut w);
                w.u32(*n_p as u32);
                w.u32(classes.len() as u32);
                for (id, mined) in classes {
                    w.u64(id.0);
                    w.u32(mined.len() as u32);
                    for m in mined {
                        w.u8(m.level.to_byte());
                        w.u32(m.neighbors.len() as u32);
                        for n in &m.neighbors {
                            w.u64(*n);
                        }
                    }
                }
                w.u32(postings.len() as u32);
                for (fid, ids) in postings {
                    w.u64(*fid);
                    w.u32(ids.len() as u32);
                    for id in ids {
                        w.u64(id.0);
                    }
                }
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let encoder = Encoder::read(&mut r)?;
        let at = r.offset();
        let n = r.len_prefix(1, "digest length")?;
        let digest = String::from_utf8(r.take(n, "digest")?.to_vec())
            .map_err(|_| Error::Corrupt { offset: at, reason: "digest is not UTF-8".into() })?;
        if digest != encoder.digest() {
            return Err(Error::Corrupt {
                offset: at,
                reason: "stored encoder digest does not match the embedded models".into(),
            });
        }
        let at = r.offset();
        let scope = Scope::from_byte(r.u8("scope")?)
            .ok_or_else(|| Error::Corrupt { offset: at, reason: "unknown scope".into() })?;
        let at = r.offset();
        let store = match r.u8("store kind")? {
            0 => {
                if encoder.is_binary() {
                    return Err(Error::Corrupt { offset: at, reason: "vector store with binary encoder".into() });
                }
                let n = r.len_prefix(12, "image count")?;
                let mut m = BTreeMap::new();
                for _ in 0..n {
                    let id = ImageId(r.u64("image id")?);
                    let count = r.len_prefix(5, "descriptor count")?;
                    let mut vs = Vec::with_capacity(count);
                    for _ in 0..count {
                        let level = read_level(&mut r)?;
                        let dim = r.len_prefix(8, "vector dim")?;
                        vs.push(StoredVector {
                            level,
                            vector: r.f64_vec(dim, "vector")?,
                        });
                    }
                    if m.insert(id, vs).is_some() {
                        return Err(Error::DuplicateImage(id.0));
                    }
                }
                Store::Vectors(m)
            }
            1 => {
                let library = Library::read(&mut r)?;
                if Some(library.bits()) != encoder.bits() {
                    return Err(Error::Corrupt { offset: at, reason: "library width differs from encoder".into() });
                }
                let n_p = r.u32("n_p")? as usize;
                let n = r.len_prefix(12, "image count")?;
                let mut classes = BTreeMap::new();
                for _ in 0..n {
                    let id = ImageId(r.u64("image id")?);
                    let count = r.len_prefix(5, "descriptor count")?;
                    let mut mined = Vec::with_capacity(count);
                    for _ in 0..count {
                        let level = read_level(&mut r)?;
                        let k = r.len_prefix(8, "neighbor count")?;
                        let neighbors = r.u64_vec(k, "neighbors")?;
                        if let Some(bad) = neighbors.iter().find(|f| **f >= library.len()) {
                            return Err(Error::Corrupt {
                                offset: r.offset(),
                                reason: format!("feature id {bad} outside library"),
                            });
                        }
                        mined.push(MinedDescriptor { level, neighbors });
                    }
                    if classes.insert(id, mined).is_some() {
                        return Err(Error::DuplicateImage(id.0));
                    }
                }
                let at = r.offset();
                let n = r.len_prefix(12, "posting count")?;
                let mut postings = BTreeMap::new();
                for _ in 0..n {
                    let fid = r.u64("feature id")?;
                    let k = r.len_prefix(8, "posting length")?;
                    postings.insert(fid, r.u64_vec(k, "posting")?.into_iter().map(ImageId).collect());
                }
                if postings != postings_of(&classes) {
                    return Err(Error::Corrupt {
                        offset: at,
                        reason: "postings disagree with place classes".into(),
                    });
                }
                Store::Codes {
                    library,
                    n_p,
                    classes,
                    postings,
                }
            }
            k => {
                return Err(Error::Corrupt {
                    offset: at,
                    reason: format!("unknown store kind {k}"),
                })
            }
        };
        if !r.is_empty() {
            return Err(Error::Corrupt {
                offset: r.offset(),
                reason: "trailing bytes after index".into(),
            });
        }
        Ok(Self {
            encoder,
            digest,
            scope,
            store,
        })
    }
}

fn read_level(r: &mut ByteReader<'_>) -> Result<Level> {
    let at = r.offset();
    Level::from_byte(r.u8("level")?).ok_or_else(|| Error::Corrupt {
        offset: at,
        reason: "unknown descriptor level".into(),
    })
}

fn postings_of(classes: &BTreeMap<ImageId, Vec<MinedDescriptor>>) -> BTreeMap<FeatureId, Vec<ImageId>> {
    let mut postings: BTreeMap<FeatureId, Vec<ImageId>> = BTreeMap::new();
    for (id, mined) in classes {
        let members: BTreeSet<FeatureId> = mined.iter().flat_map(|m| m.neighbors.iter().copied()).collect();
        for fid in members {
            postings.entry(fid).or_default().push(*id);
        }
    }
    postings
}

fn query_vectors<'a>(features: impl Iterator<Item = &'a EncodedFeature>) -> Result<Vec<&'a [f64]>> {
    features
        .map(|f| match &f.value {
            FeatureValue::Vector(v) => Ok(v.as_slice()),
            FeatureValue::Code(_) => Err(Error::Validation("binary query for a vector index".into())),
        })
        .collect()
}

fn query_codes<'a>(features: impl Iterator<Item = &'a EncodedFeature>, bits: u32) -> Result<Vec<&'a BinaryCode>> {
    features
        .map(|f| match &f.value {
            FeatureValue::Code(c) if c.width() == bits => Ok(c),
            FeatureValue::Code(c) => Err(Error::DimensionMismatch {
                expected: bits as usize,
                actual: c.width() as usize,
            }),
            FeatureValue::Vector(_) => Err(Error::Validation("vector query for a binary index".into())),
        })
        .collect()
}

fn rank_vectors(
    classes: &BTreeMap<ImageId, Vec<StoredVector>>,
    query: &[&[f64]],
    keep: impl Fn(Level) -> bool + Sync,
) -> RankedList {
    let scores: Vec<(ImageId, f64)> = classes
        .par_iter()
        .map(|(id, stored)| {
            let total = query
                .iter()
                .map(|q| {
                    stored
                        .iter()
                        .filter(|s| keep(s.level))
                        .map(|s| vector_distance(q, &s.vector))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            (*id, total)
        })
        .collect();
    RankedList::from_scores(scores)
}

fn rank_codes(
    library: &Library,
    classes: &BTreeMap<ImageId, Vec<MinedDescriptor>>,
    postings: &BTreeMap<FeatureId, Vec<ImageId>>,
    query: &[&BinaryCode],
    mode: QueryMode,
) -> RankedList {
    let ids: Vec<ImageId> = classes.keys().copied().collect();
    let slot = |id: &ImageId| ids.binary_search(id).expect("posting for unindexed image");
    let bits = library.bits();
    let miss = bits + 1;
    let mut totals = vec![0u64; ids.len()];
    let mut best = vec![miss; ids.len()];
    for q in query {
        best.iter_mut().for_each(|b| *b = miss);
        let mut visit = |d: u32, imgs: &Vec<ImageId>| {
            for img in imgs {
                let b = &mut best[slot(img)];
                *b = (*b).min(d);
            }
        };
        match mode {
            QueryMode::Exact => {
                for (fid, imgs) in postings {
                    visit(library.distance(q, *fid), imgs);
                }
            }
            QueryMode::Probe(r) if library.is_implicit() && library::ball_size(bits, r) < postings.len() as u64 => {
                let center = q.words()[0];
                for w in 0..=r.min(bits) {
                    library::for_each_mask(bits, w, &mut |m| {
                        if let Some(imgs) = postings.get(&(center ^ m)) {
                            visit(w, imgs);
                        }
                    });
                }
            }
            QueryMode::Probe(r) => {
                for (fid, imgs) in postings {
                    let d = library.distance(q, *fid);
                    if d <= r {
                        visit(d, imgs);
                    }
                }
            }
        }
        for (t, b) in totals.iter_mut().zip(&best) {
            *t += u64::from(*b);
        }
    }
    RankedList::from_scores(ids.into_iter().zip(totals.into_iter().map(|t| t as f64)))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<ExperienceIndex> {
    ExperienceIndex::from_bytes(&read_file(path.as_ref())?)
}

pub fn save_index(index: &ExperienceIndex, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &index.to_bytes())
}
