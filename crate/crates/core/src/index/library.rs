//! Experience libraries: the code book whose features make up place classes.

use std::path::Path;

use crate::binary::BinaryCode;
use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const LIBRARY_MAGIC: &[u8; 4] = b"NBLB";
pub const LIBRARY_VERSION: u32 = 1;

/// Widest implicit library allowed; `2^24` features.
pub const MAX_IMPLICIT_BITS: u32 = 24;

pub type FeatureId = u64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Library {
    /// Every `bits`-wide code is a feature and its ID is the code value.
    ImplicitFull { bits: u32 },
    /// Listed codes with dense IDs `0..len`.
    Explicit { bits: u32, codes: Vec<BinaryCode> },
}

impl Library {
    pub fn implicit(bits: u32) -> Result<Self> {
        if !(1..=MAX_IMPLICIT_BITS).contains(&bits) {
            return Err(Error::Validation(format!(
                "implicit library needs 1..={MAX_IMPLICIT_BITS} bits, got {bits}"
            )));
        }
        Ok(Library::ImplicitFull { bits })
    }

    pub fn explicit(bits: u32, codes: Vec<BinaryCode>) -> Result<Self> {
        if bits == 0 {
            return Err(Error::Validation("library needs at least one bit".into()));
        }
        if codes.is_empty() {
            return Err(Error::Validation("explicit library is empty".into()));
        }
        if let Some(c) = codes.iter().find(|c| c.width() != bits) {
            return Err(Error::DimensionMismatch {
                expected: bits as usize,
                actual: c.width() as usize,
            });
        }
        Ok(Library::Explicit { bits, codes })
    }

    /// Distinct codes in ascending order, as an explicit library.
    pub fn from_codes(bits: u32, codes: impl IntoIterator<Item = BinaryCode>) -> Result<Self> {
        let mut codes: Vec<BinaryCode> = codes.into_iter().collect();
        codes.sort();
        codes.dedup();
        Self::explicit(bits, codes)
    }

    pub fn bits(&self) -> u32 {
        match self {
            Library::ImplicitFull { bits } | Library::Explicit { bits, .. } => *bits,
        }
    }

    pub fn len(&self) -> u64 {
        match self {
            Library::ImplicitFull { bits } => 1 << bits,
            Library::Explicit { codes, .. } => codes.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_implicit(&self) -> bool {
        matches!(self, Library::ImplicitFull { .. })
    }

    pub fn code(&self, id: FeatureId) -> BinaryCode {
        match self {
            Library::ImplicitFull { bits } => BinaryCode::from_u64(id, *bits),
            Library::Explicit { codes, .. } => codes[id as usize].clone(),
        }
    }

    /// Hamming distance from `q` to feature `id`; `q` must have the library width.
    #[inline]
    pub fn distance(&self, q: &BinaryCode, id: FeatureId) -> u32 {
        match self {
            Library::ImplicitFull { .. } => (q.words()[0] ^ id).count_ones(),
            Library::Explicit { codes, .. } => codes[id as usize].distance(q),
        }
    }

    fn check_width(&self, q: &BinaryCode) -> Result<()> {
        if q.width() != self.bits() {
            return Err(Error::DimensionMismatch {
                expected: self.bits() as usize,
                actual: q.width() as usize,
            });
        }
        Ok(())
    }

    /// The `n_p` features nearest to `q` by Hamming distance, ties by smaller ID,
    /// in that order.
    pub fn nearest(&self, q: &BinaryCode, n_p: usize) -> Result<Vec<FeatureId>> {
        self.check_width(q)?;
        match self {
            Library::ImplicitFull { bits } => Ok(nearest_implicit(q.words()[0], *bits, n_p)),
            Library::Explicit { codes, .. } => {
                let mut scored: Vec<(u32, FeatureId)> = codes
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.distance(q), i as FeatureId))
                    .collect();
                let n = n_p.min(scored.len());
                if n == 0 {
                    return Ok(Vec::new());
                }
                scored.select_nth_unstable(n - 1);
                scored.truncate(n);
                scored.sort_unstable();
                Ok(scored.into_iter().map(|(_, id)| id).collect())
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(LIBRARY_MAGIC);
        w.u32(LIBRARY_VERSION);
        self.write(&mut w);
        w.into_inner()
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        match self {
            Library::ImplicitFull { bits } => {
                w.u8(0);
                w.u32(*bits);
            }
            Library::Explicit { bits, codes } => {
                w.u8(1);
                w.u32(*bits);
                w.u32(codes.len() as u32);
                for c in codes {
                    for word in c.words() {
                        w.u64(*word);
                    }
                }
            }
        }
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let at = r.offset();
        let mode = r.u8("library mode")?;
        let bits = r.u32("library bits")?;
        let corrupt = |e: Error| match e {
            Error::Validation(reason) => Error::Corrupt { offset: at, reason },
            other => other,
        };
        match mode {
            0 => Library::implicit(bits).map_err(corrupt),
            1 => {
                let words = (bits as usize).div_ceil(64);
                let n = r.len_prefix(8 * words, "library size")?;
                let mut codes = Vec::with_capacity(n);
                for _ in 0..n {
                    codes.push(BinaryCode::from_words(r.u64_vec(words, "library code")?, bits).map_err(corrupt)?);
                }
                Library::explicit(bits, codes).map_err(corrupt)
            }
            m => Err(Error::Corrupt {
                offset: at,
                reason: format!("unknown library mode {m}"),
            }),
        }
    }
}

/// Hamming shells around `q` in ascending distance, each in ascending ID.
fn nearest_implicit(q: u64, bits: u32, n_p: usize) -> Vec<FeatureId> {
    let mut out = Vec::with_capacity(n_p);
    let mut radius = 0;
    while out.len() < n_p && radius <= bits {
        let mut shell = Vec::new();
        for_each_mask(bits, radius, &mut |m| shell.push(q ^ m));
        shell.sort_unstable();
        let take = (n_p - out.len()).min(shell.len());
        out.extend_from_slice(&shell[..take]);
        radius += 1;
    }
    out
}

/// Calls `f` with every `bits`-wide mask of exactly `weight` set bits.
pub(crate) fn for_each_mask(bits: u32, weight: u32, f: &mut impl FnMut(u64)) {
    fn rec(start: u32, bits: u32, left: u32, acc: u64, f: &mut impl FnMut(u64)) {
        if left == 0 {
            f(acc);
            return;
        }
        for i in start..=bits - left {
            rec(i + 1, bits, left - 1, acc | 1 << i, f);
        }
    }
    if weight <= bits {
        rec(0, bits, weight, 0, f);
    }
}

/// Number of codes within Hamming distance `r` of a point in `bits` dimensions,
/// saturating.
pub(crate) fn ball_size(bits: u32, r: u32) -> u64 {
    let mut total: u64 = 0;
    let mut c: u64 = 1;
    for i in 0..=r.min(bits) {
        total = total.saturating_add(c);
        c = c.saturating_mul(u64::from(bits - i)) / u64::from(i + 1);
    }
    total
}

pub fn load_library(path: impl AsRef<Path>) -> Result<Library> {
    let bytes = read_file(path.as_ref())?;
    let mut r = ByteReader::new(&bytes);
    r.magic(LIBRARY_MAGIC)?;
    let version = r.u32("version")?;
    if version != LIBRARY_VERSION {
        return Err(Error::Format(format!("unsupported library version {version}")));
    }
    let lib = Library::read(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Corrupt {
            offset: r.offset(),
            reason: "trailing bytes after library".into(),
        });
    }
    Ok(lib)
}

pub fn save_library(lib: &Library, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &lib.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_nearest(q: u64, bits: u32, n_p: usize) -> Vec<u64> {
        let mut all: Vec<(u32, u64)> = (0..1u64 << bits).map(|c| ((c ^ q).count_ones(), c)).collect();
        all.sort();
        all.into_iter().take(n_p).map(|(_, c)| c).collect()
    }

    #[test]
    fn implicit_nearest_matches_scan() {
        for q in [0u64, 5, 0x3ff, 0x2a5] {
            for n_p in [1, 3, 11, 40] {
                assert_eq!(nearest_implicit(q, 10, n_p), brute_nearest(q, 10, n_p));
            }
        }
        assert_eq!(nearest_implicit(9, 4, 100).len(), 16);
    }

    #[test]
    fn implicit_self_is_nearest() {
        let lib = Library::implicit(20).unwrap();
        let c = BinaryCode::from_u64(123_456, 20);
        assert_eq!(lib.nearest(&c, 1).unwrap(), vec![123_456]);
        assert!(lib.nearest(&BinaryCode::from_u64(1, 16), 1).is_err());
        assert!(Library::implicit(25).is_err());
    }

    #[test]
    fn explicit_ties_by_id() {
        let codes = vec![
            BinaryCode::from_u64(0b0011, 4),
            BinaryCode::from_u64(0b0001, 4),
            BinaryCode::from_u64(0b0010, 4),
            BinaryCode::from_u64(0b0000, 4),
        ];
        let lib = Library::explicit(4, codes).unwrap();
        let q = BinaryCode::from_u64(0, 4);
        assert_eq!(lib.nearest(&q, 3).unwrap(), vec![3, 1, 2]);
        assert_eq!(lib.nearest(&q, 10).unwrap(), vec![3, 1, 2, 0]);
    }

    #[test]
    fn masks_and_balls() {
        let mut n = 0;
        for_each_mask(10, 3, &mut |m| {
            assert_eq!(m.count_ones(), 3);
            assert!(m < 1 << 10);
            n += 1;
        });
        assert_eq!(n, 120);
        assert_eq!(ball_size(10, 10), 1024);
        assert_eq!(ball_size(20, 2), 1 + 20 + 190);
    }

    #[test]
    fn library_round_trip() {
        for lib in [
            Library::implicit(16).unwrap(),
            Library::from_codes(70, [BinaryCode::zeros(70), BinaryCode::zeros(70).complement()]).unwrap(),
        ] {
            let bytes = lib.to_bytes();
            let mut r = ByteReader::new(&bytes);
            r.magic(LIBRARY_MAGIC).unwrap();
            r.u32("v").unwrap();
            assert_eq!(Library::read(&mut r).unwrap(), lib);
        }
    }
}
