//! Random-projection binarization of short vectors and Hamming comparison.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const PROJECTION_MAGIC: &[u8; 4] = b"NBBP";
pub const PROJECTION_VERSION: u32 = 1;

/// Packed bit string of fixed width. Bit `i` lives in word `i / 64` at
/// position `i % 64`; bits past `width` are always zero.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryCode {
    width: u32,
    words: Vec<u64>,
}

impl fmt::Debug for BinaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryCode({}: ", self.width)?;
        for i in 0..self.width {
            write!(f, "{}", u8::from(self.bit(i)))?;
        }
        write!(f, ")")
    }
}

fn word_count(width: u32) -> usize {
    (width as usize).div_ceil(64)
}

fn tail_mask(width: u32) -> u64 {
    match width % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BinaryCode {
    pub fn zeros(width: u32) -> Self {
        Self {
            width,
            words: vec![0; word_count(width)],
        }
    }

    /// Code whose bits are the low `width` bits of `value` (`width <= 64`).
    pub fn from_u64(value: u64, width: u32) -> Self {
        assert!((1..=64).contains(&width), "from_u64 needs 1..=64 bits");
        Self {
            width,
            words: vec![value & tail_mask(width)],
        }
    }

    pub fn from_words(words: Vec<u64>, width: u32) -> Result<Self> {
        if words.len() != word_count(width) {
            return Err(Error::DimensionMismatch {
                expected: word_count(width),
                actual: words.len(),
            });
        }
        if let Some(last) = words.last() {
            if last & !tail_mask(width) != 0 {
                return Err(Error::Validation(format!(
                    "code has bits set beyond width {width}"
                )));
            }
        }
        Ok(Self { width, words })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: u32) -> bool {
        self.words[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    pub fn set_bit(&mut self, i: u32, on: bool) {
        assert!(i < self.width);
        let w = &mut self.words[(i / 64) as usize];
        if on {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    /// Integer value of a code of at most 64 bits.
    pub fn as_u64(&self) -> Option<u64> {
        (self.width <= 64).then(|| self.words[0])
    }

    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.width);
        }
        Self {
            width: self.width,
            words,
        }
    }

    /// Hamming distance; widths must agree (checked in debug builds).
    #[inline]
    pub fn distance(&self, other: &BinaryCode) -> u32 {
        debug_assert_eq!(self.width, other.width);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Population count of the XOR of two codes of equal width.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.width != b.width {
        return Err(Error::DimensionMismatch {
            expected: a.width as usize,
            actual: b.width as usize,
        });
    }
    Ok(a.distance(b))
}

/// Seeded Gaussian projection with per-bit thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionModel {
    pub input_dim: usize,
    pub bits: u32,
    pub seed: u64,
    /// `bits` unit-norm rows of length `input_dim`.
    pub rows: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Draws `bits` random unit directions in `k` dimensions from `seed`. With
/// training data, each threshold is the median projection so every bit splits
/// the training set in half; without, thresholds are zero.
pub fn train_projection<V: AsRef<[f64]>>(
    seed: u64,
    k: usize,
    bits: u32,
    training: &[V],
) -> Result<ProjectionModel> {
    if k == 0 || bits == 0 {
        return Err(Error::Validation(format!(
            "projection needs k >= 1 and bits >= 1, got k = {k}, bits = {bits}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..bits)
        .map(|_| loop {
            let row: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break row.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let mut model = ProjectionModel {
        input_dim: k,
        bits,
        seed,
        rows,
        thresholds: vec![0.0; bits as usize],
    };
    if !training.is_empty() {
        let mut projected = vec![Vec::with_capacity(training.len()); bits as usize];
        for v in training {
            let p = model.project(v.as_ref())?;
            for (col, x) in projected.iter_mut().zip(p) {
                col.push(x);
            }
        }
        model.thresholds = projected.iter_mut().map(|c| median(c)).collect();
    }
    Ok(model)
}

impl ProjectionModel {
    /// Raw projections `row_i . v`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: v.len(),
            });
        }
        Ok(self
            .rows
            .iter()
            .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Bit `i` is set iff `row_i . v > threshold_i`.
    pub fn encode(&self, v: &[f64]) -> Result<BinaryCode> {
        let p = self.project(v)?;
        let mut code = BinaryCode::zeros(self.bits);
        for (i, (x, t)) in p.iter().zip(&self.thresholds).enumerate() {
            if x > t {
                code.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(code)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(PROJECTION_MAGIC);
        w.u32(PROJECTION_VERSION);
        w.u32(self.input_dim as u32);
        w.u32(self.bits);
        w.u64(self.seed);
        for r in &self.rows {
            w.f64_slice(r);
        }
        w.f64_slice(&self.thresholds);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        Self::read(&mut r)
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(PROJECTION_MAGIC)?;
        let version = r.u32("version")?;
        if version != PROJECTION_VERSION {
            return Err(Error::Format(format!(
                "unsupported projection model version {version}"
            )));
        }
        let k = r.u32("input dim")? as usize;
        let bits = r.u32("bits")?;
        let seed = r.u64("seed")?;
        if k == 0 || bits == 0 {
            return Err(Error::Format("projection model with zero size".into()));
        }
        let mut rows = Vec::with_capacity(bits as usize);
        for _ in 0..bits {
            rows.push(r.f64_vec(k, "projection row")?);
        }
        let thresholds = r.f64_vec(bits as usize, "thresholds")?;
        Ok(Self {
            input_dim: k,
            bits,
            seed,
            rows,
            thresholds,
        })
    }

    pub fn digest(&self) -> String {
        crate::digest_hex(&self.to_bytes())
    }
}

pub fn load_projection(path: impl AsRef<Path>) -> Result<ProjectionModel> {
    let bytes = read_file(path.as_ref())?;
    let mut r = ByteReader::new(&bytes);
    let m = ProjectionModel::read(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Corrupt {
            offset: r.offset(),
            reason: "trailing bytes after projection model".into(),
        });
    }
    Ok(m)
}

pub fn save_projection(model: &ProjectionModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &model.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vecs(seed: u64, n: usize, k: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn deterministic_and_unit_rows() {
        let a = train_projection::<Vec<f64>>(7, 16, 20, &[]).unwrap();
        let b = train_projection::<Vec<f64>>(7, 16, 20, &[]).unwrap();
        assert_eq!(a, b);
        assert!(a.thresholds.iter().all(|t| *t == 0.0));
        for r in &a.rows {
            let n: f64 = r.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_ne!(a, train_projection::<Vec<f64>>(8, 16, 20, &[]).unwrap());
    }

    #[test]
    fn median_thresholds_balance_bits() {
        for n in [1000usize, 999] {
            let data = rand_vecs(1, n, 8);
            let m = train_projection(3, 8, 24, &data).unwrap();
            let codes: Vec<_> = data.iter().map(|v| m.encode(v).unwrap()).collect();
            for i in 0..24 {
                let ones = codes.iter().filter(|c| c.bit(i)).count();
                assert!(ones == n / 2 || ones == n.div_ceil(2), "bit {i}: {ones} of {n}");
            }
        }
    }

    #[test]
    fn sign_flip_complements() {
        let m = train_projection::<Vec<f64>>(11, 10, 70, &[]).unwrap();
        for v in rand_vecs(2, 20, 10) {
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            assert_eq!(m.encode(&neg).unwrap(), m.encode(&v).unwrap().complement());
            let scaled: Vec<f64> = v.iter().map(|x| 3.5 * x).collect();
            assert_eq!(m.encode(&scaled).unwrap(), m.encode(&v).unwrap());
        }
    }

    #[test]
    fn narrow_codes_fit_in_range() {
        let m = train_projection::<Vec<f64>>(5, 6, 20, &[]).unwrap();
        for v in rand_vecs(3, 50, 6) {
            assert!(m.encode(&v).unwrap().as_u64().unwrap() < 1 << 20);
        }
    }

    #[test]
    fn hamming_basics() {
        let c = BinaryCode::from_u64(0b1011_0110_0101_1100, 16);
        assert_eq!(hamming(&c, &c).unwrap(), 0);
        assert_eq!(hamming(&c, &c.complement()).unwrap(), 16);
        assert!(hamming(&c, &BinaryCode::zeros(12)).is_err());
        let wide = BinaryCode::zeros(128).complement();
        assert_eq!(wide.words(), &[u64::MAX, u64::MAX]);
        assert_eq!(wide.distance(&BinaryCode::zeros(128)), 128);
        assert!(BinaryCode::from_words(vec![1 << 20], 20).is_err());
    }

    #[test]
    fn model_round_trip() {
        let data = rand_vecs(4, 30, 5);
        let m = train_projection(9, 5, 12, &data).unwrap();
        assert_eq!(ProjectionModel::from_bytes(&m.to_bytes()).unwrap(), m);
        assert!(m.encode(&[0.0; 4]).is_err());
    }
}
