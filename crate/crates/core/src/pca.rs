//! Principal component compression of raw descriptors.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const PCA_MAGIC: &[u8; 4] = b"NBPC";
pub const PCA_VERSION: u32 = 1;
const FLAG_RANK_DEFICIENT: u32 = 1;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// `input_dim x output_dim`, columns are principal directions.
    pub basis: DMatrix<f64>,
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// Set when the data had fewer than `output_dim` non-zero directions and
    /// the trailing columns were completed arbitrarily.
    pub rank_deficient: bool,
}

/// Flips each column so its largest-magnitude entry (first on ties) is positive.
fn fix_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Modified Gram-Schmidt over columns `from..`, filling columns that collapse
/// with the first standard basis vectors that survive orthogonalization.
fn orthonormalize(basis: &mut DMatrix<f64>, from: usize) {
    let d = basis.nrows();
    let mut next_unit = 0;
    for j in from..basis.ncols() {
        let mut v = basis.column(j).clone_owned();
        let mut min_norm = 1e-8;
        loop {
            for _ in 0..2 {
                for i in 0..j {
                    let u = basis.column(i);
                    let dot = u.dot(&v);
                    v.axpy(-dot, &u, 1.0);
                }
            }
            let norm = v.norm();
            if norm > min_norm {
                basis.set_column(j, &(v / norm));
                break;
            }
            // collapsed: retry with the next standard basis vector
            v = DVector::zeros(d);
            v[next_unit % d] = 1.0;
            next_unit += 1;
            min_norm = 1e-3;
        }
    }
}

fn to_matrix<T: Copy + Into<f64>, V: AsRef<[T]>>(rows: &[V]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
    for (i, r) in rows.iter().enumerate() {
        if r.as_ref().len() != d {
            return Err(Error::Validation(format!(
                "training vector {i} has dimension {}, expected {d}",
                r.as_ref().len()
            )));
        }
    }
    let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].as_ref()[j].into());
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("training data contains non-finite values".into()));
    }
    Ok(m)
}

/// Fits a `k`-dimensional PCA model to the training vectors.
///
/// Uses the `d x d` sample covariance when there are at least `d` samples and
/// the `n x n` Gram matrix of the centered data otherwise.
pub fn train_pca<T: Copy + Into<f64>, V: AsRef<[T]>>(training: &[V], k: usize) -> Result<PcaModel> {
    let n = training.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 training vectors, got {n}"
        )));
    }
    let mut x = to_matrix(training)?;
    let d = x.ncols();
    if k == 0 || k > d.min(n - 1) {
        return Err(Error::Validation(format!(
            "output dimension {k} must lie in 1..={} for {n} samples of dimension {d}",
            d.min(n - 1)
        )));
    }
    let mean: Vec<f64> = x.row_mean().iter().copied().collect();
    for mut row in x.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let denom = (n - 1) as f64;

    let (mut basis, mut eigenvalues, from) = if n >= d {
        let cov = x.tr_mul(&x) / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let basis = DMatrix::from_fn(d, k, |i, j| eig.eigenvectors[(i, order[j])]);
        let vals: Vec<f64> = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
        (basis, vals, k)
    } else {
        let gram = &x * x.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let mut basis = DMatrix::zeros(d, k);
        let mut vals = Vec::with_capacity(k);
        let mut usable = 0;
        for (j, &idx) in order[..k].iter().enumerate() {
            let lambda = eig.eigenvalues[idx];
            vals.push(lambda);
            if lambda > RANK_TOL * top && usable == j {
                let v = eig.eigenvectors.column(idx);
                let u = x.tr_mul(&v) / (denom * lambda).sqrt();
                basis.set_column(j, &u);
                usable += 1;
            }
        }
        (basis, vals, 0)
    };

    let top = eigenvalues[0].max(0.0);
    let mut rank_deficient = false;
    for v in eigenvalues.iter_mut() {
        if *v <= RANK_TOL * top {
            rank_deficient = true;
            *v = 0.0;
        }
    }
    if from < k {
        orthonormalize(&mut basis, from);
    }
    fix_signs(&mut basis);
    if rank_deficient {
        log::warn!("PCA training data has rank below {k}; trailing components are arbitrary");
    }
    Ok(PcaModel {
        input_dim: d,
        output_dim: k,
        mean,
        basis,
        eigenvalues,
        rank_deficient,
    })
}

impl PcaModel {
    pub fn project<T: Copy + Into<f64>>(&self, v: &[T]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: v.len(),
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| (*a).into() - m).collect();
        Ok(self
            .basis
            .column_iter()
            .map(|col| col.iter().zip(&centered).map(|(b, c)| b * c).sum())
            .collect())
    }

    /// `mean + basis * code`.
    pub fn reconstruct(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.output_dim {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim,
                actual: code.len(),
            });
        }
        let c = DVector::from_column_slice(code);
        let r = &self.basis * c;
        Ok(r.iter().zip(&self.mean).map(|(a, m)| a + m).collect())
    }

    /// The model restricted to its leading `k` components.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.output_dim {
            return Err(Error::Validation(format!(
                "cannot truncate a {}-component model to {k}",
                self.output_dim
            )));
        }
        let eigenvalues = self.eigenvalues[..k].to_vec();
        Ok(Self {
            input_dim: self.input_dim,
            output_dim: k,
            mean: self.mean.clone(),
            basis: self.basis.columns(0, k).into_owned(),
            rank_deficient: eigenvalues.contains(&0.0),
            eigenvalues,
        })
    }

    /// Sum of the retained eigenvalues.
    pub fn captured_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(PCA_MAGIC);
        w.u32(PCA_VERSION);
        w.u32(self.input_dim as u32);
        w.u32(self.output_dim as u32);
        w.u32(if self.rank_deficient { FLAG_RANK_DEFICIENT } else { 0 });
        w.f64_slice(&self.mean);
        w.f64_slice(&self.eigenvalues);
        w.f64_slice(self.basis.as_slice());
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        Self::read(&mut r)
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(PCA_MAGIC)?;
        let version = r.u32("version")?;
        if version != PCA_VERSION {
            return Err(Error::Format(format!("unsupported PCA model version {version}")));
        }
        let d = r.u32("input dim")? as usize;
        let k = r.u32("output dim")? as usize;
        let flags = r.u32("flags")?;
        if k > d {
            return Err(Error::Format(format!("output dim {k} exceeds input dim {d}")));
        }
        let mean = r.f64_vec(d, "mean")?;
        let eigenvalues = r.f64_vec(k, "eigenvalues")?;
        let basis = DMatrix::from_vec(d, k, r.f64_vec(d * k, "basis")?);
        Ok(Self {
            input_dim: d,
            output_dim: k,
            mean,
            basis,
            eigenvalues,
            rank_deficient: flags & FLAG_RANK_DEFICIENT != 0,
        })
    }

    /// Hex SHA-256 of the serialized model.
    pub fn digest(&self) -> String {
        crate::digest_hex(&self.encode())
    }
}

pub fn load_pca(path: impl AsRef<Path>) -> Result<PcaModel> {
    let bytes = read_file(path.as_ref())?;
    let mut r = ByteReader::new(&bytes);
    let m = PcaModel::read(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Corrupt {
            offset: r.offset(),
            reason: "trailing bytes after PCA model".into(),
        });
    }
    Ok(m)
}

pub fn save_pca(model: &PcaModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &model.encode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_data(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.3).collect();
        (0..n)
            .map(|_| scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal) + 2.0).collect())
            .collect()
    }

    #[test]
    fn line_y_equals_x() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let m = train_pca(&pts, 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((m.basis[(0, 0)] - s).abs() < 1e-12);
        assert!((m.basis[(1, 0)] - s).abs() < 1e-12);
        let full = train_pca(&pts, 2).unwrap();
        assert!(full.eigenvalues[1].abs() < 1e-9);
        assert!(full.rank_deficient);
    }

    #[test]
    fn full_rank_reconstruction() {
        let data = random_data(1, 50, 6);
        let m = train_pca(&data, 6).unwrap();
        for v in &data {
            let r = m.reconstruct(&m.project(v).unwrap()).unwrap();
            for (a, b) in r.iter().zip(v) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gram_path_matches_covariance_path() {
        // 30 samples in 40 dims goes through the Gram matrix.
        let data = random_data(2, 30, 40);
        let g = train_pca(&data, 10).unwrap();
        let x = DMatrix::from_fn(30, 40, |i, j| data[i][j] - g.mean[j]);
        let cov = x.tr_mul(&x) / 29.0;
        for j in 0..10 {
            let u = g.basis.column(j);
            let cu = &cov * u;
            let lambda = g.eigenvalues[j];
            assert!((cu - u * lambda).norm() < 1e-8 * lambda.max(1.0));
        }
        let btb = g.basis.tr_mul(&g.basis);
        assert!((btb - DMatrix::identity(10, 10)).abs().max() < 1e-10);
    }

    #[test]
    fn projection_properties() {
        let data = random_data(3, 80, 12);
        let m = train_pca(&data, 5).unwrap();
        assert!(m.project(&m.mean).unwrap().iter().all(|v| v.abs() < 1e-12));
        for i in 0..5 {
            let v: Vec<f64> = m.mean.iter().zip(m.basis.column(i).iter()).map(|(a, b)| a + b).collect();
            let p = m.project(&v).unwrap();
            for (j, x) in p.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((x - want).abs() < 1e-9);
            }
        }
        for v in data.iter().take(10) {
            let p = m.project(v).unwrap();
            let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dn = v.iter().zip(&m.mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(pn <= dn + 1e-9);
        }
        assert!(matches!(m.project(&[1.0f64; 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn invalid_requests() {
        let data = random_data(4, 5, 8);
        assert!(train_pca(&data, 5).is_err());
        assert!(train_pca(&data[..1], 1).is_err());
        assert!(train_pca(&data, 0).is_err());
    }

    #[test]
    fn sign_convention_and_serialization() {
        let data = random_data(5, 40, 7);
        let m = train_pca(&data, 3).unwrap();
        for col in m.basis.column_iter() {
            let big = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
        let back = PcaModel::decode(&m.encode()).unwrap();
        assert_eq!(back, m);
        assert_eq!(train_pca(&data, 3).unwrap().encode(), m.encode());
    }
}
