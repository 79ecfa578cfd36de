//! The memory bank `V`: one unit-norm feature vector per training instance.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ufl_autodiff::{Real, Tensor};

use crate::error::{Error, Result};
use crate::models::ByteReader;
use crate::ClassId;

/// Temperature used for training and evaluation.
pub const DEFAULT_TAU: f64 = 0.07;

/// Largest accepted deviation of a row norm from 1.
pub const UNIT_TOL: f64 = 1e-5;

const BANK_MAGIC: &[u8; 4] = b"UFLB";
const BANK_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

/// Bytes needed to hold an `n × d` bank of 32-bit reals.
pub fn bank_bytes(n: u64, d: u64) -> u64 {
    n * d * 4
}

pub(crate) fn dot(a: &[f32], b: &[Real]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm(v: &[Real]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Fails unless `v` has Euclidean norm `1 ± UNIT_TOL`.
pub fn check_unit(v: &[Real]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnitNorm { norm: n });
    }
    Ok(())
}

/// `n × d` row-major 32-bit vectors with instance ids and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
    labels: Option<Vec<ClassId>>,
    pub tau: f64,
}

/// Rows drawn as normalized Gaussians, i.e. uniform on the sphere.
pub fn init_bank(n: usize, d: usize, seed: u64) -> Result<MemoryBank> {
    if n == 0 {
        return Err(Error::Invalid("memory bank needs at least one row".into()));
    }
    if d < 2 {
        return Err(Error::Invalid(
            "memory bank dimension must be at least 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut row = vec![0.0f64; d];
    for _ in 0..n {
        let len = loop {
            row.iter_mut()
                .for_each(|x| *x = StandardNormal.sample(&mut rng));
            let len = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len > 1e-12 {
                break len;
            }
        };
        data.extend(row.iter().map(|x| (x / len) as f32));
    }
    Ok(MemoryBank {
        dim: d,
        data,
        ids: (0..n as u64).collect(),
        labels: None,
        tau: DEFAULT_TAU,
    })
}

impl MemoryBank {
    /// Bank whose rows are the rows of `embeddings: [n, d]`, each of which
    /// must already be unit norm. Ids are `0..n`.
    pub fn from_embeddings(embeddings: &Tensor) -> Result<Self> {
        let [n, d] = embeddings.shape() else {
            return Err(Error::Invalid(format!(
                "embeddings must be [n, d], got {:?}",
                embeddings.shape()
            )));
        };
        let (n, d) = (*n, *d);
        if n == 0 || d < 2 {
            return Err(Error::Invalid(format!("cannot build a {n}x{d} bank")));
        }
        for i in 0..n {
            check_unit(embeddings.row(i))?;
        }
        Ok(Self {
            dim: d,
            data: embeddings.data().iter().map(|&x| x as f32).collect(),
            ids: (0..n as u64).collect(),
            labels: None,
            tau: DEFAULT_TAU,
        })
    }

    pub fn with_labels(mut self, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Invalid(format!(
                "{} labels for {} bank rows",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::Invalid(format!(
                "{} ids for {} bank rows",
                ids.len(),
                self.len()
            )));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    /// The bank as an `[n, d]` tensor, for use as a tape constant.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&x| x as Real).collect();
        Tensor::new(vec![self.len(), self.dim], data).expect("n·d values")
    }

    /// Cosine similarity of every row with `v`.
    pub fn similarities(&self, v: &[Real]) -> Vec<f64> {
        self.rows().map(|r| dot(r, v)).collect()
    }

    /// Writes `new_v` into row `i`.
    ///
    /// With `momentum` 0 the row is replaced verbatim; otherwise it becomes
    /// `momentum·old + (1 − momentum)·new_v`, renormalized.
    pub fn update(&mut self, i: usize, new_v: &[Real], momentum: f64) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        if new_v.len() != self.dim {
            return Err(Error::Invalid(format!(
                "vector of length {} for a bank of dimension {}",
                new_v.len(),
                self.dim
            )));
        }
        check_unit(new_v)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "bank momentum must lie in [0, 1), got {momentum}"
            )));
        }
        let d = self.dim;
        let row = &mut self.data[i * d..(i + 1) * d];
        if momentum == 0.0 {
            for (r, &x) in row.iter_mut().zip(new_v) {
                *r = x as f32;
            }
            return Ok(());
        }
        let mixed: Vec<f64> = row
            .iter()
            .zip(new_v)
            .map(|(&o, &x)| momentum * o as f64 + (1.0 - momentum) * x as f64)
            .collect();
        let len = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len < 1e-12 {
            return Err(Error::Invalid(format!(
                "momentum update of row {i} cancelled to zero"
            )));
        }
        for (r, x) in row.iter_mut().zip(mixed) {
            *r = (x / len) as f32;
        }
        Ok(())
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.rows()
            .map(|r| {
                let n: f64 = r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(20 + n * (self.dim * 4 + 12));
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        let flags = if self.labels.is_some() {
            FLAG_LABELS
        } else {
            0
        };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &c in labels {
                out.extend_from_slice(&(c as i32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a bank file. Nothing is returned unless the whole file is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "bank file");
        if r.take(4)? != BANK_MAGIC {
            return Err(r.error(0, "bad magic, expected UFLB"));
        }
        let version = r.u16()?;
        if version != BANK_VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let flags = r.u16()?;
        if flags & !FLAG_LABELS != 0 {
            return Err(r.error(6, format!("unknown flags {flags:#06x}")));
        }
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        if n == 0 || dim < 2 {
            return Err(r.error(8, format!("cannot hold a {n}x{dim} bank")));
        }
        let row_bytes = 4 * dim + 8 + if flags & FLAG_LABELS != 0 { 4 } else { 0 };
        if n.checked_mul(row_bytes)
            .is_none_or(|need| need > bytes.len() - r.pos)
        {
            return Err(r.error(
                bytes.len() as u64,
                format!("truncated: {n} rows of dimension {dim} do not fit"),
            ));
        }
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            data.push(r.f32()?);
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64()?);
        }
        let labels = if flags & FLAG_LABELS != 0 {
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let at = r.pos;
                let c = r.i32()?;
                labels.push(
                    usize::try_from(c).map_err(|_| r.error(at, format!("negative label {c}")))?,
                );
            }
            Some(labels)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes"));
        }
        Ok(Self {
            dim,
            data,
            ids,
            labels,
            tau: DEFAULT_TAU,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_rows_are_unit_and_seeded() {
        let b = init_bank(500, 16, 1).unwrap();
        assert!(b.max_norm_error() < 1e-6);
        assert_eq!(b, init_bank(500, 16, 1).unwrap());
        assert_ne!(b, init_bank(500, 16, 2).unwrap());
        assert!(init_bank(0, 16, 1).is_err());
        assert!(init_bank(4, 1, 1).is_err());
    }

    #[test]
    fn init_mean_concentrates() {
        let (n, d) = (20_000, 8);
        let b = init_bank(n, d, 3).unwrap();
        let mut mean = vec![0.0f64; d];
        for r in b.rows() {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x as f64 / n as f64;
            }
        }
        // Each coordinate of the mean has standard deviation 1/sqrt(n·d).
        let bound = 3.0 / ((n * d) as f64).sqrt();
        assert!(mean.iter().all(|m| m.abs() < bound), "{mean:?} vs {bound}");
    }

    #[test]
    fn replace_then_read() {
        let mut b = init_bank(3, 2, 0).unwrap();
        b.update(1, &[0.6, 0.8], 0.0).unwrap();
        assert_eq!(b.row(1), &[0.6f32, 0.8f32]);
    }

    #[test]
    fn momentum_mix() {
        let mut b =
            MemoryBank::from_embeddings(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        b.update(0, &[0.0, 1.0], 0.5).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((b.row(0)[0] - h).abs() < 1e-6 && (b.row(0)[1] - h).abs() < 1e-6);
    }

    #[test]
    fn update_rejects_bad_input() {
        let mut b = init_bank(3, 2, 0).unwrap();
        assert!(matches!(
            b.update(0, &[1.0, 1.0], 0.0),
            Err(Error::NotUnitNorm { .. })
        ));
        assert!(matches!(
            b.update(3, &[1.0, 0.0], 0.0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn memory_for_a_million_instances() {
        let bytes = bank_bytes(1_200_000, 128);
        assert_eq!(bytes, 614_400_000);
        assert!((bytes as f64 / 600e6 - 1.0).abs() < 0.03);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let b = init_bank(100, 16, 5)
            .unwrap()
            .with_labels((0..100).map(|i| i % 7).collect())
            .unwrap();
        let bytes = b.to_bytes();
        let back = MemoryBank::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
        for cut in [0, 2, 7, 19, 20, 500, bytes.len() - 1] {
            match MemoryBank::from_bytes(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let msg = MemoryBank::from_bytes(&bad).unwrap_err().to_string();
        assert!(msg.contains("magic") && msg.contains("byte 0"), "{msg}");
    }

    proptest! {
        #[test]
        fn rows_stay_unit_under_updates(
            seed in any::<u64>(),
            updates in proptest::collection::vec((0usize..8, proptest::collection::vec(-1.0f64..1.0, 4), 0.0f64..0.95), 1..20),
        ) {
            let mut b = init_bank(8, 4, seed).unwrap();
            for (i, raw, m) in updates {
                let len = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assume!(len > 1e-3);
                let v: Vec<Real> = raw.iter().map(|x| (x / len) as Real).collect();
                match b.update(i, &v, m) {
                    Ok(()) | Err(Error::Invalid(_)) => {}
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
                prop_assert!(b.max_norm_error() < UNIT_TOL);
            }
        }
    }
}
