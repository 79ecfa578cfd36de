//! Two-dimensional linear projection of embeddings for plotting.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PCA_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `coords[i]` holds the `out_dim` coordinates of point `i`.
    pub coords: Vec<Vec<f64>>,
    /// Unit principal axes, strongest first.
    pub axes: Vec<Vec<f64>>,
    /// Variance of the data along each axis.
    pub variances: Vec<f64>,
    pub mean: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Projects centered `points` onto their top `out_dim` principal axes,
/// found by power iteration on the covariance with deflation. Each axis is
/// signed so its largest-magnitude component is positive.
#[allow(clippy::needless_range_loop)] // symmetric-matrix index loops
pub fn pca_project(points: &[Vec<f64>], out_dim: usize, seed: u64) -> Result<Projection> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "projection needs at least 2 points, got {n}"
        )));
    }
    let d = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != d) {
        return Err(Error::Invalid(format!(
            "point {i} has dimension {}, expected {d}",
            points[i].len()
        )));
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::Invalid(format!(
            "cannot project dimension {d} onto {out_dim} axes"
        )));
    }

    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        let c: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i][j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let scale = (0..d).map(|i| cov[i][i]).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut variances = Vec::with_capacity(out_dim);
    let mut warnings = Vec::new();
    for k in 0..out_dim {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthonormalize(&mut v, &axes);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERATIONS {
            let mut w = mat_vec(&cov, &v);
            // Deflation: remove found directions explicitly.
            orthonormalize_raw(&mut w, &axes);
            let norm = dot(&w, &w).sqrt();
            if norm <= f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let change = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            v = w;
            lambda = norm;
            if change < PCA_TOLERANCE {
                break;
            }
        }
        if lambda <= 1e-12 * scale.max(1e-300) {
            let msg = format!("axis {k} has zero variance; its direction is arbitrary");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i);
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        variances.push(dot(&mat_vec(&cov, &v), &v));
        axes.push(v);
    }

    let coords = points
        .iter()
        .map(|p| {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            axes.iter().map(|a| dot(a, &c)).collect()
        })
        .collect();
    Ok(Projection {
        coords,
        axes,
        variances,
        mean,
        warnings,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn orthonormalize_raw(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Gram-Schmidt against `basis`, then normalize. Falls back to the first
/// coordinate vector not spanned by `basis`.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    orthonormalize_raw(v, basis);
    let mut norm = dot(v, v).sqrt();
    let mut e = 0;
    while norm < 1e-12 && e < v.len() {
        v.fill(0.0);
        v[e] = 1.0;
        orthonormalize_raw(v, basis);
        norm = dot(v, v).sqrt();
        e += 1;
    }
    v.iter_mut().for_each(|x| *x /= norm);
}

/// CSV with columns `id,x,y,label`; `label` is empty when unknown.
pub fn write_projection_csv(
    path: &Path,
    ids: &[u64],
    coords: &[Vec<f64>],
    labels: Option<&[String]>,
) -> Result<()> {
    if ids.len() != coords.len() || labels.is_some_and(|l| l.len() != ids.len()) {
        return Err(Error::Invalid(
            "projection ids, coordinates and labels differ in length".into(),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["id", "x", "y", "label"])?;
    for (i, (id, c)) in ids.iter().zip(coords).enumerate() {
        let y = c.get(1).copied().unwrap_or(0.0);
        let label = labels.map_or("", |l| l[i].as_str());
        w.write_record([
            id.to_string(),
            c[0].to_string(),
            y.to_string(),
            label.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn line_has_zero_second_coordinate() {
        let dir = [0.3, -0.5, 0.2, 0.7];
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|t| dir.iter().map(|x| x * t as f64 + 1.0).collect())
            .collect();
        let p = pca_project(&pts, 2, 0).unwrap();
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-6));
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn square_is_an_isometry() {
        let u = [0.6, 0.0, 0.8, 0.0, 0.0];
        let v = [0.0, 1.0, 0.0, 0.0, 0.0];
        let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let pts: Vec<Vec<f64>> = corners
            .iter()
            .map(|&(a, b)| (0..5).map(|i| 2.0 + a * u[i] + b * v[i]).collect())
            .collect();
        let p = pca_project(&pts, 2, 7).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((dist(&pts[i], &pts[j]) - dist(&p.coords[i], &p.coords[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplication_keeps_axes() {
        let pts = vec![
            vec![1.0, 2.0, 0.0],
            vec![0.0, 1.0, 3.0],
            vec![4.0, 0.0, 1.0],
            vec![2.0, 2.0, 2.0],
        ];
        let mut twice = pts.clone();
        twice.extend(pts.clone());
        let a = pca_project(&pts, 2, 3).unwrap();
        let b = pca_project(&twice, 2, 3).unwrap();
        for (x, y) in a.axes.iter().flatten().zip(b.axes.iter().flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_variance_is_deterministic() {
        let pts = vec![vec![1.0, 1.0, 1.0]; 5];
        let a = pca_project(&pts, 2, 1).unwrap();
        let b = pca_project(&pts, 2, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.warnings.len(), 2);
        assert!(a.coords.iter().flatten().all(|&c| c == 0.0));
    }

    #[test]
    fn errors() {
        assert!(pca_project(&[vec![1.0, 2.0]], 2, 0).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0]], 2, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn reconstruction_error_is_optimal(
            (d, rows) in (3usize..=8).prop_flat_map(|d| (Just(d), proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), 4..30)))
        ) {
            let n = rows.len();
            let p = pca_project(&rows, 2, 11).unwrap();
            prop_assert!(p.variances[0] >= p.variances[1] - 1e-9);
            let mut err = 0.0;
            for (r, c) in rows.iter().zip(&p.coords) {
                for (k, x) in r.iter().enumerate() {
                    let rec = p.mean[k] + c[0] * p.axes[0][k] + c[1] * p.axes[1][k];
                    err += (x - rec).powi(2);
                }
            }
            err /= n as f64;
            let mut cov = DMatrix::<f64>::zeros(d, d);
            for r in &rows {
                for i in 0..d {
                    for j in 0..d {
                        cov[(i, j)] += (r[i] - p.mean[i]) * (r[j] - p.mean[j]) / n as f64;
                    }
                }
            }
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            let optimal: f64 = eig[2..].iter().sum();
            prop_assert!(err <= optimal + 1e-6 * (1.0 + eig[0]), "{} vs {}", err, optimal);
        }
    }
}
