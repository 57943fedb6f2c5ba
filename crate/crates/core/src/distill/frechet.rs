//! Colour-statistics features and the Fréchet distance between Gaussians
//! fitted to them.

use super::DistillError;
use crate::image::Image;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub const FEATURE_DIM: usize = 30;
/// Ridge added to a covariance that is rank-deficient.
pub const EPSILON: f64 = 1e-6;
/// Eigenvalues below this are an error rather than rounding noise.
pub const NEGATIVE_TOLERANCE: f64 = -1e-8;

/// Per channel (R, G, B): mean, standard deviation and an 8-bin histogram,
/// all on a [0, 1] scale.
pub fn feature_vector(image: &Image) -> Vec<f64> {
    let n = image.pixel_count() as f64;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut hist = [[0usize; 8]; 3];
    for px in image.pixels().chunks_exact(3) {
        for c in 0..3 {
            let v = px[c] as f64 / 255.0;
            sum[c] += v;
            sq[c] += v * v;
            hist[c][(px[c] >> 5) as usize] += 1;
        }
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for c in 0..3 {
        let mean = sum[c] / n;
        let var = (sq[c] / n - mean * mean).max(0.0);
        out.push(mean);
        out.push(var.sqrt());
        out.extend(hist[c].iter().map(|&k| k as f64 / n));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mu: Vec<f64>,
    /// Row-major `dim × dim` covariance.
    pub sigma: Vec<f64>,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, DistillError> {
        if sigma.len() != mu.len() * mu.len() {
            return Err(DistillError::Frechet("covariance shape does not match mean".into()));
        }
        Ok(FrechetStats { mu, sigma })
    }

    /// Mean and unbiased covariance of `features` (zero covariance for one sample).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self, DistillError> {
        let first = features.first().ok_or(DistillError::Empty("feature set"))?;
        let d = first.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(DistillError::Frechet("feature vectors differ in length".into()));
        }
        let n = features.len() as f64;
        let mut mu = vec![0.0; d];
        for f in features {
            for (m, v) in mu.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut sigma = vec![0.0; d * d];
        if features.len() > 1 {
            for f in features {
                for i in 0..d {
                    let a = f[i] - mu[i];
                    for j in 0..d {
                        sigma[i * d + j] += a * (f[j] - mu[j]);
                    }
                }
            }
            for s in &mut sigma {
                *s /= n - 1.0;
            }
        }
        Ok(FrechetStats { mu, sigma })
    }

    pub fn of_images(images: &[Image]) -> Result<Self, DistillError> {
        let feats: Vec<Vec<f64>> = images.iter().map(feature_vector).collect();
        FrechetStats::from_features(&feats)
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.sigma);
        (&m + m.transpose()) * 0.5
    }
}

fn check_eigenvalues(values: &DVector<f64>) -> Result<(), DistillError> {
    match values.iter().copied().find(|&v| v < NEGATIVE_TOLERANCE || !v.is_finite()) {
        Some(v) => Err(DistillError::Frechet(format!("covariance has eigenvalue {v:e}"))),
        None => Ok(()),
    }
}

/// Symmetric PSD square root; tiny negative eigenvalues are clamped to 0.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, DistillError> {
    let eig = SymmetricEigen::new(m.clone());
    check_eigenvalues(&eig.eigenvalues)?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Adds `EPSILON·I` when the smallest eigenvalue is below `EPSILON`.
fn regularized(m: DMatrix<f64>) -> Result<DMatrix<f64>, DistillError> {
    let eig = SymmetricEigen::new(m.clone());
    check_eigenvalues(&eig.eigenvalues)?;
    let d = m.nrows();
    Ok(if eig.eigenvalues.min() < EPSILON {
        m + DMatrix::identity(d, d) * EPSILON
    } else {
        m
    })
}

/// `||μa − μb||² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace of the root
/// taken as `Tr sqrt(√Σa Σb √Σa)`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64, DistillError> {
    if a.dim() != b.dim() || a.dim() == 0 {
        return Err(DistillError::Frechet("dimension mismatch".into()));
    }
    if a.mu.iter().chain(&a.sigma).chain(&b.mu).chain(&b.sigma).any(|v| !v.is_finite()) {
        return Err(DistillError::Frechet("non-finite statistics".into()));
    }
    let dmu: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = regularized(a.matrix())?;
    let sb = regularized(b.matrix())?;
    let root_a = sqrt_psd(&sa)?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    check_eigenvalues(&eig.eigenvalues)?;
    let tr_root: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fd = dmu + sa.trace() + sb.trace() - 2.0 * tr_root;
    Ok(fd.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss1(mu: f64, var: f64) -> FrechetStats {
        FrechetStats::new(vec![mu], vec![var]).unwrap()
    }

    #[test]
    fn scalar_closed_forms() {
        let d = frechet_distance(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
        let d = frechet_distance(&gauss1(0.0, 1.0), &gauss1(0.0, 4.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn negative_eigenvalues_rejected() {
        let bad = FrechetStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1e-3]).unwrap();
        assert!(frechet_distance(&bad, &bad).is_err());
        let tiny = FrechetStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1e-12]).unwrap();
        assert!(frechet_distance(&tiny, &tiny).unwrap() < 1e-9);
    }

    #[test]
    fn feature_fixtures() {
        let black = feature_vector(&Image::filled(4, 4, [0, 0, 0]));
        assert_eq!(black.len(), FEATURE_DIM);
        for c in 0..3 {
            assert_eq!(black[10 * c], 0.0);
            assert_eq!(black[10 * c + 1], 0.0);
            assert_eq!(black[10 * c + 2], 1.0);
        }
        let white = feature_vector(&Image::filled(4, 4, [255, 255, 255]));
        for c in 0..3 {
            assert_eq!(white[10 * c], 1.0);
            assert_eq!(white[10 * c + 9], 1.0);
        }
        let mut checker = Image::filled(4, 4, [0, 0, 0]);
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    checker.set(x, y, [255, 255, 255]);
                }
            }
        }
        let f = feature_vector(&checker);
        for c in 0..3 {
            assert!((f[10 * c] - 0.5).abs() < 1e-12);
            assert!((f[10 * c + 1] - 0.5).abs() < 1e-12);
        }
    }
}
