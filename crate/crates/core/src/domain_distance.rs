//! Domain categorization by reconstruction error under a linear autoencoder
//! (PCA) fitted on training-domain frames.

use crate::exec::Exec;
use crate::image::{luminance, Image};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

pub const GRID_HEIGHT: usize = 20;
pub const GRID_WIDTH: usize = 40;
pub const INPUT_DIM: usize = GRID_HEIGHT * GRID_WIDTH;
pub const DEFAULT_COMPONENTS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DistanceError {
    #[error("{k} components requested from {n} samples")]
    TooFewSamples { k: usize, n: usize },
    #[error("need at least 3 domains, got {0}")]
    TooFewDomains(usize),
    #[error("image {0}x{1} is smaller than the {GRID_WIDTH}x{GRID_HEIGHT} grid")]
    TooSmall(usize, usize),
    #[error("no samples for domain '{0}'")]
    NoSamples(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Box-average grayscale on a 20×40 grid, [0, 1] scale.
pub fn downsample(image: &Image) -> Result<Vec<f64>, DistanceError> {
    let (w, h) = image.dims();
    if w < GRID_WIDTH || h < GRID_HEIGHT {
        return Err(DistanceError::TooSmall(w, h));
    }
    let mut out = Vec::with_capacity(INPUT_DIM);
    for gy in 0..GRID_HEIGHT {
        let (y0, y1) = (gy * h / GRID_HEIGHT, (gy + 1) * h / GRID_HEIGHT);
        for gx in 0..GRID_WIDTH {
            let (x0, x1) = (gx * w / GRID_WIDTH, (gx + 1) * w / GRID_WIDTH);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += luminance(image.get(x, y));
                }
            }
            out.push(acc / ((y1 - y0) * (x1 - x0)) as f64 / 255.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceModel {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
}

impl DistanceModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<(), DistanceError> {
        let d = self.dim();
        if d == 0 || self.components.iter().any(|c| c.len() != d) {
            return Err(DistanceError::InvalidModel("component length differs from mean".into()));
        }
        if self.mean.iter().chain(self.components.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(DistanceError::InvalidModel("non-finite coefficients".into()));
        }
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate().skip(i) {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(DistanceError::InvalidModel(format!("components {i},{j} not orthonormal")));
                }
            }
        }
        Ok(())
    }

    /// Mean squared residual per entry of `v` outside the component span.
    pub fn vector_error(&self, v: &[f64]) -> f64 {
        let mut r: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for c in &self.components {
            let dot: f64 = r.iter().zip(c).map(|(a, b)| a * b).sum();
            for (ri, ci) in r.iter_mut().zip(c) {
                *ri -= dot * ci;
            }
        }
        r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64
    }

    pub fn reconstruction_error(&self, image: &Image) -> Result<f64, DistanceError> {
        Ok(self.vector_error(&downsample(image)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), DistanceError> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|source| DistanceError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DistanceError> {
        let text = std::fs::read_to_string(path).map_err(|source| DistanceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m: DistanceModel = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Fit on already-downsampled vectors.
pub fn fit_vectors(samples: &[Vec<f64>], k: usize) -> Result<DistanceModel, DistanceError> {
    let n = samples.len();
    if n == 0 || k > n {
        return Err(DistanceError::TooFewSamples { k, n });
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(DistanceError::InvalidModel("samples differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n as f64;
        }
    }
    if k == 0 {
        return Ok(DistanceModel {
            mean,
            components: Vec::new(),
        });
    }
    // Columns are centered samples. Principal directions come from the n×n Gram
    // matrix: if G v = λ v then X v is a left singular direction of X.
    let x = DMatrix::from_fn(d, n, |i, j| samples[j][i] - mean[i]);
    let eig = (x.transpose() * &x).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).sqrt();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let c: Vec<f64> = (&x * eig.eigenvectors.column(j)).iter().copied().collect();
        match orthonormalize(c, &components, 1e-9 * scale.max(1.0)) {
            Some(c) => components.push(c),
            None => break,
        }
    }
    // Fewer independent directions than k: complete with axis vectors.
    let mut axis = 0;
    while components.len() < k && axis < d {
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        axis += 1;
        if let Some(c) = orthonormalize(e, &components, 1e-3) {
            components.push(c);
        }
    }
    if components.len() < k {
        return Err(DistanceError::InvalidModel("degenerate principal directions".into()));
    }
    Ok(DistanceModel { mean, components })
}

/// Two-pass Gram-Schmidt of `c` against `basis`; `None` if the remainder is shorter than `min_norm`.
fn orthonormalize(mut c: Vec<f64>, basis: &[Vec<f64>], min_norm: f64) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for prev in basis {
            let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (ci, pi) in c.iter_mut().zip(prev) {
                *ci -= dot * pi;
            }
        }
    }
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < min_norm {
        return None;
    }
    c.iter_mut().for_each(|v| *v /= norm);
    Some(c)
}

pub fn fit_distance_model(training: &[Image], k: usize) -> Result<DistanceModel, DistanceError> {
    let samples = training.iter().map(downsample).collect::<Result<Vec<_>, _>>()?;
    fit_vectors(&samples, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub mean_error: f64,
    pub n_samples: usize,
}

pub fn score_domain(
    model: &DistanceModel,
    domain: &str,
    images: &[Image],
    exec: Exec,
) -> Result<DomainScore, DistanceError> {
    if images.is_empty() {
        return Err(DistanceError::NoSamples(domain.into()));
    }
    let errs = exec.map(images, |i| model.reconstruction_error(i));
    let errs = errs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(DomainScore {
        domain: domain.into(),
        mean_error: errs.iter().sum::<f64>() / errs.len() as f64,
        n_samples: errs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainCategory {
    InDistribution,
    InBetween,
    OutOfDistribution,
}

impl DomainCategory {
    pub fn name(self) -> &'static str {
        match self {
            DomainCategory::InDistribution => "in_distribution",
            DomainCategory::InBetween => "in_between",
            DomainCategory::OutOfDistribution => "out_of_distribution",
        }
    }
}

impl fmt::Display for DomainCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Group sizes for `n` sorted domains; earlier groups take the remainder.
pub fn tertile_sizes(n: usize) -> [usize; 3] {
    let a = n.div_ceil(3);
    let b = (n - a).div_ceil(2);
    [a, b, n - a - b]
}

/// Sort ascending by mean error (stable) and split into tertiles.
pub fn categorize_domains(scores: &[DomainScore]) -> Result<Vec<(String, DomainCategory)>, DistanceError> {
    if scores.len() < 3 {
        return Err(DistanceError::TooFewDomains(scores.len()));
    }
    let mut sorted: Vec<&DomainScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.mean_error.total_cmp(&b.mean_error));
    let [a, b, _] = tertile_sizes(scores.len());
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let cat = if i < a {
                DomainCategory::InDistribution
            } else if i < a + b {
                DomainCategory::InBetween
            } else {
                DomainCategory::OutOfDistribution
            };
            (s.domain.clone(), cat)
        })
        .collect())
}

/// `domain,mean_error,n_samples,category`, in ascending error order.
pub fn scores_to_csv(scores: &[DomainScore]) -> Result<String, DistanceError> {
    let cats = categorize_domains(scores)?;
    let by_name: BTreeMap<&str, &DomainScore> = scores.iter().map(|s| (s.domain.as_str(), s)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["domain", "mean_error", "n_samples", "category"])?;
    for (name, cat) in &cats {
        let s = by_name[name.as_str()];
        w.write_record([name.clone(), format!("{:.6}", s.mean_error), s.n_samples.to_string(), cat.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8"))
}

/// One column per strategy plus whether every strategy put the domain in
/// the same group.
pub fn agreement_csv(per_strategy: &BTreeMap<String, Vec<DomainScore>>) -> Result<String, DistanceError> {
    let mut table: BTreeMap<String, BTreeMap<&str, DomainCategory>> = BTreeMap::new();
    for (strategy, scores) in per_strategy {
        for (domain, cat) in categorize_domains(scores)? {
            table.entry(domain).or_default().insert(strategy.as_str(), cat);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["domain".to_string()];
    header.extend(per_strategy.keys().cloned());
    header.push("agreed".into());
    w.write_record(&header)?;
    for (domain, cats) in &table {
        let mut row = vec![domain.clone()];
        let mut seen: Vec<DomainCategory> = Vec::new();
        for strategy in per_strategy.keys() {
            match cats.get(strategy.as_str()) {
                Some(c) => {
                    row.push(c.to_string());
                    seen.push(*c);
                }
                None => row.push(String::new()),
            }
        }
        let agreed = seen.len() == per_strategy.len() && seen.windows(2).all(|p| p[0] == p[1]);
        row.push(agreed.to_string());
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(d: &str, e: f64) -> DomainScore {
        DomainScore {
            domain: d.into(),
            mean_error: e,
            n_samples: 1,
        }
    }

    #[test]
    fn tertiles() {
        assert_eq!(tertile_sizes(3), [1, 1, 1]);
        assert_eq!(tertile_sizes(4), [2, 1, 1]);
        assert_eq!(tertile_sizes(5), [2, 2, 1]);
        assert_eq!(tertile_sizes(9), [3, 3, 3]);
        let cats = categorize_domains(&[score("night", 0.218), score("sunny", 0.074), score("winter", 0.078)]).unwrap();
        assert_eq!(cats[0], ("sunny".into(), DomainCategory::InDistribution));
        assert_eq!(cats[1], ("winter".into(), DomainCategory::InBetween));
        assert_eq!(cats[2], ("night".into(), DomainCategory::OutOfDistribution));
        assert!(categorize_domains(&[score("a", 0.0), score("b", 0.0)]).is_err());
    }

    #[test]
    fn k_zero_and_identical() {
        let img = Image::filled(320, 160, [40, 90, 200]);
        let m = fit_distance_model(&[img.clone(), img.clone()], 0).unwrap();
        assert_eq!(m.reconstruction_error(&img).unwrap(), 0.0);
        let m = fit_distance_model(&[img.clone(), img.clone(), img.clone()], 2).unwrap();
        m.validate().unwrap();
        assert!(m.reconstruction_error(&img).unwrap() < 1e-20);
        assert!(fit_distance_model(&[img], 2).is_err());
    }
}
