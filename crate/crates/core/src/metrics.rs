//! Inception Score, Fréchet distance and R-precision over an arbitrary
//! feature extractor.
//!
//! All metric arithmetic is in `f64`. Matrices are rank-2 [`Tensor`]s with one
//! sample per row.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Largest asymmetry tolerated in a covariance matrix.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Eigenvalues between this and zero are rounding noise and clamped to zero.
pub const EIGEN_TOL: f64 = 1e-10;

/// A metric reported as mean and (population) standard deviation over folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

fn matrix_dims(m: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    match m.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(dim_err!("{what} must be a matrix, got shape {s:?}")),
    }
}

/// Contiguous fold boundaries; the first `m % folds` folds get one extra row.
fn fold_ranges(m: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (m / folds, m % folds);
    let mut start = 0;
    (0..folds)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per split, reported as mean ± std.
pub fn inception_score(probs: &Tensor<f64>, splits: usize) -> Result<MeanStd> {
    let (m, c) = matrix_dims(probs, "probabilities")?;
    if splits == 0 || m < splits {
        return Err(Error::Contract(format!("need at least {splits} rows for {splits} splits, got {m}")));
    }
    for i in 0..m {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("row {i} is not a probability distribution")));
        }
    }
    let scores: Vec<f64> = fold_ranges(m, splits)
        .into_iter()
        .map(|range| {
            let n = range.len() as f64;
            // mean shifted by the first row: identical rows give an exact marginal
            let first = probs.row(range.start);
            let mut shift = vec![0.0; c];
            for i in range.clone() {
                for ((acc, &p), &f) in shift.iter_mut().zip(probs.row(i)).zip(first) {
                    *acc += p - f;
                }
            }
            let marginal: Vec<f64> = first.iter().zip(&shift).map(|(f, d)| f + d / n).collect();
            let kl: f64 = range
                .map(|i| {
                    probs
                        .row(i)
                        .iter()
                        .zip(&marginal)
                        .map(|(&p, &q)| p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln()))
                        .sum::<f64>()
                })
                .sum();
            (kl / n).exp()
        })
        .collect();
    Ok(MeanStd::of(&scores))
}

/// Mean and unbiased covariance of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `D×D`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

pub fn gaussian_stats(features: &Tensor<f64>) -> Result<GaussianStats> {
    let (m, d) = matrix_dims(features, "features")?;
    if m < 2 {
        return Err(Error::Contract(format!("covariance needs at least 2 samples, got {m}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (acc, &x) in mean.iter_mut().zip(features.row(i)) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..m {
        let row = features.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let s = 0.5 * (cov[a * d + b] + cov[b * d + a]) / (m - 1) as f64;
            cov[a * d + b] = s;
            cov[b * d + a] = s;
        }
    }
    Ok(GaussianStats { mean, cov })
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::Contract(format!("{what} is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

/// Non-negative eigenvalues of a symmetric matrix, with rounding noise clamped.
fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m);
    for l in e.eigenvalues.iter_mut() {
        if *l < -EIGEN_TOL {
            return Err(Error::Numerical(format!("{what} has eigenvalue {l:e}")));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.len() != a.dim() * a.dim() || b.cov.len() != b.dim() * b.dim() {
        return Err(dim_err!("statistics of dimension {} and {}", a.dim(), b.dim()));
    }
    let (s1, s2) = (a.cov_matrix(), b.cov_matrix());
    check_symmetric(&s1, "first covariance")?;
    check_symmetric(&s2, "second covariance")?;
    let e1 = clamped_eigen(s1.clone(), "first covariance")?;
    let root = e1.eigenvectors.clone()
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let inner = &root * &s2 * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_sqrt: f64 = clamped_eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.sqrt())
        .sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt)
}

/// Settings for caption retrieval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalConfig {
    /// Candidates per query: one true caption plus `candidates − 1` mismatches.
    pub candidates: usize,
    pub folds: usize,
    /// Seeds mismatch sampling and candidate order.
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            candidates: 100,
            folds: 10,
            seed: 0,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Whether query `i` ranks its own caption first among its candidates.
fn retrieve(
    i: usize,
    images: &Tensor<f64>,
    captions: &Tensor<f64>,
    pool: &Tensor<f64>,
    eligible: &[usize],
    cfg: &RetrievalConfig,
) -> bool {
    let mut r = rng::stream(cfg.seed, &[i as u64]);
    let mismatches = rand::seq::index::sample(&mut r, eligible.len(), cfg.candidates - 1);
    // `None` marks the true caption.
    let mut cands: Vec<Option<usize>> = std::iter::once(None)
        .chain(mismatches.iter().map(|j| Some(eligible[j])))
        .collect();
    cands.shuffle(&mut r);
    let img = images.row(i);
    let mut best = (f64::NEG_INFINITY, None);
    for &c in &cands {
        let emb = match c {
            None => captions.row(i),
            Some(j) => pool.row(j),
        };
        // Strict comparison keeps the lowest candidate index on ties.
        let s = cosine(img, emb);
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1.is_none()
}

/// R-precision with R = 1: per query, rank the true caption against
/// `candidates − 1` pool captions whose label differs from the query's label
/// by cosine similarity (descending); report the hit rate per fold.
pub fn r_precision(
    images: &Tensor<f64>,
    captions: &Tensor<f64>,
    labels: &[usize],
    pool: &Tensor<f64>,
    pool_labels: &[usize],
    cfg: &RetrievalConfig,
) -> Result<MeanStd> {
    let (m, d) = matrix_dims(images, "image embeddings")?;
    let (mc, dc) = matrix_dims(captions, "caption embeddings")?;
    let (p, dp) = matrix_dims(pool, "caption pool")?;
    if mc != m || labels.len() != m || pool_labels.len() != p || dc != d || dp != d {
        return Err(dim_err!("retrieval inputs disagree: {m}×{d} images, {mc}×{dc} captions, {p}×{dp} pool"));
    }
    if cfg.candidates < 2 || cfg.folds == 0 || m < cfg.folds {
        return Err(Error::Contract(format!(
            "{m} queries cannot fill {} folds of {} candidates",
            cfg.folds, cfg.candidates
        )));
    }
    let mut hits = vec![false; m];
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    for (&label, queries) in &by_label {
        let eligible: Vec<usize> = (0..p).filter(|&j| pool_labels[j] != label).collect();
        if eligible.len() < cfg.candidates - 1 {
            return Err(Error::Contract(format!(
                "only {} mismatched captions for label {label}, need {}",
                eligible.len(),
                cfg.candidates - 1
            )));
        }
        let run = |&i: &usize| (i, retrieve(i, images, captions, pool, &eligible, cfg));
        #[cfg(feature = "parallel")]
        let found: Vec<(usize, bool)> = {
            use rayon::prelude::*;
            queries.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let found: Vec<(usize, bool)> = queries.iter().map(run).collect();
        for (i, h) in found {
            hits[i] = h;
        }
    }
    let scores: Vec<f64> = fold_ranges(m, cfg.folds)
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            r.filter(|&i| hits[i]).count() as f64 / n
        })
        .collect();
    Ok(MeanStd::of(&scores))
}

/// Class probabilities and features of a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    /// `M×C`, rows summing to one.
    pub probs: Tensor<f64>,
    /// `M×D`.
    pub features: Tensor<f64>,
}

/// The network standing in for Inception-v3.
pub trait FeatureExtractor {
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// `images` are `[3,H,W]` in `[-1, 1]`.
    fn extract(&self, images: &[Tensor<f32>]) -> Result<Extraction>;
}

const FEATURE_MAGIC: &[u8; 4] = b"DMF1";

pub fn write_features(w: &mut impl Write, features: &Tensor<f32>) -> Result<()> {
    let (m, d) = match features.shape() {
        &[m, d] => (m, d),
        s => return Err(dim_err!("features must be a matrix, got shape {s:?}")),
    };
    let m = u32::try_from(m).map_err(|_| Error::Format("too many feature rows".into()))?;
    let d = u32::try_from(d).map_err(|_| Error::Format("feature dimension too large".into()))?;
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&m.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for x in features.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature file magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let m = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let d = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; m * d * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("feature file truncated: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&[m, d], data)
}

pub fn save_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_features(&mut w, features)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Tensor<f32>> {
    read_features(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Scores of one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub rp_mean: f64,
    pub rp_std: f64,
}

/// JSON schema of [`MetricReport`].
pub const REPORT_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "MetricReport",
  "type": "object",
  "properties": {
    "is_mean": {"type": "number", "minimum": 1},
    "is_std": {"type": "number", "minimum": 0},
    "fid": {"type": "number"},
    "rp_mean": {"type": "number", "minimum": 0, "maximum": 1},
    "rp_std": {"type": "number", "minimum": 0}
  },
  "required": ["is_mean", "is_std", "fid", "rp_mean", "rp_std"],
  "additionalProperties": false
}"#;

impl MetricReport {
    pub fn new(is: MeanStd, fid: f64, rp: MeanStd) -> Self {
        Self {
            is_mean: is.mean,
            is_std: is.std,
            fid,
            rp_mean: rp.mean,
            rp_std: rp.std,
        }
    }

    /// Parses a report and checks it against [`REPORT_SCHEMA`].
    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.is_mean >= 1.0 - 1e-9
            && self.is_std >= 0.0
            && self.fid.is_finite()
            && (0.0..=1.0).contains(&self.rp_mean)
            && self.rp_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!("metric report out of range: {self:?}")))
        }
    }
}
