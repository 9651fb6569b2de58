//! Distance checks in embedding space.
//!
//! [`DistanceChecker`] scores a sample by its average Euclidean distance to
//! the `k` nearest reference (training) embeddings and rejects samples whose
//! score reaches a threshold fitted as a quantile of the validation scores,
//! either globally or per class. [`MahalanobisChecker`] is the same rule
//! with the minimum tied-covariance Mahalanobis distance to a class mean as
//! the score.
//!
//! Nearest neighbours are found by exact brute force in `f64`. Ties at the
//! `k`-th distance resolve by reference row index.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{self, FeatureMatrix};
use crate::error::{Error, Result};
use crate::fsutil;

pub const DEFAULT_K: usize = 25;
pub const DEFAULT_QUANTILE: f64 = 0.99;
pub const DEFAULT_MIN_SAMPLES: usize = 20;
pub const DEFAULT_MAX_REF: usize = 50_000;

pub const CHECKER_REFERENCE: &str = "checker_reference.npy";
pub const CHECKER_SIDECAR: &str = "checker.json";

/// Linear interpolation between order statistics at `h = (n - 1) q`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    match sorted.get(lo + 1) {
        Some(&next) if frac > 0.0 => sorted[lo] + frac * (next - sorted[lo]),
        _ => sorted[lo],
    }
}

/// Global and per-class rejection thresholds. A sample is kept when its
/// score is strictly below the threshold of its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub quantile: f64,
    pub global: f64,
    pub per_class: Option<Vec<f64>>,
    pub per_class_valid: Vec<bool>,
}

impl Thresholds {
    fn unbounded(num_classes: usize) -> Self {
        Thresholds {
            quantile: 1.0,
            global: f64::INFINITY,
            per_class: None,
            per_class_valid: vec![false; num_classes],
        }
    }

    /// Fits thresholds on validation `scores`, grouping by `groups` for the
    /// class-wise variant. Groups with fewer than `min_samples` members use
    /// the global threshold.
    pub fn fit(
        scores: &[f64],
        groups: &[usize],
        num_classes: usize,
        q: f64,
        classwise: bool,
        min_samples: usize,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::invalid(format!("quantile {q} outside (0, 1)")));
        }
        if classwise && groups.len() != scores.len() {
            return Err(Error::LengthMismatch {
                what: "validation scores vs classes",
                left: scores.len(),
                right: groups.len(),
            });
        }
        let global = quantile(scores, q);
        let (per_class, per_class_valid) = if classwise {
            let mut buckets = vec![Vec::new(); num_classes];
            for (&s, &g) in scores.iter().zip(groups) {
                let bucket = buckets.get_mut(g).ok_or_else(|| {
                    Error::invalid(format!("class {g} outside {num_classes} classes"))
                })?;
                bucket.push(s);
            }
            let mut per = vec![global; num_classes];
            let mut valid = vec![false; num_classes];
            for (c, b) in buckets.iter().enumerate() {
                if !b.is_empty() && b.len() >= min_samples {
                    per[c] = quantile(b, q);
                    valid[c] = true;
                }
            }
            (Some(per), valid)
        } else {
            (None, vec![false; num_classes])
        };
        Ok(Thresholds {
            quantile: q,
            global,
            per_class,
            per_class_valid,
        })
    }

    pub fn threshold_for(&self, class: usize) -> f64 {
        match &self.per_class {
            Some(per) if self.per_class_valid.get(class).copied().unwrap_or(false) => per[class],
            _ => self.global,
        }
    }

    pub fn is_classwise(&self) -> bool {
        self.per_class.is_some()
    }

    /// The same thresholds with the per-class table dropped.
    pub fn global_only(&self) -> Self {
        Thresholds {
            per_class: None,
            per_class_valid: vec![false; self.per_class_valid.len()],
            ..self.clone()
        }
    }

    pub fn kept_mask(&self, scores: &[f64], pred: &[usize]) -> Result<Vec<bool>> {
        if scores.len() != pred.len() {
            return Err(Error::LengthMismatch {
                what: "scores vs predicted classes",
                left: scores.len(),
                right: pred.len(),
            });
        }
        Ok(scores
            .iter()
            .zip(pred)
            .map(|(&s, &p)| s < self.threshold_for(p))
            .collect())
    }
}

/// Anything that can reject test samples by distance to the in-distribution data.
pub trait DistanceMask: Sync {
    fn dim(&self) -> usize;
    fn scores(&self, features: &FeatureMatrix) -> Result<Vec<f64>>;
    fn thresholds(&self) -> &Thresholds;

    fn kept_mask(&self, features: &FeatureMatrix, pred: &[usize]) -> Result<Vec<bool>> {
        let scores = self.scores(features)?;
        self.thresholds().kept_mask(&scores, pred)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub k: usize,
    pub quantile: f64,
    pub classwise: bool,
    pub min_samples: usize,
    pub max_ref: usize,
    pub seed: u64,
    pub normalize: bool,
    /// The reference set is the validation set itself; each validation
    /// sample's zero-distance self match is discarded when fitting.
    pub self_exclude: bool,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            k: DEFAULT_K,
            quantile: DEFAULT_QUANTILE,
            classwise: false,
            min_samples: DEFAULT_MIN_SAMPLES,
            max_ref: DEFAULT_MAX_REF,
            seed: 0,
            normalize: false,
            self_exclude: false,
        }
    }
}

/// Rows widened to `f64`, optionally scaled to unit norm. Zero rows are
/// left as they are.
fn prepare(features: &FeatureMatrix, normalize: bool) -> Vec<f64> {
    let mut out: Vec<f64> = features.as_slice().iter().map(|&v| v as f64).collect();
    if normalize {
        for row in out.chunks_exact_mut(features.dim()) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    out
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of_k_smallest(
    query: &[f64],
    reference: &[f64],
    dim: usize,
    k: usize,
    exclude_self: bool,
) -> f64 {
    let mut dists: Vec<(f64, usize)> = reference
        .chunks_exact(dim)
        .enumerate()
        .map(|(j, r)| (squared_distance(query, r), j))
        .collect();
    if exclude_self {
        if let Some(pos) = dists.iter().position(|&(d, _)| d == 0.0) {
            dists.remove(pos);
        }
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, order);
        dists.truncate(k);
    }
    dists.sort_by(order);
    dists.iter().map(|&(d, _)| d.sqrt()).sum::<f64>() / k as f64
}

fn knn_on_prepared(
    reference: &[f64],
    queries: &[f64],
    dim: usize,
    k: usize,
    exclude_self: bool,
) -> Vec<f64> {
    queries
        .par_chunks_exact(dim)
        .map(|q| mean_of_k_smallest(q, reference, dim, k, exclude_self))
        .collect()
}

/// Mean Euclidean distance from each query to its `k` nearest reference
/// rows. With `exclude_self`, one exact zero-distance match per query is
/// discarded first.
pub fn average_knn_distances(
    reference: &FeatureMatrix,
    queries: &FeatureMatrix,
    k: usize,
    normalize: bool,
    exclude_self: bool,
) -> Result<Vec<f64>> {
    if reference.dim() != queries.dim() {
        return Err(Error::DimensionMismatch {
            file: "queries".into(),
            expected: reference.dim(),
            found: queries.dim(),
        });
    }
    let available = reference.n() - usize::from(exclude_self);
    if k == 0 || k > available {
        return Err(Error::invalid(format!(
            "k = {k} needs 1..={available} reference rows"
        )));
    }
    Ok(knn_on_prepared(
        &prepare(reference, normalize),
        &prepare(queries, normalize),
        reference.dim(),
        k,
        exclude_self,
    ))
}

/// Uniform subsample without replacement, indices returned in ascending order.
pub fn subsample_indices(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone)]
pub struct DistanceChecker {
    reference: FeatureMatrix,
    prepared: Vec<f64>,
    pub k: usize,
    pub normalize: bool,
    pub self_exclude: bool,
    pub thresholds: Thresholds,
}

impl PartialEq for DistanceChecker {
    fn eq(&self, other: &Self) -> bool {
        self.reference == other.reference
            && self.k == other.k
            && self.normalize == other.normalize
            && self.self_exclude == other.self_exclude
            && self.thresholds == other.thresholds
    }
}

#[derive(Serialize, Deserialize)]
struct CheckerSidecar {
    k: usize,
    normalize: bool,
    self_exclude: bool,
    reference_rows: usize,
    dim: usize,
    thresholds: Thresholds,
}

impl DistanceChecker {
    pub fn reference(&self) -> &FeatureMatrix {
        &self.reference
    }

    pub fn average_knn_distance(&self, queries: &FeatureMatrix) -> Result<Vec<f64>> {
        if queries.dim() != self.reference.dim() {
            return Err(Error::DimensionMismatch {
                file: "queries".into(),
                expected: self.reference.dim(),
                found: queries.dim(),
            });
        }
        Ok(knn_on_prepared(
            &self.prepared,
            &prepare(queries, self.normalize),
            self.reference.dim(),
            self.k,
            false,
        ))
    }

    /// Writes the reference rows as `.npy` and the fitted parameters as a
    /// JSON sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fsutil::create_dir(dir)?;
        bundle::save_features(dir, CHECKER_REFERENCE, &self.reference)?;
        let sidecar = CheckerSidecar {
            k: self.k,
            normalize: self.normalize,
            self_exclude: self.self_exclude,
            reference_rows: self.reference.n(),
            dim: self.reference.dim(),
            thresholds: self.thresholds.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fsutil::write_atomic(&dir.join(CHECKER_SIDECAR), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKER_SIDECAR);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: CheckerSidecar = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            file: CHECKER_SIDECAR.into(),
            reason: e.to_string(),
        })?;
        let reference = bundle::load_features(dir, CHECKER_REFERENCE, sidecar.dim)?;
        if reference.n() != sidecar.reference_rows {
            return Err(Error::ShapeMismatch {
                file: CHECKER_REFERENCE.into(),
                reason: format!(
                    "{} rows, sidecar says {}",
                    reference.n(),
                    sidecar.reference_rows
                ),
            });
        }
        if sidecar.k == 0 || sidecar.k > reference.n() {
            return Err(Error::invalid(format!(
                "stored k = {} is unusable",
                sidecar.k
            )));
        }
        let prepared = prepare(&reference, sidecar.normalize);
        Ok(DistanceChecker {
            reference,
            prepared,
            k: sidecar.k,
            normalize: sidecar.normalize,
            self_exclude: sidecar.self_exclude,
            thresholds: sidecar.thresholds,
        })
    }
}

impl DistanceMask for DistanceChecker {
    fn dim(&self) -> usize {
        self.reference.dim()
    }

    fn scores(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        self.average_knn_distance(features)
    }

    fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }
}

/// Fits the K-NN checker. `train` is the reference pool (pass the
/// validation features again in `self_exclude` mode); `val_groups` assigns
/// each validation row to a class for the class-wise thresholds.
pub fn fit_distance_checker(
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    val_groups: &[usize],
    num_classes: usize,
    cfg: &DistanceConfig,
) -> Result<DistanceChecker> {
    if train.dim() != val.dim() {
        return Err(Error::DimensionMismatch {
            file: "validation features".into(),
            expected: train.dim(),
            found: val.dim(),
        });
    }
    if cfg.max_ref == 0 {
        return Err(Error::invalid("max_ref must be positive"));
    }
    let idx = subsample_indices(train.n(), cfg.max_ref, cfg.seed);
    let reference = if idx.len() == train.n() {
        train.clone()
    } else {
        train.select(&idx)
    };
    let usable = reference.n() - usize::from(cfg.self_exclude);
    if cfg.k == 0 || cfg.k > usable {
        return Err(Error::invalid(format!(
            "k = {} needs 1..={usable} reference rows",
            cfg.k
        )));
    }
    let prepared = prepare(&reference, cfg.normalize);
    let val_scores = knn_on_prepared(
        &prepared,
        &prepare(val, cfg.normalize),
        val.dim(),
        cfg.k,
        cfg.self_exclude,
    );
    let thresholds = Thresholds::fit(
        &val_scores,
        val_groups,
        num_classes,
        cfg.quantile,
        cfg.classwise,
        cfg.min_samples,
    )?;
    Ok(DistanceChecker {
        reference,
        prepared,
        k: cfg.k,
        normalize: cfg.normalize,
        self_exclude: cfg.self_exclude,
        thresholds,
    })
}

/// `AD_i < threshold(pred_i)` for every test row.
pub fn distance_kept_mask(
    checker: &impl DistanceMask,
    test: &FeatureMatrix,
    test_pred: &[usize],
) -> Result<Vec<bool>> {
    checker.kept_mask(test, test_pred)
}

/// In-place Cholesky factorization of a symmetric `dim x dim` matrix.
/// Returns the lower factor, or `None` if the matrix is not positive definite.
pub(crate) fn cholesky(a: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut sum = a[i * dim + j];
            for k in 0..j {
                sum -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if sum.is_nan() || sum <= 0.0 || sum.is_infinite() {
                    return None;
                }
                l[i * dim + i] = sum.sqrt();
            } else {
                l[i * dim + j] = sum / l[j * dim + j];
            }
        }
    }
    Some(l)
}

/// `|| L^{-1} r ||` by forward substitution.
fn whitened_norm(l: &[f64], r: &[f64], dim: usize) -> f64 {
    let mut y = vec![0.0; dim];
    for i in 0..dim {
        let mut s = r[i];
        for k in 0..i {
            s -= l[i * dim + k] * y[k];
        }
        y[i] = s / l[i * dim + i];
    }
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const RIDGE_FACTOR: f64 = 1e-6;
const RIDGE_ESCALATIONS: usize = 6;

/// Per-class means with a shared (tied) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisChecker {
    dim: usize,
    /// `C x D`, row-major.
    pub class_means: Vec<f64>,
    /// Classes with at least one training sample; only these enter the minimum.
    pub class_present: Vec<bool>,
    /// `D x D` pooled covariance including the ridge.
    pub shared_covariance: Vec<f64>,
    pub ridge: f64,
    factor: Vec<f64>,
    pub thresholds: Thresholds,
}

impl MahalanobisChecker {
    /// Builds a checker from explicit means and covariance, without ridge.
    /// Thresholds start unbounded; see [`MahalanobisChecker::calibrate`].
    pub fn from_parts(class_means: &[Vec<f64>], covariance: Vec<f64>) -> Result<Self> {
        let dim = class_means.first().map_or(0, Vec::len);
        if dim == 0 || class_means.iter().any(|m| m.len() != dim) {
            return Err(Error::invalid(
                "class means must share a positive dimension",
            ));
        }
        if covariance.len() != dim * dim {
            return Err(Error::invalid("covariance must be D x D"));
        }
        let factor = cholesky(&covariance, dim).ok_or(Error::SingularCovariance { ridge: 0.0 })?;
        Ok(MahalanobisChecker {
            dim,
            class_means: class_means.concat(),
            class_present: vec![true; class_means.len()],
            shared_covariance: covariance,
            ridge: 0.0,
            factor,
            thresholds: Thresholds::unbounded(class_means.len()),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_present.len()
    }

    pub fn score_row(&self, x: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        let mut r = vec![0.0; self.dim];
        for (c, mean) in self.class_means.chunks_exact(self.dim).enumerate() {
            if !self.class_present[c] {
                continue;
            }
            for ((ri, xi), mi) in r.iter_mut().zip(x).zip(mean) {
                *ri = xi - mi;
            }
            best = best.min(whitened_norm(&self.factor, &r, self.dim));
        }
        best
    }

    pub fn calibrate(
        &mut self,
        val: &FeatureMatrix,
        val_groups: &[usize],
        q: f64,
        classwise: bool,
        min_samples: usize,
    ) -> Result<()> {
        let scores = self.scores(val)?;
        self.thresholds = Thresholds::fit(
            &scores,
            val_groups,
            self.num_classes(),
            q,
            classwise,
            min_samples,
        )?;
        Ok(())
    }
}

impl DistanceMask for MahalanobisChecker {
    fn dim(&self) -> usize {
        self.dim
    }

    fn scores(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        if features.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                file: "queries".into(),
                expected: self.dim,
                found: features.dim(),
            });
        }
        let prepared = prepare(features, false);
        Ok(prepared
            .par_chunks_exact(self.dim)
            .map(|x| self.score_row(x))
            .collect())
    }

    fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }
}

/// Fits class means and the pooled within-class covariance on the training
/// set, regularized by `ridge * I` with `ridge = 1e-6 * trace / D`
/// escalated tenfold until the Cholesky factorization succeeds.
#[allow(clippy::too_many_arguments)]
pub fn fit_mahalanobis_checker(
    train: &FeatureMatrix,
    train_labels: &[usize],
    val: &FeatureMatrix,
    val_groups: &[usize],
    num_classes: usize,
    q: f64,
    classwise: bool,
    min_samples: usize,
) -> Result<MahalanobisChecker> {
    if train_labels.len() != train.n() {
        return Err(Error::LengthMismatch {
            what: "training features vs labels",
            left: train.n(),
            right: train_labels.len(),
        });
    }
    if val.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            file: "validation features".into(),
            expected: train.dim(),
            found: val.dim(),
        });
    }
    let dim = train.dim();
    let mut means = vec![0.0; num_classes * dim];
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in train.rows().zip(train_labels) {
        if y >= num_classes {
            return Err(Error::invalid(format!(
                "label {y} outside {num_classes} classes"
            )));
        }
        counts[y] += 1;
        for (m, &v) in means[y * dim..(y + 1) * dim].iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            means[c * dim..(c + 1) * dim]
                .iter_mut()
                .for_each(|m| *m /= n as f64);
        }
    }

    let mut cov = vec![0.0; dim * dim];
    let mut pooled = 0usize;
    let mut r = vec![0.0; dim];
    for (row, &y) in train.rows().zip(train_labels) {
        if counts[y] < 2 {
            continue;
        }
        pooled += 1;
        for ((ri, &v), m) in r.iter_mut().zip(row).zip(&means[y * dim..(y + 1) * dim]) {
            *ri = v as f64 - m;
        }
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] += r[i] * r[j];
            }
        }
    }
    if pooled == 0 {
        return Err(Error::invalid(
            "no class has two training samples for the tied covariance",
        ));
    }
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[i * dim + j] / pooled as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }

    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let mut ridge = if trace > 0.0 {
        RIDGE_FACTOR * trace / dim as f64
    } else {
        RIDGE_FACTOR
    };
    let mut attempt = 0;
    let (covariance, factor) = loop {
        let mut regularized = cov.clone();
        for i in 0..dim {
            regularized[i * dim + i] += ridge;
        }
        if let Some(l) = cholesky(&regularized, dim) {
            break (regularized, l);
        }
        if attempt == RIDGE_ESCALATIONS {
            return Err(Error::SingularCovariance { ridge });
        }
        attempt += 1;
        ridge *= 10.0;
    };

    let mut checker = MahalanobisChecker {
        dim,
        class_means: means,
        class_present: counts.iter().map(|&n| n > 0).collect(),
        shared_covariance: covariance,
        ridge,
        factor,
        thresholds: Thresholds::unbounded(num_classes),
    };
    checker.calibrate(val, val_groups, q, classwise, min_samples)?;
    Ok(checker)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f32) -> FeatureMatrix {
        FeatureMatrix::new(
            n,
            d,
            (0..n * d)
                .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
                .collect(),
        )
        .unwrap()
    }

    /// Full pairwise distance matrix, each row sorted, first k averaged.
    fn pairwise_oracle(reference: &FeatureMatrix, queries: &FeatureMatrix, k: usize) -> Vec<f64> {
        queries
            .rows()
            .map(|q| {
                let mut d: Vec<f64> = reference
                    .rows()
                    .map(|r| {
                        q.iter()
                            .zip(r)
                            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[..k].iter().sum::<f64>() / k as f64
            })
            .collect()
    }

    #[test]
    fn symmetric_cross() {
        let reference = FeatureMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let q = FeatureMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            average_knn_distances(&reference, &q, 2, false, false).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn identical_point_has_zero_distance() {
        let reference = FeatureMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let q = FeatureMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(
            average_knn_distances(&reference, &q, 1, false, false).unwrap(),
            vec![0.0]
        );
        assert_eq!(
            average_knn_distances(&reference, &q, 1, false, true).unwrap(),
            vec![5.0]
        );
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = random_features(&mut rng, 200, 16, 3.0);
        let queries = random_features(&mut rng, 50, 16, 3.0);
        let got = average_knn_distances(&reference, &queries, 25, false, false).unwrap();
        let want = pairwise_oracle(&reference, &queries, 25);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-5 * w.abs(), "{g} vs {w}");
        }
    }

    #[test]
    fn k_bounds_and_dims_are_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = random_features(&mut rng, 5, 3, 1.0);
        let q = random_features(&mut rng, 2, 3, 1.0);
        assert!(average_knn_distances(&reference, &q, 6, false, false).is_err());
        assert!(average_knn_distances(&reference, &q, 5, false, true).is_err());
        assert!(average_knn_distances(&reference, &q, 0, false, false).is_err());
        let wrong = random_features(&mut rng, 2, 4, 1.0);
        assert!(matches!(
            average_knn_distances(&reference, &wrong, 1, false, false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalization_projects_to_sphere_and_skips_zero_rows() {
        let reference = FeatureMatrix::from_rows(&[vec![10.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let q = FeatureMatrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
        let d = average_knn_distances(&reference, &q, 1, true, false).unwrap();
        // unit (0,1) is distance 1 from the untouched zero row, sqrt 2 from (1,0)
        assert_eq!(d, vec![1.0]);
        let d = average_knn_distances(&reference, &q, 2, true, false).unwrap();
        assert!((d[0] - (1.0 + 2f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_type7() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&values, 0.99) - 99.01).abs() < 1e-9);
        assert_eq!(quantile(&[5.0], 0.99), 5.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    }

    #[test]
    fn single_validation_sample_threshold() {
        let t = Thresholds::fit(&[5.0], &[0], 2, 0.99, false, 20).unwrap();
        assert_eq!(t.global, 5.0);
    }

    #[test]
    fn defaults_follow_the_method() {
        let cfg = DistanceConfig::default();
        assert_eq!(cfg.k, 25);
        assert_eq!(cfg.quantile, 0.99);
        assert_eq!(cfg.max_ref, 50_000);
        assert_eq!(cfg.min_samples, 20);
        assert!(!cfg.normalize);
    }

    #[test]
    fn validation_coverage_and_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = random_features(&mut rng, 300, 4, 1.0);
        let val = random_features(&mut rng, 200, 4, 1.0);
        let groups = vec![0; 200];
        let checker =
            fit_distance_checker(&train, &val, &groups, 2, &DistanceConfig::default()).unwrap();
        let kept = distance_kept_mask(&checker, &val, &groups).unwrap();
        let frac = kept.iter().filter(|&&k| k).count() as f64 / 200.0;
        assert!((0.99 - 1.0 / 200.0..=1.0).contains(&frac));

        let far_value = (checker.thresholds.global * 10.0 + 10.0) as f32;
        let far = FeatureMatrix::from_rows(&[vec![far_value; 4], train.row(0).to_vec()]).unwrap();
        let mask = distance_kept_mask(&checker, &far, &[0, 0]).unwrap();
        assert_eq!(mask, vec![false, true]);
    }

    #[test]
    fn classwise_thresholds_with_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let train = random_features(&mut rng, 100, 3, 1.0);
        let val = random_features(&mut rng, 60, 3, 1.0);
        let groups: Vec<usize> = (0..60).map(|i| if i < 50 { 0 } else { 1 }).collect();
        let cfg = DistanceConfig {
            k: 5,
            classwise: true,
            ..DistanceConfig::default()
        };
        let checker = fit_distance_checker(&train, &val, &groups, 3, &cfg).unwrap();
        assert_eq!(checker.thresholds.per_class_valid, vec![true, false, false]);
        let per = checker.thresholds.per_class.as_ref().unwrap();
        assert_eq!(per[1], checker.thresholds.global);
        let ad = checker.average_knn_distance(&val).unwrap();
        assert_eq!(per[0], quantile(&ad[..50], 0.99));
    }

    #[test]
    fn subsample_is_seeded_sorted_and_capped() {
        let a = subsample_indices(1000, 100, 7);
        let b = subsample_indices(1000, 100, 7);
        let c = subsample_indices(1000, 100, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_indices(10, 100, 1), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn big_reference_is_independent_of_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train = random_features(&mut rng, 80, 3, 1.0);
        let val = random_features(&mut rng, 30, 3, 1.0);
        let groups = vec![0; 30];
        let fit = |seed| {
            let cfg = DistanceConfig {
                k: 5,
                seed,
                ..DistanceConfig::default()
            };
            fit_distance_checker(&train, &val, &groups, 1, &cfg).unwrap()
        };
        assert_eq!(fit(1), fit(2));
        let capped = |seed| {
            let cfg = DistanceConfig {
                k: 5,
                seed,
                max_ref: 40,
                ..DistanceConfig::default()
            };
            fit_distance_checker(&train, &val, &groups, 1, &cfg).unwrap()
        };
        assert_eq!(capped(1).reference().n(), 40);
        assert_ne!(capped(1).reference(), capped(2).reference());
    }

    #[test]
    fn self_exclude_uses_validation_as_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let val = random_features(&mut rng, 50, 3, 1.0);
        let groups = vec![0; 50];
        let cfg = DistanceConfig {
            k: 3,
            self_exclude: true,
            ..DistanceConfig::default()
        };
        let checker = fit_distance_checker(&val, &val, &groups, 1, &cfg).unwrap();
        let with_self = average_knn_distances(&val, &val, 3, false, false).unwrap();
        let without = average_knn_distances(&val, &val, 3, false, true).unwrap();
        assert_eq!(checker.thresholds.global, quantile(&without, 0.99));
        assert!(with_self.iter().zip(&without).all(|(a, b)| a < b));
    }

    #[test]
    fn checker_sidecar_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let train = random_features(&mut rng, 40, 3, 1.0);
        let val = random_features(&mut rng, 30, 3, 1.0);
        let groups: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let cfg = DistanceConfig {
            k: 4,
            classwise: true,
            min_samples: 10,
            normalize: true,
            ..DistanceConfig::default()
        };
        let checker = fit_distance_checker(&train, &val, &groups, 2, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        checker.save(dir.path()).unwrap();
        let back = DistanceChecker::load(dir.path()).unwrap();
        assert_eq!(back, checker);
        assert_eq!(
            back.average_knn_distance(&val).unwrap(),
            checker.average_knn_distance(&val).unwrap()
        );
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let checker = MahalanobisChecker::from_parts(&[vec![0.0, 0.0]], eye.clone()).unwrap();
        assert_eq!(checker.score_row(&[3.0, 4.0]), 5.0);

        let two = MahalanobisChecker::from_parts(&[vec![0.0, 0.0], vec![10.0, 0.0]], eye).unwrap();
        assert_eq!(two.score_row(&[7.0, 4.0]), 5.0);
    }

    #[test]
    fn mahalanobis_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 3;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            // correlated noise, class offset on the first axis
            rows.push(vec![
                (z[0] + 4.0 * c as f64) as f32,
                (0.8 * z[0] + 0.6 * z[1]) as f32,
                (0.3 * z[1] + 0.5 * z[2]) as f32,
            ]);
            labels.push(c);
        }
        let train = FeatureMatrix::from_rows(&rows).unwrap();
        let val = train.select(&(0..20).collect::<Vec<_>>());
        let checker =
            fit_mahalanobis_checker(&train, &labels, &val, &labels[..20], 2, 0.99, false, 20)
                .unwrap();

        let cov = nalgebra::DMatrix::from_row_slice(d, d, &checker.shared_covariance);
        let inv = cov.try_inverse().unwrap();
        let means = nalgebra::DMatrix::from_row_slice(2, d, &checker.class_means);
        let queries = random_features(&mut rng, 10, d, 5.0);
        let got = checker.scores(&queries).unwrap();
        for (q, g) in queries.rows().zip(&got) {
            let x = nalgebra::DVector::from_iterator(d, q.iter().map(|&v| v as f64));
            let want = (0..2)
                .map(|c| {
                    let r = &x - means.row(c).transpose();
                    (r.transpose() * &inv * &r)[(0, 0)].sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((g - want).abs() <= 1e-6 * want, "{g} vs {want}");
        }
    }

    #[test]
    fn mahalanobis_rank_deficient_needs_ridge() {
        // every point on a line: covariance has rank 1
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 2.0 * i as f32]).collect();
        let train = FeatureMatrix::from_rows(&rows).unwrap();
        let labels = vec![0; 10];
        let checker =
            fit_mahalanobis_checker(&train, &labels, &train, &labels, 2, 0.99, false, 20).unwrap();
        assert!(checker.ridge > 0.0);
        assert!(!checker.class_present[1]);
        assert!(checker
            .scores(&train)
            .unwrap()
            .iter()
            .all(|s| s.is_finite()));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        let l = cholesky(&[4.0, 2.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(l, vec![2.0, 0.0, 1.0, 2f64.sqrt()]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn ad_invariances(seed in 0u64..10_000, k in 1usize..6, shift in -50f32..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference = random_features(&mut rng, 12, 3, 2.0);
            let queries = random_features(&mut rng, 4, 3, 2.0);
            let base = average_knn_distances(&reference, &queries, k, false, false).unwrap();

            let mut perm: Vec<usize> = (0..12).collect();
            perm.reverse();
            perm.swap(0, 5);
            let permuted = average_knn_distances(&reference.select(&perm), &queries, k, false, false).unwrap();
            for (a, b) in base.iter().zip(&permuted) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }

            // integer shifts keep f32 inputs exact
            let s = shift.round();
            let moved = |fm: &FeatureMatrix| FeatureMatrix::new(
                fm.n(), fm.dim(), fm.as_slice().iter().map(|v| v + s).collect()).unwrap();
            let translated = average_knn_distances(&moved(&reference), &moved(&queries), k, false, false).unwrap();
            for (a, b) in base.iter().zip(&translated) {
                proptest::prop_assert!((a - b).abs() < 1e-4 * a.max(1.0));
            }

            let bigger = average_knn_distances(&reference, &queries, k + 1, false, false).unwrap();
            for (a, b) in base.iter().zip(&bigger) {
                proptest::prop_assert!(b >= a);
            }
        }

        #[test]
        fn mahalanobis_affine_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 2;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for i in 0..40 {
                let c = i % 2;
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                rows.push(vec![a + 3.0 * c as f64, 0.5 * a + b]);
                labels.push(c);
            }
            let map = [[2.0, 0.5], [-0.3, 1.5]];
            let offset = [1.0, -4.0];
            let to_fm = |rs: &[Vec<f64>]| FeatureMatrix::from_rows(
                &rs.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect::<Vec<_>>()).unwrap();
            let mapped: Vec<Vec<f64>> = rows.iter().map(|r| {
                (0..d).map(|i| map[i][0] * r[0] + map[i][1] * r[1] + offset[i]).collect()
            }).collect();
            let plain = to_fm(&rows);
            let transformed = to_fm(&mapped);
            let m1 = fit_mahalanobis_checker(&plain, &labels, &plain, &labels, 2, 0.9, false, 20).unwrap();
            let m2 = fit_mahalanobis_checker(&transformed, &labels, &transformed, &labels, 2, 0.9, false, 20).unwrap();
            let s1 = m1.scores(&plain).unwrap();
            let s2 = m2.scores(&transformed).unwrap();
            for (a, b) in s1.iter().zip(&s2) {
                proptest::prop_assert!((a - b).abs() < 1e-4 * a.max(1e-3), "{} vs {}", a, b);
            }
        }
    }
}
