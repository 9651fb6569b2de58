//! Temperature scaling of logits, global and per predicted class, and
//! max-softmax confidences.
//!
//! The temperature is fitted by minimizing the mean negative log-likelihood
//! over `T` in `[0.01, 100]`: a 50-point grid in log-space brackets the
//! minimum, then golden-section search refines it to `1e-4` in `log T`.
//! A flat objective (e.g. all-zero logits) returns `T = 1`.

use serde::{Deserialize, Serialize};

use crate::bundle::{argmax, LabelVector, LogitMatrix};
use crate::error::{Error, Result};

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;
const GRID_POINTS: usize = 50;
const LOG_TOLERANCE: f64 = 1e-4;
const FLAT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub global_t: f64,
    /// Present iff fitted class-wise. Invalid classes hold `global_t`.
    pub per_class_t: Option<Vec<f64>>,
    /// `false` means the class fell back to `global_t`.
    pub per_class_valid: Vec<bool>,
}

impl TemperatureModel {
    pub fn identity(num_classes: usize) -> Self {
        Self::global(1.0, num_classes)
    }

    pub fn global(t: f64, num_classes: usize) -> Self {
        TemperatureModel {
            global_t: t,
            per_class_t: None,
            per_class_valid: vec![false; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class_valid.len()
    }

    pub fn is_classwise(&self) -> bool {
        self.per_class_t.is_some()
    }

    /// Temperature applied to a row whose raw argmax is `pred`.
    pub fn temperature_for(&self, pred: usize) -> f64 {
        match &self.per_class_t {
            Some(ts) if self.per_class_valid[pred] => ts[pred],
            _ => self.global_t,
        }
    }
}

/// Max temperature-scaled softmax probability and raw argmax per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector {
    pub conf: Vec<f64>,
    pub pred: Vec<usize>,
}

impl ConfidenceVector {
    pub fn len(&self) -> usize {
        self.conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conf.is_empty()
    }
}

fn log_sum_exp(row: &[f32], inv_t: f64) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 * inv_t));
    let sum: f64 = row.iter().map(|&v| (v as f64 * inv_t - max).exp()).sum();
    max + sum.ln()
}

/// Mean NLL of `softmax(logits / t)` over the rows in `indices`.
pub fn nll(logits: &LogitMatrix, labels: &[usize], indices: &[usize], t: f64) -> f64 {
    let inv_t = 1.0 / t;
    let total: f64 = indices
        .iter()
        .map(|&i| {
            let row = logits.row(i);
            log_sum_exp(row, inv_t) - row[labels[i]] as f64 * inv_t
        })
        .sum();
    total / indices.len() as f64
}

/// Softmax of `row / t`, stabilized by subtracting the row max.
pub fn softmax_row(row: &[f32], t: f64) -> Vec<f64> {
    let inv_t = 1.0 / t;
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 * inv_t));
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| (v as f64 * inv_t - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn fit_subset(logits: &LogitMatrix, labels: &[usize], indices: &[usize]) -> f64 {
    let objective = |log_t: f64| nll(logits, labels, indices, log_t.exp());
    let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| {
            if i == GRID_POINTS - 1 {
                hi
            } else {
                lo + step * i as f64
            }
        })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();

    let (min_v, max_v) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if max_v - min_v <= FLAT_TOLERANCE * max_v.abs().max(1.0) {
        return 1.0;
    }

    // first grid index attaining the minimum
    let best = values.iter().position(|&v| v == min_v).unwrap();
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(GRID_POINTS - 1)];

    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    while b - a > LOG_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = objective(d);
        }
    }

    // candidates: golden-section midpoint, best grid point (incl. clamps), identity
    let mid = 0.5 * (a + b);
    let mut best_log_t = grid[best];
    let mut best_v = min_v;
    let fm = objective(mid);
    if fm < best_v {
        best_log_t = mid;
        best_v = fm;
    }
    let at_one = objective(0.0);
    if at_one < best_v {
        return 1.0;
    }
    if best_log_t == lo {
        MIN_TEMPERATURE
    } else if best_log_t == hi {
        MAX_TEMPERATURE
    } else {
        best_log_t.exp().clamp(MIN_TEMPERATURE, MAX_TEMPERATURE)
    }
}

fn check_inputs(logits: &LogitMatrix, labels: &LabelVector) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if labels.len() != logits.n() {
        return Err(Error::LengthMismatch {
            what: "calibration logits vs labels",
            left: logits.n(),
            right: labels.len(),
        });
    }
    if let Some(&l) = labels.as_slice().iter().find(|&&l| l >= logits.classes()) {
        return Err(Error::invalid(format!(
            "label {l} out of range for {} classes",
            logits.classes()
        )));
    }
    Ok(())
}

pub fn fit_temperature_global(
    logits: &LogitMatrix,
    labels: &LabelVector,
) -> Result<TemperatureModel> {
    check_inputs(logits, labels)?;
    let all: Vec<usize> = (0..logits.n()).collect();
    let t = fit_subset(logits, labels.as_slice(), &all);
    Ok(TemperatureModel::global(t, logits.classes()))
}

/// Fits one temperature per *predicted* class; classes predicted for fewer
/// than `min_samples` rows use the global temperature.
pub fn fit_temperature_classwise(
    logits: &LogitMatrix,
    labels: &LabelVector,
    min_samples: usize,
) -> Result<TemperatureModel> {
    let global = fit_temperature_global(logits, labels)?;
    let c = logits.classes();
    let mut groups = vec![Vec::new(); c];
    for (i, row) in logits.rows().enumerate() {
        groups[argmax(row)].push(i);
    }
    let mut per_class_t = vec![global.global_t; c];
    let mut valid = vec![false; c];
    for (class, idx) in groups.iter().enumerate() {
        if idx.len() >= min_samples.max(1) {
            per_class_t[class] = fit_subset(logits, labels.as_slice(), idx);
            valid[class] = true;
        }
    }
    Ok(TemperatureModel {
        global_t: global.global_t,
        per_class_t: Some(per_class_t),
        per_class_valid: valid,
    })
}

pub fn confidences(logits: &LogitMatrix, tm: &TemperatureModel) -> Result<ConfidenceVector> {
    if logits.classes() != tm.num_classes() {
        return Err(Error::LengthMismatch {
            what: "logit classes vs temperature model",
            left: logits.classes(),
            right: tm.num_classes(),
        });
    }
    let (conf, pred) = logits
        .rows()
        .map(|row| {
            let p = argmax(row);
            let t = tm.temperature_for(p);
            // max softmax entry is exp(0) / sum at the argmax
            let inv_t = 1.0 / t;
            let max = row[p] as f64 * inv_t;
            let sum: f64 = row.iter().map(|&v| (v as f64 * inv_t - max).exp()).sum();
            (1.0 / sum, p)
        })
        .unzip();
    Ok(ConfidenceVector { conf, pred })
}

/// Full temperature-scaled probability rows, flattened row-major.
pub fn probabilities(logits: &LogitMatrix, tm: &TemperatureModel) -> Result<Vec<f64>> {
    if logits.classes() != tm.num_classes() {
        return Err(Error::LengthMismatch {
            what: "logit classes vs temperature model",
            left: logits.classes(),
            right: tm.num_classes(),
        });
    }
    let mut out = Vec::with_capacity(logits.n() * logits.classes());
    for row in logits.rows() {
        out.extend(softmax_row(row, tm.temperature_for(argmax(row))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_oracle(logits: &LogitMatrix, labels: &[usize], idx: &[usize]) -> (f64, f64) {
        // 1e-4 resolution in log T over [log 0.01, log 100]
        let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
        let steps = ((hi - lo) / 1e-4).ceil() as usize;
        let mut best = (f64::INFINITY, 0.0);
        for s in (0..=steps).step_by(1) {
            let log_t = (lo + s as f64 * 1e-4).min(hi);
            let v = nll(logits, labels, idx, log_t.exp());
            if v < best.0 {
                best = (v, log_t.exp());
            }
        }
        best
    }

    fn random_set(seed: u64, n: usize, c: usize, scale: f32) -> (LogitMatrix, LabelVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * c);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..c);
            for j in 0..c {
                let bump = if j == y { 1.5 } else { 0.0 };
                data.push((rng.random::<f32>() * 2.0 - 1.0 + bump) * scale);
            }
            labels.push(y);
        }
        (
            LogitMatrix::new(n, c, data).unwrap(),
            LabelVector::new(labels, c).unwrap(),
        )
    }

    #[test]
    fn single_confident_sample_clamps_low() {
        let logits = LogitMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let labels = LabelVector::new(vec![0], 2).unwrap();
        let tm = fit_temperature_global(&logits, &labels).unwrap();
        assert_eq!(tm.global_t, 0.01);
    }

    #[test]
    fn huge_correct_margins_clamp_low() {
        let rows: Vec<Vec<f32>> = (0..20)
            .map(|i| {
                if i % 2 == 0 {
                    vec![10.0, 0.0, 0.0]
                } else {
                    vec![0.0, 0.0, 10.0]
                }
            })
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| if i % 2 == 0 { 0 } else { 2 }).collect();
        let logits = LogitMatrix::from_rows(&rows).unwrap();
        let labels = LabelVector::new(labels, 3).unwrap();
        let tm = fit_temperature_global(&logits, &labels).unwrap();
        assert_eq!(tm.global_t, 0.01);
        let all: Vec<usize> = (0..20).collect();
        let (oracle_v, oracle_t) = grid_oracle(&logits, labels.as_slice(), &all);
        assert!((oracle_t - 0.01).abs() < 1e-6);
        assert!(nll(&logits, labels.as_slice(), &all, tm.global_t) <= oracle_v + 1e-12);
    }

    #[test]
    fn flat_objective_returns_identity() {
        let logits = LogitMatrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let labels = LabelVector::new(vec![1, 2], 3).unwrap();
        assert_eq!(
            fit_temperature_global(&logits, &labels).unwrap().global_t,
            1.0
        );
    }

    #[test]
    fn matches_fine_grid_oracle() {
        for seed in 0..4 {
            let (logits, labels) = random_set(seed, 200, 4, 3.0);
            let tm = fit_temperature_global(&logits, &labels).unwrap();
            let all: Vec<usize> = (0..200).collect();
            let (oracle_v, oracle_t) = grid_oracle(&logits, labels.as_slice(), &all);
            let v = nll(&logits, labels.as_slice(), &all, tm.global_t);
            assert!(v <= oracle_v + 1e-9, "seed {seed}: {v} vs {oracle_v}");
            assert!((tm.global_t.ln() - oracle_t.ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn classwise_falls_back_for_small_groups() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..55 {
            let class = usize::from(i >= 50);
            let margin = 1.0 + rng.random::<f32>() * 3.0;
            let mut row = vec![0.0f32; 2];
            row[class] = margin;
            rows.push(row);
            labels.push(if rng.random::<f32>() < 0.8 {
                class
            } else {
                1 - class
            });
        }
        let logits = LogitMatrix::from_rows(&rows).unwrap();
        let labels = LabelVector::new(labels, 2).unwrap();
        let tm = fit_temperature_classwise(&logits, &labels, 20).unwrap();
        assert_eq!(tm.per_class_valid, vec![true, false]);
        let per = tm.per_class_t.as_ref().unwrap();
        assert_eq!(per[1], tm.global_t);
        assert_eq!(tm.temperature_for(1), tm.global_t);

        let idx0: Vec<usize> = (0..50).collect();
        let (_, oracle_t) = grid_oracle(&logits, labels.as_slice(), &idx0);
        assert!((per[0].ln() - oracle_t.ln()).abs() < 1e-3);
    }

    #[test]
    fn classwise_no_fallback_when_groups_are_large() {
        let (logits, labels) = random_set(5, 300, 3, 2.0);
        let tm = fit_temperature_classwise(&logits, &labels, 20).unwrap();
        assert!(tm.per_class_valid.iter().all(|&v| v));
    }

    #[test]
    fn identical_class_distributions_share_temperature() {
        // each class block is the same sample set with its columns rotated
        let (base, base_labels) = random_set(11, 400, 3, 2.5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for shift in 0..3 {
            for (i, row) in base.rows().enumerate() {
                let p = argmax(row);
                if p != 0 {
                    continue;
                }
                let rotated: Vec<f32> = (0..3).map(|j| row[(j + 3 - shift) % 3]).collect();
                rows.push(rotated);
                labels.push((base_labels.as_slice()[i] + shift) % 3);
            }
        }
        let logits = LogitMatrix::from_rows(&rows).unwrap();
        let labels = LabelVector::new(labels, 3).unwrap();
        let tm = fit_temperature_classwise(&logits, &labels, 20).unwrap();
        for &t in tm.per_class_t.as_ref().unwrap() {
            assert!((t - tm.global_t).abs() < 1e-3, "{t} vs {}", tm.global_t);
        }
    }

    #[test]
    fn confidence_example_values() {
        let logits = LogitMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let cv = confidences(&logits, &TemperatureModel::identity(2)).unwrap();
        let e2 = 2f64.exp();
        assert!((cv.conf[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((cv.conf[0] - 0.8808).abs() < 1e-4);
        assert_eq!(cv.pred, vec![0, 0]);
        for t in [0.01, 0.5, 7.0] {
            let cv = confidences(&logits, &TemperatureModel::global(t, 2)).unwrap();
            assert_eq!(cv.conf[1], 0.5);
        }
    }

    #[test]
    fn class_count_mismatch_is_error() {
        let logits = LogitMatrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(confidences(&logits, &TemperatureModel::identity(3)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn argmax_invariant_under_temperature(
            rows in proptest::collection::vec(proptest::collection::vec(-20f32..20.0, 3), 1..20),
            t in 0.01f64..100.0,
        ) {
            let logits = LogitMatrix::from_rows(&rows).unwrap();
            let a = confidences(&logits, &TemperatureModel::identity(3)).unwrap();
            let b = confidences(&logits, &TemperatureModel::global(t, 3)).unwrap();
            proptest::prop_assert_eq!(&a.pred, &b.pred);
            let probs = probabilities(&logits, &TemperatureModel::global(t, 3)).unwrap();
            for (i, p) in probs.chunks(3).enumerate() {
                let s: f64 = p.iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-6);
                let best = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                proptest::prop_assert_eq!(best, p[b.pred[i]]);
                proptest::prop_assert!((best - b.conf[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn fitted_t_beats_identity(seed in 0u64..500, n in 1usize..60) {
            let (logits, labels) = random_set(seed, n, 3, 4.0);
            let tm = fit_temperature_global(&logits, &labels).unwrap();
            let all: Vec<usize> = (0..n).collect();
            let fitted = nll(&logits, labels.as_slice(), &all, tm.global_t);
            let one = nll(&logits, labels.as_slice(), &all, 1.0);
            proptest::prop_assert!(fitted <= one + 1e-9);
            proptest::prop_assert!((MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&tm.global_t));
            let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
            for i in 0..50 {
                let t = (lo + (hi - lo) * i as f64 / 49.0).exp();
                proptest::prop_assert!(fitted <= nll(&logits, labels.as_slice(), &all, t) + 1e-9);
            }
        }
    }
}
