//! Confidence-based estimators: Average Thresholded Confidence (ATC) and
//! Difference of Confidence (DoC).

use serde::{Deserialize, Serialize};

use crate::bundle::LabelVector;
use crate::calibration::{ConfidenceVector, TemperatureModel};
use crate::error::{Error, Result};

/// Fitted ATC thresholds. A test sample counts as correct when its
/// confidence is strictly above the threshold of its predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtcModel {
    pub global_threshold: f64,
    pub per_class_threshold: Option<Vec<f64>>,
    pub per_class_valid: Vec<bool>,
    pub temperature: TemperatureModel,
}

impl AtcModel {
    pub fn threshold_for(&self, pred: usize) -> f64 {
        match &self.per_class_threshold {
            Some(ts) if self.per_class_valid[pred] => ts[pred],
            _ => self.global_threshold,
        }
    }

    pub fn is_classwise(&self) -> bool {
        self.per_class_threshold.is_some()
    }
}

/// The `k`-th smallest confidence with `k = round(err * n)`; `0.0` when
/// `k = 0`, which every confidence exceeds.
fn order_statistic_threshold(conf: &mut [f64], wrong: usize) -> f64 {
    let n = conf.len();
    let err = wrong as f64 / n as f64;
    let k = (err * n as f64).round() as usize;
    if k == 0 {
        return 0.0;
    }
    conf.sort_by(f64::total_cmp);
    conf[k - 1]
}

fn check_pair(conf: &ConfidenceVector, labels: &LabelVector) -> Result<()> {
    if conf.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if conf.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "validation confidences vs labels",
            left: conf.len(),
            right: labels.len(),
        });
    }
    Ok(())
}

/// Fits ATC on temperature-scaled validation confidences. In class-wise
/// mode each predicted class with at least `min_samples` members gets its
/// own threshold; the rest use the global one.
pub fn fit_atc(
    val_conf: &ConfidenceVector,
    val_labels: &LabelVector,
    temperature: &TemperatureModel,
    classwise: bool,
    min_samples: usize,
) -> Result<AtcModel> {
    check_pair(val_conf, val_labels)?;
    let c = temperature.num_classes();
    let labels = val_labels.as_slice();
    let wrong = val_conf
        .pred
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    let global_threshold = order_statistic_threshold(&mut val_conf.conf.clone(), wrong);

    let (per_class_threshold, per_class_valid) = if classwise {
        let mut groups: Vec<(Vec<f64>, usize)> = vec![(Vec::new(), 0); c];
        for ((&conf, &pred), &label) in val_conf.conf.iter().zip(&val_conf.pred).zip(labels) {
            let g = &mut groups[pred];
            g.0.push(conf);
            g.1 += usize::from(pred != label);
        }
        let mut thresholds = vec![global_threshold; c];
        let mut valid = vec![false; c];
        for (class, (mut confs, wrong)) in groups.into_iter().enumerate() {
            if !confs.is_empty() && confs.len() >= min_samples {
                thresholds[class] = order_statistic_threshold(&mut confs, wrong);
                valid[class] = true;
            }
        }
        (Some(thresholds), valid)
    } else {
        (None, vec![false; c])
    };

    Ok(AtcModel {
        global_threshold,
        per_class_threshold,
        per_class_valid,
        temperature: temperature.clone(),
    })
}

/// Kept mask `conf_i > threshold(pred_i)`.
pub fn atc_kept_mask(test_conf: &ConfidenceVector, model: &AtcModel) -> Result<Vec<bool>> {
    if test_conf.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if let Some(&p) = test_conf
        .pred
        .iter()
        .find(|&&p| p >= model.per_class_valid.len())
    {
        return Err(Error::invalid(format!(
            "predicted class {p} outside the {} classes of the ATC model",
            model.per_class_valid.len()
        )));
    }
    Ok(test_conf
        .conf
        .iter()
        .zip(&test_conf.pred)
        .map(|(&c, &p)| c > model.threshold_for(p))
        .collect())
}

/// ATC accuracy estimate together with the kept mask.
pub fn atc_estimate(test_conf: &ConfidenceVector, model: &AtcModel) -> Result<(f64, Vec<bool>)> {
    let mask = atc_kept_mask(test_conf, model)?;
    let kept = mask.iter().filter(|&&k| k).count();
    Ok((kept as f64 / mask.len() as f64, mask))
}

/// `acc_val - (mean val confidence - mean test confidence)`, clamped to `[0, 1]`.
pub fn doc_estimate(
    val_conf: &ConfidenceVector,
    val_labels: &LabelVector,
    test_conf: &ConfidenceVector,
) -> Result<f64> {
    check_pair(val_conf, val_labels)?;
    if test_conf.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let correct = val_conf
        .pred
        .iter()
        .zip(val_labels.as_slice())
        .filter(|(p, l)| p == l)
        .count();
    let acc_val = correct as f64 / val_conf.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let raw = acc_val - (mean(&val_conf.conf) - mean(&test_conf.conf));
    Ok(raw.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cv(conf: &[f64], pred: &[usize]) -> ConfidenceVector {
        ConfidenceVector {
            conf: conf.to_vec(),
            pred: pred.to_vec(),
        }
    }

    /// Sort-and-count oracle: smallest t with #{conf <= t} = #wrong.
    fn oracle_threshold(conf: &[f64], correct: &[bool]) -> f64 {
        let wrong = correct.iter().filter(|&&c| !c).count();
        if wrong == 0 {
            return 0.0;
        }
        let mut sorted = conf.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[wrong - 1]
    }

    #[test]
    fn worked_example() {
        let conf = [0.2, 0.4, 0.6, 0.8, 1.0];
        // pred 0 everywhere; first two are wrong
        let val = cv(&conf, &[0; 5]);
        let labels = LabelVector::new(vec![1, 1, 0, 0, 0], 2).unwrap();
        let model = fit_atc(&val, &labels, &TemperatureModel::identity(2), false, 20).unwrap();
        assert_eq!(model.global_threshold, 0.4);
        assert_eq!(
            model.global_threshold,
            oracle_threshold(&conf, &[false, false, true, true, true])
        );
        let test = cv(&[0.3, 0.5, 0.9], &[0; 3]);
        let (est, mask) = atc_estimate(&test, &model).unwrap();
        assert_eq!(mask, vec![false, true, true]);
        assert!((est - 2.0 / 3.0).abs() < 1e-12);
        assert!((est - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn perfect_validation_keeps_everything() {
        let val = cv(&[0.6, 0.7, 0.9], &[0, 1, 0]);
        let labels = LabelVector::new(vec![0, 1, 0], 2).unwrap();
        let model = fit_atc(&val, &labels, &TemperatureModel::identity(2), false, 20).unwrap();
        let test = cv(&[0.5, 0.51, 0.99], &[1, 0, 1]);
        assert_eq!(atc_estimate(&test, &model).unwrap().0, 1.0);
    }

    #[test]
    fn strict_inequality_on_ties() {
        let val = cv(&[0.5, 0.5, 0.9, 0.9], &[0; 4]);
        let labels = LabelVector::new(vec![1, 0, 0, 0], 2).unwrap();
        let model = fit_atc(&val, &labels, &TemperatureModel::identity(2), false, 1).unwrap();
        assert_eq!(model.global_threshold, 0.5);
        let (_, mask) = atc_estimate(&cv(&[0.5, 0.50001], &[0, 0]), &model).unwrap();
        assert_eq!(mask, vec![false, true]);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let model = AtcModel {
            global_threshold: 0.5,
            per_class_threshold: None,
            per_class_valid: vec![false; 2],
            temperature: TemperatureModel::identity(2),
        };
        assert!(matches!(
            atc_estimate(&cv(&[], &[]), &model),
            Err(Error::Empty("test set"))
        ));
        let labels = LabelVector::new(vec![], 2).unwrap();
        assert!(fit_atc(
            &cv(&[], &[]),
            &labels,
            &TemperatureModel::identity(2),
            false,
            20
        )
        .is_err());
        assert!(doc_estimate(&cv(&[], &[]), &labels, &cv(&[0.5], &[0])).is_err());
    }

    #[test]
    fn doc_examples() {
        // acc 0.9 over 10, mean val conf 0.85, mean test 0.75
        let val = cv(&[0.85; 10], &[0; 10]);
        let labels = LabelVector::new(vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1], 2).unwrap();
        let test = cv(&[0.75; 4], &[0; 4]);
        assert!((doc_estimate(&val, &labels, &test).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(doc_estimate(&val, &labels, &val).unwrap(), 0.9);

        let val = cv(&[0.99, 0.99], &[0, 0]);
        let labels = LabelVector::new(vec![0, 1], 2).unwrap();
        let test = cv(&[0.1, 0.1], &[0, 1]);
        assert_eq!(doc_estimate(&val, &labels, &test).unwrap(), 0.0);
    }

    #[test]
    fn classwise_thresholds_per_predicted_class() {
        let mut conf = Vec::new();
        let mut pred = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            conf.push(0.5 + i as f64 / 100.0);
            pred.push(0);
            labels.push(if i < 6 { 1 } else { 0 });
        }
        for i in 0..25 {
            conf.push(0.6 + i as f64 / 100.0);
            pred.push(1);
            labels.push(if i < 10 { 0 } else { 1 });
        }
        for i in 0..5 {
            conf.push(0.9 + i as f64 / 100.0);
            pred.push(2);
            labels.push(2);
        }
        let val = cv(&conf, &pred);
        let labels = LabelVector::new(labels, 3).unwrap();
        let model = fit_atc(&val, &labels, &TemperatureModel::identity(3), true, 20).unwrap();
        assert_eq!(model.per_class_valid, vec![true, true, false]);
        let per = model.per_class_threshold.as_ref().unwrap();
        assert!((per[0] - 0.55).abs() < 1e-12);
        assert!((per[1] - 0.69).abs() < 1e-12);
        assert_eq!(per[2], model.global_threshold);
    }

    proptest::proptest! {
        #[test]
        fn self_consistency(seed in 0u64..10_000, n in 1usize..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conf: Vec<f64> = (0..n).map(|_| 0.34 + 0.66 * rng.random::<f64>()).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let labels: Vec<usize> = pred.iter().zip(&conf)
                .map(|(&p, &c)| if rng.random::<f64>() < c { p } else { (p + 1) % 3 })
                .collect();
            let acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
            let val = cv(&conf, &pred);
            let labels = LabelVector::new(labels, 3).unwrap();
            let model = fit_atc(&val, &labels, &TemperatureModel::identity(3), false, 20).unwrap();
            let (est, _) = atc_estimate(&val, &model).unwrap();
            proptest::prop_assert!((est - acc).abs() <= 1.0 / n as f64 + 1e-12);
        }

        #[test]
        fn monotone_in_threshold(
            conf in proptest::collection::vec(0.0f64..1.0, 1..50),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let n = conf.len();
            let test = cv(&conf, &vec![0; n]);
            let model = |t| AtcModel {
                global_threshold: t,
                per_class_threshold: None,
                per_class_valid: vec![false; 2],
                temperature: TemperatureModel::identity(2),
            };
            let a = atc_estimate(&test, &model(lo)).unwrap().0;
            let b = atc_estimate(&test, &model(hi)).unwrap().0;
            proptest::prop_assert!(b <= a);
        }

        #[test]
        fn classwise_all_invalid_matches_global(seed in 0u64..1000, n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conf: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let val = cv(&conf, &pred);
            let labels = LabelVector::new(labels, 4).unwrap();
            let tm = TemperatureModel::identity(4);
            let global = fit_atc(&val, &labels, &tm, false, 20).unwrap();
            let cw = fit_atc(&val, &labels, &tm, true, n + 1).unwrap();
            let a = atc_estimate(&val, &global).unwrap();
            let b = atc_estimate(&val, &cw).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
