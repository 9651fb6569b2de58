//! Estimators that intersect a confidence or agreement mask with a distance
//! mask: ATC-Dist, ATC-DistCS, ATC-Maha, GDE, GDE-Dist and GDE-DistCS.
//!
//! The estimate is the fraction of test samples passing both checks, so a
//! distance-checked estimate never exceeds its base estimator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::FeatureMatrix;
use crate::calibration::ConfidenceVector;
use crate::confidence::{atc_kept_mask, AtcModel};
use crate::distance::DistanceMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Atc,
    AtcDist,
    #[serde(rename = "atc-distcs")]
    AtcDistCs,
    AtcMaha,
    Doc,
    Cot,
    Gde,
    GdeDist,
    #[serde(rename = "gde-distcs")]
    GdeDistCs,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Atc,
        Method::AtcDist,
        Method::AtcDistCs,
        Method::AtcMaha,
        Method::Doc,
        Method::Cot,
        Method::Gde,
        Method::GdeDist,
        Method::GdeDistCs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Atc => "atc",
            Method::AtcDist => "atc-dist",
            Method::AtcDistCs => "atc-distcs",
            Method::AtcMaha => "atc-maha",
            Method::Doc => "doc",
            Method::Cot => "cot",
            Method::Gde => "gde",
            Method::GdeDist => "gde-dist",
            Method::GdeDistCs => "gde-distcs",
        }
    }

    /// Agreement-based methods need a sibling model's predictions.
    pub fn needs_sibling(self) -> bool {
        matches!(self, Method::Gde | Method::GdeDist | Method::GdeDistCs)
    }

    /// Methods whose distance thresholds are fitted per class.
    pub fn classwise_distance(self) -> bool {
        matches!(
            self,
            Method::AtcDistCs | Method::AtcMaha | Method::GdeDistCs
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Fitted parameters echoed into every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantile: Option<f64>,
    pub classwise_calibration: bool,
    pub classwise_distance: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_temperature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub accuracy_estimate: f64,
    pub n_test: usize,
    /// Fraction passing the confidence check (agreement check for GDE).
    pub kept_confidence_fraction: Option<f64>,
    pub kept_distance_fraction: Option<f64>,
    pub kept_joint_fraction: Option<f64>,
    pub config: ConfigEcho,
}

/// Counts of a two-mask intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskCounts {
    pub n: usize,
    pub first: usize,
    pub second: usize,
    pub joint: usize,
}

impl MaskCounts {
    pub fn fraction(count: usize, n: usize) -> f64 {
        count as f64 / n as f64
    }
}

pub fn intersect(first: &[bool], second: &[bool]) -> Result<MaskCounts> {
    if first.len() != second.len() {
        return Err(Error::LengthMismatch {
            what: "masks",
            left: first.len(),
            right: second.len(),
        });
    }
    if first.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut counts = MaskCounts {
        n: first.len(),
        first: 0,
        second: 0,
        joint: 0,
    };
    for (&a, &b) in first.iter().zip(second) {
        counts.first += usize::from(a);
        counts.second += usize::from(b);
        counts.joint += usize::from(a && b);
    }
    Ok(counts)
}

fn masked_report(method: Method, counts: MaskCounts, config: ConfigEcho) -> EstimateReport {
    let f = |c| MaskCounts::fraction(c, counts.n);
    EstimateReport {
        method,
        accuracy_estimate: f(counts.joint),
        n_test: counts.n,
        kept_confidence_fraction: Some(f(counts.first)),
        kept_distance_fraction: Some(f(counts.second)),
        kept_joint_fraction: Some(f(counts.joint)),
        config,
    }
}

fn atc_echo(atc: &AtcModel) -> ConfigEcho {
    ConfigEcho {
        classwise_calibration: atc.is_classwise(),
        global_temperature: Some(atc.temperature.global_t),
        per_class_temperature: atc.temperature.per_class_t.clone(),
        ..ConfigEcho::default()
    }
}

/// Plain ATC as a report; the distance side is the all-true mask.
pub fn atc_report(test_conf: &ConfidenceVector, atc: &AtcModel) -> Result<EstimateReport> {
    let conf_mask = atc_kept_mask(test_conf, atc)?;
    let all = vec![true; conf_mask.len()];
    Ok(masked_report(
        Method::Atc,
        intersect(&conf_mask, &all)?,
        atc_echo(atc),
    ))
}

/// ATC confidence check intersected with a distance check. `method` tags
/// the report (ATC-Dist, ATC-DistCS or ATC-Maha).
pub fn atc_dist_estimate(
    method: Method,
    test_conf: &ConfidenceVector,
    atc: &AtcModel,
    checker: &dyn DistanceMask,
    test_features: &FeatureMatrix,
) -> Result<EstimateReport> {
    if test_features.n() != test_conf.len() {
        return Err(Error::LengthMismatch {
            what: "test features vs confidences",
            left: test_features.n(),
            right: test_conf.len(),
        });
    }
    if checker.thresholds().per_class_valid.len() != atc.per_class_valid.len() {
        return Err(Error::LengthMismatch {
            what: "distance checker classes vs ATC classes",
            left: checker.thresholds().per_class_valid.len(),
            right: atc.per_class_valid.len(),
        });
    }
    let conf_mask = atc_kept_mask(test_conf, atc)?;
    let dist_mask = checker.kept_mask(test_features, &test_conf.pred)?;
    let mut echo = atc_echo(atc);
    echo.quantile = Some(checker.thresholds().quantile);
    echo.classwise_distance = checker.thresholds().is_classwise();
    Ok(masked_report(
        method,
        intersect(&conf_mask, &dist_mask)?,
        echo,
    ))
}

pub fn agreement_mask(pred_a: &[usize], pred_b: &[usize]) -> Result<Vec<bool>> {
    if pred_a.len() != pred_b.len() {
        return Err(Error::LengthMismatch {
            what: "sibling predictions",
            left: pred_a.len(),
            right: pred_b.len(),
        });
    }
    if pred_a.is_empty() {
        return Err(Error::Empty("test set"));
    }
    Ok(pred_a.iter().zip(pred_b).map(|(a, b)| a == b).collect())
}

/// Agreement rate between two sibling models.
pub fn gde_estimate(pred_a: &[usize], pred_b: &[usize]) -> Result<EstimateReport> {
    let agree = agreement_mask(pred_a, pred_b)?;
    let all = vec![true; agree.len()];
    Ok(masked_report(
        Method::Gde,
        intersect(&agree, &all)?,
        ConfigEcho::default(),
    ))
}

/// Agreement intersected with the distance check of the first model's
/// embedding space. Class-wise thresholds are looked up by `pred_a`.
pub fn gde_dist_estimate(
    method: Method,
    pred_a: &[usize],
    pred_b: &[usize],
    checker: &dyn DistanceMask,
    test_features: &FeatureMatrix,
) -> Result<EstimateReport> {
    let agree = agreement_mask(pred_a, pred_b)?;
    if test_features.n() != pred_a.len() {
        return Err(Error::LengthMismatch {
            what: "test features vs predictions",
            left: test_features.n(),
            right: pred_a.len(),
        });
    }
    let dist_mask = checker.kept_mask(test_features, pred_a)?;
    let echo = ConfigEcho {
        quantile: Some(checker.thresholds().quantile),
        classwise_distance: checker.thresholds().is_classwise(),
        ..ConfigEcho::default()
    };
    Ok(masked_report(method, intersect(&agree, &dist_mask)?, echo))
}
