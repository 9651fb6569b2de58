//! Runs each estimator end to end on a bundle.
//!
//! [`Estimator`] fits temperature scaling, ATC and the K-NN checker lazily,
//! once per bundle, and reuses them across methods. The K-NN checker is
//! always fitted with per-class thresholds; global methods use only its
//! global threshold.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::bundle::SplitBundle;
use crate::calibration::{self, TemperatureModel};
use crate::combined::{self, ConfigEcho, EstimateReport, Method};
use crate::confidence::{self, AtcModel};
use crate::distance::{
    self, DistanceChecker, DistanceConfig, MahalanobisChecker, DEFAULT_K, DEFAULT_MAX_REF,
    DEFAULT_MIN_SAMPLES, DEFAULT_QUANTILE,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::ot::{self, CotConfig};

pub const ATC_SIDECAR: &str = "atc.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub k: usize,
    pub quantile: f64,
    /// Class-wise temperature scaling and ATC thresholds.
    pub classwise: bool,
    pub normalize: bool,
    pub max_ref: usize,
    pub min_samples: usize,
    pub seed: u64,
    pub self_exclude: bool,
    pub cot: CotConfig,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            k: DEFAULT_K,
            quantile: DEFAULT_QUANTILE,
            classwise: false,
            normalize: false,
            max_ref: DEFAULT_MAX_REF,
            min_samples: DEFAULT_MIN_SAMPLES,
            seed: 0,
            self_exclude: false,
            cot: CotConfig::default(),
        }
    }
}

impl EstimateConfig {
    fn distance(&self) -> DistanceConfig {
        DistanceConfig {
            k: self.k,
            quantile: self.quantile,
            classwise: true,
            min_samples: self.min_samples,
            max_ref: self.max_ref,
            seed: self.seed,
            normalize: self.normalize,
            self_exclude: self.self_exclude,
        }
    }
}

/// Serialized ATC state written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AtcSidecar {
    atc: AtcModel,
    config: EstimateConfig,
}

pub struct Estimator<'a> {
    bundle: &'a SplitBundle,
    cfg: EstimateConfig,
    atc: OnceLock<AtcModel>,
    checker: OnceLock<DistanceChecker>,
}

impl<'a> Estimator<'a> {
    pub fn new(bundle: &'a SplitBundle, cfg: EstimateConfig) -> Self {
        Estimator {
            bundle,
            cfg,
            atc: OnceLock::new(),
            checker: OnceLock::new(),
        }
    }

    /// Estimator over previously fitted state from [`Estimator::save`].
    pub fn load(bundle: &'a SplitBundle, dir: &Path) -> Result<Self> {
        let path = dir.join(ATC_SIDECAR);
        if !path.exists() {
            return Err(Error::MissingFile {
                file: path.display().to_string(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: AtcSidecar = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            file: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let checker = DistanceChecker::load(dir)?;
        let c = bundle.manifest.num_classes;
        if sidecar.atc.per_class_valid.len() != c || checker.thresholds.per_class_valid.len() != c {
            return Err(Error::invalid(format!(
                "fitted state in {} does not match the bundle's {c} classes",
                dir.display()
            )));
        }
        if checker.reference().dim() != bundle.manifest.dim {
            return Err(Error::DimensionMismatch {
                file: dir.join(distance::CHECKER_REFERENCE).display().to_string(),
                expected: bundle.manifest.dim,
                found: checker.reference().dim(),
            });
        }
        let cfg = EstimateConfig {
            k: checker.k,
            normalize: checker.normalize,
            self_exclude: checker.self_exclude,
            quantile: checker.thresholds.quantile,
            classwise: sidecar.atc.is_classwise(),
            ..sidecar.config
        };
        let est = Estimator::new(bundle, cfg);
        est.atc.set(sidecar.atc).expect("fresh cell");
        est.checker.set(checker).expect("fresh cell");
        Ok(est)
    }

    pub fn config(&self) -> &EstimateConfig {
        &self.cfg
    }

    /// Fits everything `fit` serializes and writes it to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fsutil::create_dir(dir)?;
        self.checker()?.save(dir)?;
        let sidecar = AtcSidecar {
            atc: self.atc()?.clone(),
            config: self.cfg,
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fsutil::write_atomic(&dir.join(ATC_SIDECAR), text.as_bytes())
    }

    pub fn atc(&self) -> Result<&AtcModel> {
        if let Some(m) = self.atc.get() {
            return Ok(m);
        }
        let val = &self.bundle.val;
        let tm = if self.cfg.classwise {
            calibration::fit_temperature_classwise(&val.logits, &val.labels, self.cfg.min_samples)?
        } else {
            calibration::fit_temperature_global(&val.logits, &val.labels)?
        };
        let conf = calibration::confidences(&val.logits, &tm)?;
        let model = confidence::fit_atc(
            &conf,
            &val.labels,
            &tm,
            self.cfg.classwise,
            self.cfg.min_samples,
        )?;
        Ok(self.atc.get_or_init(|| model))
    }

    pub fn temperature(&self) -> Result<&TemperatureModel> {
        Ok(&self.atc()?.temperature)
    }

    /// K-NN checker on the training features, thresholds grouped by
    /// validation label.
    pub fn checker(&self) -> Result<&DistanceChecker> {
        if let Some(c) = self.checker.get() {
            return Ok(c);
        }
        let b = self.bundle;
        let checker = distance::fit_distance_checker(
            &b.train.features,
            &b.val.features,
            b.val.labels.as_slice(),
            b.manifest.num_classes,
            &self.cfg.distance(),
        )?;
        Ok(self.checker.get_or_init(|| checker))
    }

    fn checker_for(&self, classwise: bool) -> Result<DistanceChecker> {
        let mut checker = self.checker()?.clone();
        if !classwise {
            checker.thresholds = checker.thresholds.global_only();
        }
        Ok(checker)
    }

    fn mahalanobis(&self) -> Result<MahalanobisChecker> {
        let b = self.bundle;
        distance::fit_mahalanobis_checker(
            &b.train.features,
            b.train.labels.as_slice(),
            &b.val.features,
            b.val.labels.as_slice(),
            b.manifest.num_classes,
            self.cfg.quantile,
            true,
            self.cfg.min_samples,
        )
    }

    fn calibration_echo(&self) -> Result<ConfigEcho> {
        let atc = self.atc()?;
        Ok(ConfigEcho {
            classwise_calibration: atc.is_classwise(),
            global_temperature: Some(atc.temperature.global_t),
            per_class_temperature: atc.temperature.per_class_t.clone(),
            ..ConfigEcho::default()
        })
    }

    fn knn_echo(&self, mut report: EstimateReport) -> EstimateReport {
        report.config.k = Some(self.checker.get().map_or(self.cfg.k, |c| c.k));
        report.config.normalize = Some(
            self.checker
                .get()
                .map_or(self.cfg.normalize, |c| c.normalize),
        );
        report
    }

    /// Runs `method`. GDE methods need the sibling bundle `other`, which
    /// must share this bundle's test split.
    pub fn run(&self, method: Method, other: Option<&SplitBundle>) -> Result<EstimateReport> {
        let b = self.bundle;
        let sibling = || -> Result<&SplitBundle> {
            let o =
                other.ok_or_else(|| Error::invalid(format!("{method} needs a second bundle")))?;
            if o.manifest.num_classes != b.manifest.num_classes {
                return Err(Error::LengthMismatch {
                    what: "classes of the two bundles",
                    left: b.manifest.num_classes,
                    right: o.manifest.num_classes,
                });
            }
            if o.test.logits.n() != b.test.logits.n() {
                return Err(Error::LengthMismatch {
                    what: "test sizes of the two bundles",
                    left: b.test.logits.n(),
                    right: o.test.logits.n(),
                });
            }
            Ok(o)
        };
        let test_conf = || -> Result<calibration::ConfidenceVector> {
            calibration::confidences(&b.test.logits, self.temperature()?)
        };

        match method {
            Method::Atc => combined::atc_report(&test_conf()?, self.atc()?),
            Method::AtcDist | Method::AtcDistCs => {
                let checker = self.checker_for(method.classwise_distance())?;
                let r = combined::atc_dist_estimate(
                    method,
                    &test_conf()?,
                    self.atc()?,
                    &checker,
                    &b.test.features,
                )?;
                Ok(self.knn_echo(r))
            }
            Method::AtcMaha => {
                let checker = self.mahalanobis()?;
                combined::atc_dist_estimate(
                    method,
                    &test_conf()?,
                    self.atc()?,
                    &checker,
                    &b.test.features,
                )
            }
            Method::Doc => {
                let tm = self.temperature()?;
                let val_conf = calibration::confidences(&b.val.logits, tm)?;
                let estimate = confidence::doc_estimate(&val_conf, &b.val.labels, &test_conf()?)?;
                Ok(plain_report(
                    method,
                    estimate,
                    b.test.logits.n(),
                    self.calibration_echo()?,
                ))
            }
            Method::Cot => {
                let probs = calibration::probabilities(&b.test.logits, self.temperature()?)?;
                let estimate = ot::cot_estimate(
                    b.val.labels.as_slice(),
                    &probs,
                    b.manifest.num_classes,
                    &self.cfg.cot,
                )?;
                Ok(plain_report(
                    method,
                    estimate,
                    b.test.logits.n(),
                    self.calibration_echo()?,
                ))
            }
            Method::Gde => {
                combined::gde_estimate(&b.test.logits.argmax(), &sibling()?.test.logits.argmax())
            }
            Method::GdeDist | Method::GdeDistCs => {
                let pred_b = sibling()?.test.logits.argmax();
                let checker = self.checker_for(method.classwise_distance())?;
                let r = combined::gde_dist_estimate(
                    method,
                    &b.test.logits.argmax(),
                    &pred_b,
                    &checker,
                    &b.test.features,
                )?;
                Ok(self.knn_echo(r))
            }
        }
    }
}

fn plain_report(method: Method, estimate: f64, n: usize, config: ConfigEcho) -> EstimateReport {
    EstimateReport {
        method,
        accuracy_estimate: estimate,
        n_test: n,
        kept_confidence_fraction: None,
        kept_distance_fraction: None,
        kept_joint_fraction: None,
        config,
    }
}

/// One-shot estimate; fits whatever `method` needs.
pub fn estimate(
    bundle: &SplitBundle,
    other: Option<&SplitBundle>,
    method: Method,
    cfg: &EstimateConfig,
) -> Result<EstimateReport> {
    Estimator::new(bundle, *cfg).run(method, other)
}
