//! Synthetic covariate-shift scenarios with a known scorer and exact labels.
//!
//! Classes are isotropic Gaussian clusters; the features are the raw
//! coordinates and the logits come from `z_c = -|x - mu_c|^2 / (2 s^2)`.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    argmax, FeatureMatrix, LabelVector, LogitMatrix, Manifest, SplitBundle, TestSplit, TrainSplit,
    ValSplit,
};
use crate::error::{Error, Result};

/// Offset of the sibling scorer's class means, in units of `class_scale`.
pub const SIBLING_JITTER: f64 = 0.25;
pub const PRESETS: [&str; 4] = ["identity", "mild-shift", "unseen-cluster", "prior-shift"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shift {
    Identity,
    Translation {
        vector: Vec<f64>,
    },
    /// A fraction of the test set drawn from a far-away cluster whose labels
    /// disagree with the scorer at `flip_rate`.
    UnseenCluster {
        location: Vec<f64>,
        scale: f64,
        fraction: f64,
        flip_rate: f64,
    },
    /// Test labels drawn with these class weights instead of uniformly.
    PriorShift {
        class_weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub name: String,
    pub n_classes: usize,
    pub dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub class_scale: f64,
    pub shift: Shift,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

fn check_vector(v: &[f64], dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::invalid(format!(
            "{what} has length {}, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} is not finite")));
    }
    Ok(())
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("a scenario needs at least two classes"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        if self.class_means.len() != self.n_classes {
            return Err(Error::invalid(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.n_classes
            )));
        }
        for m in &self.class_means {
            check_vector(m, self.dim, "class mean")?;
        }
        if !(self.class_scale > 0.0 && self.class_scale.is_finite()) {
            return Err(Error::invalid("class_scale must be positive"));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::invalid("split sizes must be at least 1"));
        }
        match &self.shift {
            Shift::Identity => {}
            Shift::Translation { vector } => check_vector(vector, self.dim, "translation")?,
            Shift::UnseenCluster {
                location,
                scale,
                fraction,
                flip_rate,
            } => {
                check_vector(location, self.dim, "cluster location")?;
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(Error::invalid("cluster scale must be positive"));
                }
                for (v, what) in [(fraction, "fraction"), (flip_rate, "flip_rate")] {
                    if !(0.0..=1.0).contains(v) {
                        return Err(Error::invalid(format!("{what} {v} outside [0, 1]")));
                    }
                }
            }
            Shift::PriorShift { class_weights } => {
                if class_weights.len() != self.n_classes
                    || class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
                    || class_weights.iter().sum::<f64>() <= 0.0
                {
                    return Err(Error::invalid(
                        "class weights must be one non-negative weight per class",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn base(name: &str, seed: u64) -> SyntheticScenario {
    let (c, d) = (3, 8);
    let class_means = (0..c)
        .map(|k| (0..d).map(|j| if j == k { 3.0 } else { 0.0 }).collect())
        .collect();
    SyntheticScenario {
        name: name.to_string(),
        n_classes: c,
        dim: d,
        class_means,
        class_scale: 1.0,
        shift: Shift::Identity,
        n_train: 2000,
        n_val: 1000,
        n_test: 2000,
        seed,
    }
}

fn centroid(means: &[Vec<f64>]) -> Vec<f64> {
    let d = means[0].len();
    (0..d)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / means.len() as f64)
        .collect()
}

/// Named scenario at `seed`, or `None` for an unknown name.
pub fn preset(name: &str, seed: u64) -> Option<SyntheticScenario> {
    let mut s = base(name, seed);
    s.shift = match name {
        "identity" => Shift::Identity,
        "mild-shift" => {
            let u = 0.5 * s.class_scale / (s.dim as f64).sqrt();
            Shift::Translation {
                vector: vec![u; s.dim],
            }
        }
        "unseen-cluster" => {
            // 50 scales out from the centroid, past class 0, so the scorer
            // is confidently predicting class 0 there
            let c = centroid(&s.class_means);
            let dir: Vec<f64> = s.class_means[0]
                .iter()
                .zip(&c)
                .map(|(m, c)| m - c)
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let location = c
                .iter()
                .zip(&dir)
                .map(|(c, v)| c + 50.0 * s.class_scale * v / norm)
                .collect();
            Shift::UnseenCluster {
                location,
                scale: s.class_scale,
                fraction: 0.3,
                flip_rate: 1.0,
            }
        }
        "prior-shift" => Shift::PriorShift {
            class_weights: vec![0.6, 0.3, 0.1],
        },
        _ => return None,
    };
    Some(s)
}

/// Every preset at seeds 0, 1 and 2.
pub fn scenario_suite() -> Vec<SyntheticScenario> {
    PRESETS
        .iter()
        .flat_map(|p| (0..3).map(move |seed| preset(p, seed).expect("known preset")))
        .collect()
}

fn logits_row(x: &[f64], means: &[Vec<f64>], scale: f64) -> Vec<f32> {
    let denom = 2.0 * scale * scale;
    means
        .iter()
        .map(|m| {
            let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / denom) as f32
        })
        .collect()
}

fn gaussian_point(rng: &mut ChaCha8Rng, center: &[f64], scale: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&c| c + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn draw_class(rng: &mut ChaCha8Rng, weights: Option<&WeightedIndex<f64>>, c: usize) -> usize {
    match weights {
        None => rng.random_range(0..c),
        Some(w) => rng.sample(w),
    }
}

struct Split {
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn clean_split(
    s: &SyntheticScenario,
    rng: &mut ChaCha8Rng,
    n: usize,
    weights: Option<&WeightedIndex<f64>>,
    offset: Option<&[f64]>,
) -> Split {
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = draw_class(rng, weights, s.n_classes);
        let mut x = gaussian_point(rng, &s.class_means[y], s.class_scale);
        if let Some(off) = offset {
            x.iter_mut().zip(off).for_each(|(a, b)| *a += b);
        }
        points.push(x);
        labels.push(y);
    }
    Split { points, labels }
}

fn test_split(s: &SyntheticScenario, rng: &mut ChaCha8Rng) -> Split {
    match &s.shift {
        Shift::Identity => clean_split(s, rng, s.n_test, None, None),
        Shift::Translation { vector } => clean_split(s, rng, s.n_test, None, Some(vector)),
        Shift::PriorShift { class_weights } => {
            let w = WeightedIndex::new(class_weights).expect("validated weights");
            clean_split(s, rng, s.n_test, Some(&w), None)
        }
        Shift::UnseenCluster {
            location,
            scale,
            fraction,
            flip_rate,
        } => {
            let mut points = Vec::with_capacity(s.n_test);
            let mut labels = Vec::with_capacity(s.n_test);
            for _ in 0..s.n_test {
                if rng.random::<f64>() < *fraction {
                    let x = gaussian_point(rng, location, *scale);
                    let pred = argmax(&logits_row(&x, &s.class_means, s.class_scale));
                    let y = if rng.random::<f64>() < *flip_rate {
                        let other = rng.random_range(0..s.n_classes - 1);
                        if other >= pred {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        pred
                    };
                    points.push(x);
                    labels.push(y);
                } else {
                    let y = rng.random_range(0..s.n_classes);
                    points.push(gaussian_point(rng, &s.class_means[y], s.class_scale));
                    labels.push(y);
                }
            }
            Split { points, labels }
        }
    }
}

fn features(points: &[Vec<f64>]) -> Result<FeatureMatrix> {
    let rows: Vec<Vec<f32>> = points
        .iter()
        .map(|p| p.iter().map(|&v| v as f32).collect())
        .collect();
    FeatureMatrix::from_rows(&rows)
}

fn logits(points: &[Vec<f64>], means: &[Vec<f64>], scale: f64) -> Result<LogitMatrix> {
    let rows: Vec<Vec<f32>> = points.iter().map(|p| logits_row(p, means, scale)).collect();
    LogitMatrix::from_rows(&rows)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws the scenario and scores it with the Bayes-optimal scorer. The
/// bundle carries true test labels.
pub fn generate(s: &SyntheticScenario) -> Result<SplitBundle> {
    s.validate()?;
    let train = clean_split(s, &mut stream(s.seed, 0), s.n_train, None, None);
    let val = clean_split(s, &mut stream(s.seed, 1), s.n_val, None, None);
    let test = test_split(s, &mut stream(s.seed, 2));
    let c = s.n_classes;
    let bundle = SplitBundle {
        manifest: Manifest {
            name: s.name.clone(),
            model_id: "scorer".into(),
            seed: s.seed as i64,
            num_classes: c,
            dim: s.dim,
        },
        train: TrainSplit {
            features: features(&train.points)?,
            labels: LabelVector::new(train.labels, c)?,
        },
        val: ValSplit {
            features: features(&val.points)?,
            logits: logits(&val.points, &s.class_means, s.class_scale)?,
            labels: LabelVector::new(val.labels, c)?,
        },
        test: TestSplit {
            features: features(&test.points)?,
            logits: logits(&test.points, &s.class_means, s.class_scale)?,
            labels: Some(LabelVector::new(test.labels, c)?),
        },
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Class means of the sibling scorer: each mean moved by a Gaussian offset
/// of `SIBLING_JITTER * class_scale` per coordinate.
pub fn sibling_means(s: &SyntheticScenario) -> Vec<Vec<f64>> {
    let mut rng = stream(s.seed, 3);
    s.class_means
        .iter()
        .map(|m| gaussian_point(&mut rng, m, SIBLING_JITTER * s.class_scale))
        .collect()
}

/// A second model on the same splits: identical features and labels,
/// logits from [`sibling_means`].
pub fn generate_sibling(s: &SyntheticScenario, bundle: &SplitBundle) -> Result<SplitBundle> {
    s.validate()?;
    let means = sibling_means(s);
    let rescore = |f: &FeatureMatrix| -> Result<LogitMatrix> {
        let rows: Vec<Vec<f32>> = f
            .rows()
            .map(|r| {
                let x: Vec<f64> = r.iter().map(|&v| v as f64).collect();
                logits_row(&x, &means, s.class_scale)
            })
            .collect();
        LogitMatrix::from_rows(&rows)
    };
    let mut b = bundle.clone();
    b.manifest.model_id = "scorer-b".into();
    b.val.logits = rescore(&bundle.val.features)?;
    b.test.logits = rescore(&bundle.test.features)?;
    b.validate()?;
    Ok(b)
}
