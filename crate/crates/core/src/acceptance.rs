//! Acceptance suite. Every criterion is checked against an oracle written
//! independently of the code under test.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::{FeatureMatrix, LabelVector, LogitMatrix};
use crate::calibration::{self, ConfidenceVector, TemperatureModel};
use crate::combined::{self, Method};
use crate::confidence::{self, AtcModel};
use crate::distance::{self, DistanceConfig, DistanceMask, MahalanobisChecker, Thresholds};
use crate::error::Result;
use crate::eval::{self, PValueMethod};
use crate::ot::{self, CotConfig};
use crate::pipeline::{EstimateConfig, Estimator};
use crate::synth;

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn criterion(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Criterion {
    match body() {
        Ok((passed, detail)) => Criterion {
            name,
            passed,
            detail,
        },
        Err(e) => Criterion {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all() -> Vec<Criterion> {
    vec![
        knn_oracle(),
        threshold_coverage(),
        atc_self_consistency(),
        doc_identity(),
        conservativeness(),
        core_claim(),
        classwise_reduction(),
        mahalanobis_oracle(),
        cot_exactness(),
        temperature_scaling(),
        wilcoxon(),
        determinism(),
    ]
}

/// Reference implementations that share no code with the library.
pub mod oracles {
    /// Full pairwise distances, fully sorted, mean of the first `k`.
    pub fn knn_mean(reference: &[Vec<f64>], query: &[f64], k: usize) -> f64 {
        let mut d: Vec<f64> = reference
            .iter()
            .map(|r| {
                r.iter()
                    .zip(query)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d[..k].iter().sum::<f64>() / k as f64
    }

    /// Minimum of `sum_i cost[i][perm[i]]` over every permutation.
    pub fn min_assignment(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.len() {
                if !used[j] {
                    used[j] = true;
                    go(cost, row + 1, used, acc + cost[row][j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
        best
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())
                .unwrap();
            m.swap(col, pivot);
            let p = m[col][col];
            m[col].iter_mut().for_each(|v| *v /= p);
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    let pivot_row = m[col].clone();
                    for (v, p) in m[r].iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    /// Two-sided Wilcoxon p by enumerating all `2^n` sign assignments.
    pub fn wilcoxon_p(diffs: &[f64]) -> f64 {
        let d: Vec<f64> = diffs.iter().copied().filter(|v| *v != 0.0).collect();
        let n = d.len();
        let mut ranks = vec![0.0; n];
        for i in 0..n {
            let less = d.iter().filter(|x| x.abs() < d[i].abs()).count();
            let equal = d.iter().filter(|x| x.abs() == d[i].abs()).count();
            ranks[i] = less as f64 + (equal as f64 + 1.0) / 2.0;
        }
        let total: f64 = ranks.iter().sum();
        let stat = |plus: f64| plus.min(total - plus);
        let observed = stat(
            d.iter()
                .zip(&ranks)
                .filter(|(x, _)| **x > 0.0)
                .map(|(_, r)| r)
                .sum(),
        );
        let mut hits = 0u64;
        for mask in 0u64..1 << n {
            let plus: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if stat(plus) <= observed + 1e-9 {
                hits += 1;
            }
        }
        (hits as f64 / (1u64 << n) as f64).min(1.0)
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                .collect()
        })
        .collect()
}

fn to_features(rows: &[Vec<f64>]) -> Result<FeatureMatrix> {
    let f: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect();
    FeatureMatrix::from_rows(&f)
}

/// Rows as the library sees them (after the `f32` round trip).
fn widened(f: &FeatureMatrix) -> Vec<Vec<f64>> {
    f.rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Logits whose correct class gets a random boost, so accuracy varies by set.
fn random_calibration_set(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
) -> Result<(LogitMatrix, LabelVector)> {
    let boost = rng.random::<f32>() * 4.0;
    let scale = 0.5 + rng.random::<f32>() * 3.0;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..c);
        let row: Vec<f32> = (0..c)
            .map(|j| (rng.random::<f32>() * 2.0 - 1.0) * scale + if j == y { boost } else { 0.0 })
            .collect();
        rows.push(row);
        labels.push(y);
    }
    Ok((LogitMatrix::from_rows(&rows)?, LabelVector::new(labels, c)?))
}

fn relative_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

pub fn knn_oracle() -> Criterion {
    criterion("K-NN oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst = 0.0f64;
        let mut elapsed = 0.0;
        for inst in 0..50 {
            let k = [1, 5, 25][inst % 3];
            let n_ref = rng.random_range(k.max(2)..=500);
            let n_q = rng.random_range(1..=100);
            let d = rng.random_range(1..=32);
            let reference = to_features(&random_rows(&mut rng, n_ref, d, 5.0))?;
            let queries = to_features(&random_rows(&mut rng, n_q, d, 5.0))?;
            let start = Instant::now();
            let got = distance::average_knn_distances(&reference, &queries, k, false, false)?;
            elapsed += start.elapsed().as_secs_f64();
            let r = widened(&reference);
            for (q, g) in widened(&queries).iter().zip(&got) {
                worst = worst.max(relative_error(*g, oracles::knn_mean(&r, q, k)));
            }
        }
        Ok((
            worst <= 1e-5 && elapsed < 5.0,
            format!("50 instances, max relative error {worst:.2e}, {elapsed:.2}s"),
        ))
    })
}

pub fn threshold_coverage() -> Criterion {
    criterion("Threshold coverage", || {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut ok = true;
        let mut parts = Vec::new();
        for n in [100usize, 1000, 10_000] {
            let d = 6;
            let train = to_features(&random_rows(&mut rng, 1000, d, 1.0))?;
            let val = to_features(&random_rows(&mut rng, n, d, 1.0))?;
            let groups = vec![0; n];
            let checker = distance::fit_distance_checker(
                &train,
                &val,
                &groups,
                2,
                &DistanceConfig::default(),
            )?;
            let kept = checker.kept_mask(&val, &groups)?;
            let frac = kept.iter().filter(|&&k| k).count() as f64 / n as f64;
            let lo = 0.99 - 1.0 / n as f64;
            ok &= frac >= lo && frac <= 1.0;
            parts.push(format!("N={n}: {frac:.4} (>= {lo:.4})"));
        }
        Ok((ok, parts.join(", ")))
    })
}

pub fn atc_self_consistency() -> Criterion {
    criterion("ATC self-consistency", || {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let mut worst_ratio = 0.0f64;
        for _ in 0..50 {
            let n = rng.random_range(50..=2000);
            let c = rng.random_range(2..=10);
            let (logits, labels) = random_calibration_set(&mut rng, n, c)?;
            let classwise = rng.random::<bool>();
            let tm = if classwise {
                calibration::fit_temperature_classwise(&logits, &labels, 20)?
            } else {
                calibration::fit_temperature_global(&logits, &labels)?
            };
            let conf = calibration::confidences(&logits, &tm)?;
            let atc = confidence::fit_atc(&conf, &labels, &tm, classwise, 20)?;
            let (estimate, _) = confidence::atc_estimate(&conf, &atc)?;
            let correct = logits
                .rows()
                .zip(labels.as_slice())
                .filter(|(row, &y)| {
                    let best = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    row.iter().position(|&v| v == best) == Some(y)
                })
                .count();
            let truth = correct as f64 / n as f64;
            worst_ratio = worst_ratio.max((estimate - truth).abs() * n as f64);
        }
        Ok((
            worst_ratio <= 1.0 + 1e-9,
            format!("50 sets, max |error| * N = {worst_ratio:.3}"),
        ))
    })
}

pub fn doc_identity() -> Criterion {
    criterion("DoC identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let mut ok = true;
        for _ in 0..20 {
            let n = rng.random_range(1..=500);
            let c = rng.random_range(2..=6);
            let (logits, labels) = random_calibration_set(&mut rng, n, c)?;
            let tm = calibration::fit_temperature_global(&logits, &labels)?;
            let conf = calibration::confidences(&logits, &tm)?;
            let got = confidence::doc_estimate(&conf, &labels, &conf)?;
            let acc = conf
                .pred
                .iter()
                .zip(labels.as_slice())
                .filter(|(p, y)| p == y)
                .count() as f64
                / n as f64;
            ok &= got == acc;
        }
        Ok((
            ok,
            "20 sets, doc(val, val) == val accuracy bit-exactly".into(),
        ))
    })
}

/// Distance mask with fixed scores, for the mask-algebra checks.
struct FixedMask {
    scores: Vec<f64>,
    thresholds: Thresholds,
}

impl DistanceMask for FixedMask {
    fn dim(&self) -> usize {
        1
    }
    fn scores(&self, _: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.scores.clone())
    }
    fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }
}

pub fn conservativeness() -> Criterion {
    criterion("Conservativeness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let mut violations = 0;
        for _ in 0..10_000 {
            let n = rng.random_range(1..=50);
            let c = rng.random_range(2..=4);
            let conf = ConfidenceVector {
                conf: (0..n).map(|_| rng.random::<f64>()).collect(),
                pred: (0..n).map(|_| rng.random_range(0..c)).collect(),
            };
            let atc = AtcModel {
                global_threshold: rng.random::<f64>(),
                per_class_threshold: None,
                per_class_valid: vec![false; c],
                temperature: TemperatureModel::identity(c),
            };
            let mask = FixedMask {
                scores: (0..n).map(|_| rng.random::<f64>()).collect(),
                thresholds: Thresholds::fit(
                    &[0.0, rng.random::<f64>(), 1.0],
                    &[0, 0, 0],
                    c,
                    0.5,
                    false,
                    1,
                )?,
            };
            let features = FeatureMatrix::new(n, 1, vec![0.0; n])?;
            let plain = combined::atc_report(&conf, &atc)?.accuracy_estimate;
            let dist = combined::atc_dist_estimate(Method::AtcDist, &conf, &atc, &mask, &features)?
                .accuracy_estimate;
            let pred_b: Vec<usize> = conf
                .pred
                .iter()
                .map(|&p| {
                    if rng.random::<f64>() < 0.7 {
                        p
                    } else {
                        rng.random_range(0..c)
                    }
                })
                .collect();
            let gde = combined::gde_estimate(&conf.pred, &pred_b)?.accuracy_estimate;
            let gde_dist = combined::gde_dist_estimate(
                Method::GdeDist,
                &conf.pred,
                &pred_b,
                &mask,
                &features,
            )?
            .accuracy_estimate;
            violations += usize::from(dist > plain) + usize::from(gde_dist > gde);
        }
        let suite = synth::scenario_suite();
        for s in &suite {
            let a = synth::generate(s)?;
            let b = synth::generate_sibling(s, &a)?;
            let est = Estimator::new(&a, EstimateConfig::default());
            let atc = est.run(Method::Atc, None)?.accuracy_estimate;
            let gde = est.run(Method::Gde, Some(&b))?.accuracy_estimate;
            for m in [Method::AtcDist, Method::AtcDistCs, Method::AtcMaha] {
                violations += usize::from(est.run(m, None)?.accuracy_estimate > atc);
            }
            for m in [Method::GdeDist, Method::GdeDistCs] {
                violations += usize::from(est.run(m, Some(&b))?.accuracy_estimate > gde);
            }
        }
        Ok((
            violations == 0,
            format!(
                "10000 mask pairs and {} scenarios, {violations} violations",
                suite.len()
            ),
        ))
    })
}

pub fn core_claim() -> Criterion {
    criterion("Core claim (unseen cluster)", || {
        let start = Instant::now();
        let seeds = 20u64;
        let mut atc_err = Vec::new();
        let mut dist_err = Vec::new();
        let mut over = 0;
        for seed in 0..seeds {
            let s = synth::preset("unseen-cluster", 1000 + seed).expect("preset");
            let b = synth::generate(&s)?;
            let truth = b.test_accuracy().expect("labels");
            let est = Estimator::new(&b, EstimateConfig::default());
            let atc = est.run(Method::Atc, None)?.accuracy_estimate;
            let dist = est.run(Method::AtcDist, None)?.accuracy_estimate;
            over += usize::from(atc - truth > 0.0);
            atc_err.push((atc - truth).abs());
            dist_err.push((dist - truth).abs());
        }
        let mae = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (wins, _, p) = eval::sign_test(&dist_err, &atc_err)?;
        let elapsed = start.elapsed().as_secs_f64();
        let over_frac = over as f64 / seeds as f64;
        let win_frac = wins as f64 / seeds as f64;
        let passed = over_frac >= 0.8
            && win_frac >= 0.8
            && mae(&dist_err) < mae(&atc_err)
            && p < 0.05
            && elapsed < 60.0;
        Ok((
            passed,
            format!(
                "{seeds} seeds: ATC overestimates in {:.0}%, MAE ATC {:.2}% vs ATC-Dist {:.2}%, \
                 ATC-Dist better in {:.0}%, sign test p = {p:.2e}, {elapsed:.1}s",
                over_frac * 100.0,
                mae(&atc_err) * 100.0,
                mae(&dist_err) * 100.0,
                win_frac * 100.0
            ),
        ))
    })
}

pub fn classwise_reduction() -> Criterion {
    criterion("Class-wise reduction", || {
        let mut ok = true;
        // every class below min_samples
        for seed in 0..3 {
            let mut s = synth::preset("unseen-cluster", seed).expect("preset");
            s.n_train = 500;
            s.n_val = 300;
            s.n_test = 400;
            let b = synth::generate(&s)?;
            let cfg = EstimateConfig {
                min_samples: 10_000,
                ..EstimateConfig::default()
            };
            let est = Estimator::new(&b, cfg);
            let g = est.run(Method::AtcDist, None)?;
            let cs = est.run(Method::AtcDistCs, None)?;
            ok &= g.accuracy_estimate.to_bits() == cs.accuracy_estimate.to_bits()
                && g.kept_distance_fraction == cs.kept_distance_fraction
                && g.kept_joint_fraction == cs.kept_joint_fraction;
        }
        // single-class data: the class-wise statistics are the global ones
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        for _ in 0..3 {
            let c = 3;
            let logit_rows = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f32>> {
                (0..n)
                    .map(|_| {
                        vec![
                            2.0 + rng.random::<f32>(),
                            rng.random::<f32>(),
                            rng.random::<f32>(),
                        ]
                    })
                    .collect()
            };
            let train = to_features(&random_rows(&mut rng, 400, 4, 1.0))?;
            let val = to_features(&random_rows(&mut rng, 200, 4, 1.0))?;
            let test = to_features(&random_rows(&mut rng, 300, 4, 1.5))?;
            let val_logits = LogitMatrix::from_rows(&logit_rows(&mut rng, 200))?;
            let test_logits = LogitMatrix::from_rows(&logit_rows(&mut rng, 300))?;
            let val_labels = LabelVector::new(
                (0..200)
                    .map(|_| if rng.random::<f64>() < 0.85 { 0 } else { 1 })
                    .collect(),
                c,
            )?;
            let val_groups = vec![0; 200];
            let report = |classwise: bool| -> Result<f64> {
                let tm = if classwise {
                    calibration::fit_temperature_classwise(&val_logits, &val_labels, 20)?
                } else {
                    calibration::fit_temperature_global(&val_logits, &val_labels)?
                };
                let conf = calibration::confidences(&val_logits, &tm)?;
                let atc = confidence::fit_atc(&conf, &val_labels, &tm, classwise, 20)?;
                let cfg = DistanceConfig {
                    classwise,
                    ..DistanceConfig::default()
                };
                let checker = distance::fit_distance_checker(&train, &val, &val_groups, c, &cfg)?;
                let test_conf = calibration::confidences(&test_logits, &tm)?;
                let method = if classwise {
                    Method::AtcDistCs
                } else {
                    Method::AtcDist
                };
                Ok(
                    combined::atc_dist_estimate(method, &test_conf, &atc, &checker, &test)?
                        .accuracy_estimate,
                )
            };
            ok &= report(true)?.to_bits() == report(false)?.to_bits();
        }
        Ok((
            ok,
            "all-below-min_samples and single-class cases match bit-exactly".into(),
        ))
    })
}

pub fn mahalanobis_oracle() -> Criterion {
    criterion("Mahalanobis oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let d = rng.random_range(2..=6);
            let c = rng.random_range(2..=4);
            let n = rng.random_range((3 * d).max(2 * c)..=80);
            // anisotropic, correlated data
            let mix = random_rows(&mut rng, d, d, 1.0);
            let rows: Vec<Vec<f64>> = random_rows(&mut rng, n, d, 1.0)
                .into_iter()
                .map(|z| {
                    (0..d)
                        .map(|i| (0..d).map(|j| mix[i][j] * z[j]).sum::<f64>())
                        .collect()
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
            let train = to_features(&rows)?;
            let queries = to_features(&random_rows(&mut rng, 15, d, 2.0))?;
            let checker = distance::fit_mahalanobis_checker(
                &train, &labels, &train, &labels, c, 0.99, false, 20,
            )?;
            let got = checker.scores(&queries)?;

            let x = widened(&train);
            let mut means = vec![vec![0.0; d]; c];
            let mut counts = vec![0usize; c];
            for (row, &y) in x.iter().zip(&labels) {
                counts[y] += 1;
                for j in 0..d {
                    means[y][j] += row[j];
                }
            }
            for (m, &k) in means.iter_mut().zip(&counts) {
                m.iter_mut().for_each(|v| *v /= k as f64);
            }
            let mut cov = vec![vec![0.0; d]; d];
            for (row, &y) in x.iter().zip(&labels) {
                for i in 0..d {
                    for j in 0..d {
                        cov[i][j] += (row[i] - means[y][i]) * (row[j] - means[y][j]);
                    }
                }
            }
            for (i, r) in cov.iter_mut().enumerate() {
                r.iter_mut().for_each(|v| *v /= n as f64);
                r[i] += checker.ridge;
            }
            let inv = oracles::inverse(&cov);
            for (q, g) in widened(&queries).iter().zip(&got) {
                let want = means
                    .iter()
                    .map(|m| {
                        let r: Vec<f64> = q.iter().zip(m).map(|(a, b)| a - b).collect();
                        (0..d)
                            .map(|i| (0..d).map(|j| r[i] * inv[i][j] * r[j]).sum::<f64>())
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(relative_error(*g, want));
            }
        }

        let d = 5;
        let means = random_rows(&mut rng, 3, d, 3.0);
        let identity: Vec<f64> = (0..d * d)
            .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        let checker = MahalanobisChecker::from_parts(&means, identity)?;
        let mut exact = true;
        for q in random_rows(&mut rng, 50, d, 4.0) {
            let want = means
                .iter()
                .map(|m| {
                    q.iter()
                        .zip(m)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            exact &= checker.score_row(&q) == want;
        }
        Ok((
            worst <= 1e-6 && exact,
            format!(
                "20 instances, max relative error {worst:.2e}; identity covariance exact: {exact}"
            ),
        ))
    })
}

pub fn cot_exactness() -> Criterion {
    criterion("COT exactness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        // zero-cost: one-hot test rows whose labels match the validation frequencies
        let val: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let probs: Vec<f64> = (0..30)
            .flat_map(|i| {
                let mut row = [0.0; 3];
                row[i % 3] = 1.0;
                row
            })
            .collect();
        let cfg = CotConfig {
            batch_size: 30,
            max_samples: 30,
            seed: 5,
        };
        let zero_cost = ot::cot_estimate(&val, &probs, 3, &cfg)?;

        let uniform: Vec<f64> = (0..40).flat_map(|_| [0.5, 0.5]).collect();
        let identical = ot::cot_estimate(
            &[0, 1, 1, 0],
            &uniform,
            2,
            &CotConfig {
                batch_size: 40,
                max_samples: 40,
                seed: 1,
            },
        )?;

        let mut worst = 0.0f64;
        for _ in 0..30 {
            let m = rng.random_range(1..=8);
            let c = rng.random_range(2..=5);
            let mut rows = Vec::new();
            for _ in 0..m {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                rows.push(raw.iter().map(|v| v / s).collect::<Vec<f64>>());
            }
            let sources: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            let cost: Vec<Vec<f64>> = rows
                .iter()
                .map(|p| {
                    sources
                        .iter()
                        .map(|&y| {
                            p.iter()
                                .enumerate()
                                .map(|(j, &v)| (v - f64::from(j == y)).abs())
                                .sum::<f64>()
                                / 2.0
                        })
                        .collect()
                })
                .collect();
            let want = oracles::min_assignment(&cost) / m as f64;
            let got = ot::batch_transport_cost(&rows.concat(), c, &sources);
            worst = worst.max((got - want).abs());
        }
        Ok((
            zero_cost == 1.0 && (identical - 0.5).abs() < 1e-6 && worst < 1e-6,
            format!("zero-cost {zero_cost}, identical points {identical:.9}, max enumeration gap {worst:.2e}"),
        ))
    })
}

pub fn temperature_scaling() -> Criterion {
    criterion("Temperature scaling", || {
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let mut worst_gap = f64::NEG_INFINITY;
        let mut argmax_ok = true;
        for _ in 0..50 {
            let n = rng.random_range(1..=400);
            let c = rng.random_range(2..=8);
            let (logits, labels) = random_calibration_set(&mut rng, n, c)?;
            let tm = calibration::fit_temperature_global(&logits, &labels)?;
            let all: Vec<usize> = (0..n).collect();
            let gap = calibration::nll(&logits, labels.as_slice(), &all, tm.global_t)
                - calibration::nll(&logits, labels.as_slice(), &all, 1.0);
            worst_gap = worst_gap.max(gap);
            let cw = calibration::fit_temperature_classwise(&logits, &labels, 5)?;
            let expected: Vec<usize> = logits
                .rows()
                .map(|row| {
                    let mut best = 0;
                    for j in 1..row.len() {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            for model in [&tm, &cw] {
                let probs = calibration::probabilities(&logits, model)?;
                for (i, p) in probs.chunks_exact(c).enumerate() {
                    let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    argmax_ok &= p[expected[i]] == top;
                }
                argmax_ok &= calibration::confidences(&logits, model)?.pred == expected;
            }
        }
        Ok((
            worst_gap <= 1e-9 && argmax_ok,
            format!(
                "50 sets, max NLL(T*) - NLL(1) = {worst_gap:.2e}, argmax preserved: {argmax_ok}"
            ),
        ))
    })
}

pub fn wilcoxon() -> Criterion {
    criterion("Wilcoxon", || {
        let three = eval::wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3])?.p_value;
        let oracle_three = oracles::wilcoxon_p(&[1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let mut worst = 0.0f64;
        let mut exact_gap = 0.0f64;
        for _ in 0..20 {
            let a: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 0.8).collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let oracle = oracles::wilcoxon_p(&diffs);
            let approx = eval::wilcoxon_signed_rank_with(&a, &b, PValueMethod::Normal)?.p_value;
            let exact = eval::wilcoxon_signed_rank_with(&a, &b, PValueMethod::Exact)?.p_value;
            worst = worst.max((approx - oracle).abs());
            exact_gap = exact_gap.max((exact - oracle).abs());
        }
        let capped = eval::bonferroni(0.6, 3) == 1.0 && eval::bonferroni(0.01, 3) == 0.03;
        Ok((
            three == 0.25 && oracle_three == 0.25 && worst <= 0.02 && exact_gap < 1e-12 && capped,
            format!(
                "p([1,2,3]) = {three}; n=12 normal vs enumeration max gap {worst:.4}; \
                 exact vs enumeration {exact_gap:.1e}; Bonferroni capped: {capped}"
            ),
        ))
    })
}

pub fn determinism() -> Criterion {
    criterion("Determinism", || {
        let dir = tempfile::tempdir().map_err(|e| crate::Error::io(std::env::temp_dir(), e))?;
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let argv = |args: &[&str]| -> i32 {
            crate::cli::run(std::iter::once("covshift").chain(args.iter().copied()))
        };
        let a_s = a.display().to_string();
        let b_s = b.display().to_string();
        let synth_code = argv(&[
            "synth",
            "--preset",
            "unseen-cluster",
            "--seed",
            "7",
            "--out",
            &a_s,
            "--sibling-out",
            &b_s,
        ]);
        let out = dir.path().join("report.jsonl");
        let out_s = out.display().to_string();
        let mut args = vec![
            "estimate",
            "--bundle",
            &a_s,
            "--bundle-b",
            &b_s,
            "--out",
            &out_s,
        ];
        for m in Method::ALL {
            args.extend(["--method", m.as_str()]);
        }
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let code = argv(&args);
            let text = std::fs::read_to_string(&out).unwrap_or_default();
            let _ = std::fs::remove_file(&out);
            let stripped: Vec<serde_json::Value> = text
                .lines()
                .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
                .map(|mut v| {
                    if let Some(o) = v.as_object_mut() {
                        o.remove("generated_at");
                    }
                    v
                })
                .collect();
            outputs.push((code, stripped));
        }
        let same = outputs[0] == outputs[1];
        let ok = synth_code == 0
            && outputs
                .iter()
                .all(|(c, v)| *c == 0 && v.len() == Method::ALL.len())
            && same;
        Ok((
            ok,
            format!(
                "two runs of {} methods identical: {same}",
                Method::ALL.len()
            ),
        ))
    })
}
