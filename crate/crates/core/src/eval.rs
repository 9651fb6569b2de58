//! Evaluation protocol: absolute errors per (model, dataset, method), MAE,
//! Wilcoxon signed-rank tests of the best method against every other with
//! Bonferroni correction, and CSV report emission.
//!
//! Wilcoxon variant: zero differences are dropped, tied magnitudes get
//! average ranks, the statistic is `min(W+, W-)`. The two-sided p-value is
//! exact (full null distribution over sign assignments) for up to 25
//! non-zero pairs and a tie-corrected normal approximation with continuity
//! correction beyond that.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::fsutil;

pub const EXACT_CUTOFF: usize = 25;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub model_id: String,
    pub dataset_id: String,
    pub method: String,
    pub predicted_accuracy: f64,
    pub true_accuracy: f64,
    pub absolute_error: f64,
}

impl ErrorRecord {
    pub fn new(model_id: &str, dataset_id: &str, method: &str, predicted: f64, truth: f64) -> Self {
        ErrorRecord {
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            method: method.to_string(),
            predicted_accuracy: predicted,
            true_accuracy: truth,
            absolute_error: (predicted - truth).abs(),
        }
    }
}

pub fn mae(records: &[ErrorRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("error records"));
    }
    Ok(records.iter().map(|r| r.absolute_error).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PValueMethod {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_pairs: usize,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    /// All differences were zero.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// `P(W+ <= w)` under the null, from the exact distribution of the
/// signed-rank sum. Ranks are doubled so average ranks stay integral.
fn exact_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled positive sum s
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (w * 2.0).round() as usize;
    let total = 2f64.powi(ranks.len() as i32);
    counts[..=limit.min(max)].iter().sum::<f64>() / total
}

fn normal_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    // 2 * (1 - Phi(z)) = erfc(z / sqrt 2)
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, PValueMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(
    a: &[f64],
    b: &[f64],
    method: PValueMethod,
) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "paired samples",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("paired samples"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            n_pairs: a.len(),
            n_effective: 0,
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
            degenerate: true,
        });
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);

    let exact = match method {
        PValueMethod::Auto => diffs.len() <= EXACT_CUTOFF,
        PValueMethod::Exact => true,
        PValueMethod::Normal => false,
    };
    let p_value = if exact {
        (2.0 * exact_lower_tail(&ranks, w)).min(1.0)
    } else {
        normal_two_sided(&ranks, w_plus)
    };
    Ok(WilcoxonResult {
        n_pairs: a.len(),
        n_effective: diffs.len(),
        statistic: w,
        p_value,
        exact,
        degenerate: false,
    })
}

/// Two-sided sign test of `a < b` against `a > b`; ties are dropped.
/// Returns `(wins for a, losses for a, p)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<(usize, usize, f64)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "paired samples",
            left: a.len(),
            right: b.len(),
        });
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = wins + losses;
    if n == 0 {
        return Ok((0, 0, 1.0));
    }
    let k = wins.min(losses);
    // P(X <= k) for X ~ Binomial(n, 1/2)
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=k {
        tail += term;
        term *= (n - i) as f64 / (i + 1) as f64;
    }
    Ok((wins, losses, (2.0 * tail).min(1.0)))
}

pub fn bonferroni(p: f64, n_comparisons: usize) -> f64 {
    (p * n_comparisons as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub method_a: String,
    pub method_b: String,
    pub n_pairs: usize,
    pub statistic: f64,
    pub p_value_raw: f64,
    pub p_value_bonferroni: f64,
    pub n_comparisons: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mae: f64,
    pub is_best: bool,
    /// Not significantly different from the best (corrected p >= 0.05); true for the best itself.
    pub best_equivalent: bool,
    pub p_bonferroni: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub best: String,
    pub tests: Vec<SignificanceResult>,
    pub summary: Vec<MethodSummary>,
}

/// Tests the lowest-MAE method against every other over the shared
/// (model, dataset) pairs. MAE ties resolve to the lexicographically first
/// method name.
pub fn compare_methods(records: &[ErrorRecord]) -> Result<MethodComparison> {
    let mut by_method: BTreeMap<&str, BTreeMap<(&str, &str), f64>> = BTreeMap::new();
    for r in records {
        let entry = by_method.entry(r.method.as_str()).or_default();
        if entry
            .insert(
                (r.model_id.as_str(), r.dataset_id.as_str()),
                r.absolute_error,
            )
            .is_some()
        {
            return Err(Error::invalid(format!(
                "duplicate record for {} on ({}, {})",
                r.method, r.model_id, r.dataset_id
            )));
        }
    }
    if by_method.len() < 2 {
        return Err(Error::invalid("comparison needs at least two methods"));
    }
    let keys: BTreeSet<(&str, &str)> = by_method.values().next().unwrap().keys().copied().collect();
    for (m, errs) in &by_method {
        if errs.keys().copied().collect::<BTreeSet<_>>() != keys {
            return Err(Error::invalid(format!(
                "method {m} does not cover the same (model, dataset) pairs"
            )));
        }
    }

    let vectors: BTreeMap<&str, Vec<f64>> = by_method
        .iter()
        .map(|(m, errs)| (*m, keys.iter().map(|k| errs[k]).collect()))
        .collect();
    let maes: BTreeMap<&str, f64> = vectors
        .iter()
        .map(|(m, v)| (*m, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let best = *maes
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(m, _)| m)
        .unwrap();

    let n_comparisons = vectors.len() - 1;
    let mut tests = Vec::with_capacity(n_comparisons);
    for (m, v) in &vectors {
        if *m == best {
            continue;
        }
        let w = wilcoxon_signed_rank(&vectors[best], v)?;
        tests.push(SignificanceResult {
            method_a: best.to_string(),
            method_b: m.to_string(),
            n_pairs: w.n_pairs,
            statistic: w.statistic,
            p_value_raw: w.p_value,
            p_value_bonferroni: bonferroni(w.p_value, n_comparisons),
            n_comparisons,
            degenerate: w.degenerate,
        });
    }

    let summary = maes
        .iter()
        .map(|(m, &mae)| {
            let test = tests.iter().find(|t| t.method_b == *m);
            MethodSummary {
                method: m.to_string(),
                mae,
                is_best: *m == best,
                best_equivalent: test.is_none_or(|t| t.p_value_bonferroni >= SIGNIFICANCE_LEVEL),
                p_bonferroni: test.map(|t| t.p_value_bonferroni),
            }
        })
        .collect();

    Ok(MethodComparison {
        best: best.to_string(),
        tests,
        summary,
    })
}

/// Summary for a family evaluated with a single method: no tests, trivially best.
pub fn single_method_comparison(records: &[ErrorRecord]) -> Result<MethodComparison> {
    let method = records
        .first()
        .ok_or(Error::Empty("error records"))?
        .method
        .clone();
    if records.iter().any(|r| r.method != method) {
        return compare_methods(records);
    }
    Ok(MethodComparison {
        best: method.clone(),
        tests: Vec::new(),
        summary: vec![MethodSummary {
            method,
            mae: mae(records)?,
            is_best: true,
            best_equivalent: true,
            p_bonferroni: None,
        }],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Csv,
    /// CSV files plus a `summary.md` table.
    Markdown,
}

pub struct FamilyReport<'a> {
    pub family: &'a str,
    pub records: &'a [ErrorRecord],
    pub comparison: &'a MethodComparison,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub errors: PathBuf,
    pub scatter: PathBuf,
    pub summary: PathBuf,
    pub significance: PathBuf,
    pub curves: Option<PathBuf>,
    pub markdown: Option<PathBuf>,
}

pub type GroupKey<'a> = &'a dyn Fn(&ErrorRecord) -> Option<String>;

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .and_then(|_| fill(&mut w))
        .map_err(|e| Error::invalid(format!("csv encoding failed: {e}")))?;
    w.into_inner()
        .map_err(|e| Error::invalid(format!("csv encoding failed: {e}")))
}

/// Writes `errors.csv`, `scatter.csv`, `summary.csv` and
/// `significance.json`; `curves.csv` when `group_key` is given (MAE per
/// family, group and method); `summary.md` for [`ReportFormat::Markdown`].
pub fn emit_report(
    families: &[FamilyReport<'_>],
    out_dir: &Path,
    format: ReportFormat,
    group_key: Option<GroupKey<'_>>,
) -> Result<ReportFiles> {
    if families.iter().all(|f| f.records.is_empty()) {
        return Err(Error::Empty("error records"));
    }
    fsutil::create_dir(out_dir)?;
    let records = || families.iter().flat_map(|f| f.records.iter());

    let errors = csv_bytes(
        &[
            "model_id",
            "dataset_id",
            "method",
            "predicted",
            "true",
            "abs_error",
        ],
        |w| {
            for r in records() {
                w.write_record([
                    r.model_id.clone(),
                    r.dataset_id.clone(),
                    r.method.clone(),
                    r.predicted_accuracy.to_string(),
                    r.true_accuracy.to_string(),
                    r.absolute_error.to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    let scatter = csv_bytes(&["method", "predicted", "true"], |w| {
        for r in records() {
            w.write_record([
                r.method.clone(),
                r.predicted_accuracy.to_string(),
                r.true_accuracy.to_string(),
            ])?;
        }
        Ok(())
    })?;
    let summary = csv_bytes(
        &[
            "dataset_family",
            "method",
            "mae_pct",
            "is_best",
            "best_equivalent",
            "p_bonferroni",
        ],
        |w| {
            for f in families {
                for s in &f.comparison.summary {
                    w.write_record([
                        f.family.to_string(),
                        s.method.clone(),
                        format!("{:.2}", s.mae * 100.0),
                        s.is_best.to_string(),
                        s.best_equivalent.to_string(),
                        s.p_bonferroni
                            .map(|p| format!("{p:.6}"))
                            .unwrap_or_default(),
                    ])?;
                }
            }
            Ok(())
        },
    )?;

    let files = ReportFiles {
        errors: out_dir.join("errors.csv"),
        scatter: out_dir.join("scatter.csv"),
        summary: out_dir.join("summary.csv"),
        significance: out_dir.join("significance.json"),
        curves: group_key.map(|_| out_dir.join("curves.csv")),
        markdown: (format == ReportFormat::Markdown).then(|| out_dir.join("summary.md")),
    };
    fsutil::write_atomic(&files.errors, &errors)?;
    fsutil::write_atomic(&files.scatter, &scatter)?;
    fsutil::write_atomic(&files.summary, &summary)?;

    let significance: BTreeMap<&str, &MethodComparison> =
        families.iter().map(|f| (f.family, f.comparison)).collect();
    let text = serde_json::to_string_pretty(&significance).expect("comparison serializes");
    fsutil::write_atomic(&files.significance, text.as_bytes())?;

    if let (Some(key), Some(path)) = (group_key, &files.curves) {
        let mut groups: BTreeMap<(&str, String, &str), (f64, usize)> = BTreeMap::new();
        for f in families {
            for r in f.records {
                if let Some(g) = key(r) {
                    let e = groups
                        .entry((f.family, g, r.method.as_str()))
                        .or_insert((0.0, 0));
                    e.0 += r.absolute_error;
                    e.1 += 1;
                }
            }
        }
        let curves = csv_bytes(
            &["dataset_family", "group", "method", "mae_pct", "n"],
            |w| {
                for ((family, group, method), (sum, n)) in &groups {
                    w.write_record([
                        family.to_string(),
                        group.clone(),
                        method.to_string(),
                        format!("{:.2}", sum / *n as f64 * 100.0),
                        n.to_string(),
                    ])?;
                }
                Ok(())
            },
        )?;
        fsutil::write_atomic(path, &curves)?;
    }

    if let Some(path) = &files.markdown {
        let mut md = String::from("| family | method | MAE (%) | best | equivalent to best | p (Bonferroni) |\n|---|---|---|---|---|---|\n");
        for f in families {
            for s in &f.comparison.summary {
                let mae = if s.best_equivalent {
                    format!("**{:.2}**", s.mae * 100.0)
                } else {
                    format!("{:.2}", s.mae * 100.0)
                };
                md.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    f.family,
                    s.method,
                    mae,
                    if s.is_best { "yes" } else { "" },
                    if s.best_equivalent { "yes" } else { "" },
                    s.p_bonferroni
                        .map(|p| format!("{p:.4}"))
                        .unwrap_or_default()
                ));
            }
        }
        fsutil::write_atomic(path, md.as_bytes())?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal enumeration of all 2^n sign flips.
    fn enumerate_p(diffs: &[f64]) -> f64 {
        let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
        let mags: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
        let ranks = average_ranks(&mags);
        let total: f64 = ranks.iter().sum();
        let observed = {
            let wp: f64 = nz
                .iter()
                .zip(&ranks)
                .filter(|(d, _)| **d > 0.0)
                .map(|(_, r)| r)
                .sum();
            wp.min(total - wp)
        };
        let n = nz.len();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let wp: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if wp.min(total - wp) <= observed + 1e-9 {
                hits += 1;
            }
        }
        (hits as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn mae_examples() {
        let r = |p, t| ErrorRecord::new("m", "d", "x", p, t);
        assert!((mae(&[r(0.5, 0.4), r(0.2, 0.5)]).unwrap() - 0.2).abs() < 1e-12);
        assert!((mae(&[r(0.9, 0.7)]).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(mae(&[r(0.3, 0.3), r(0.8, 0.8)]).unwrap(), 0.0);
        assert!(mae(&[]).is_err());
    }

    #[test]
    fn wilcoxon_three_positive() {
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert!(w.exact);
        assert!((w.p_value - 0.25).abs() < 1e-12);
        assert!((enumerate_p(&[1.0, 2.0, 3.0]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_degenerate() {
        let w = wilcoxon_signed_rank(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.p_value, 1.0);
        assert!(wilcoxon_signed_rank(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn exact_matches_enumeration_with_ties_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(1..=14);
            // coarse values force tied magnitudes and zeros
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-4i32..=4) as f64).collect();
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let w = wilcoxon_signed_rank_with(&d, &vec![0.0; n], PValueMethod::Exact).unwrap();
            assert!((w.p_value - enumerate_p(&d)).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn normal_approximation_tracks_exact_at_n12() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 2.0 - 0.7).collect();
            let zeros = vec![0.0; 12];
            let exact = wilcoxon_signed_rank_with(&d, &zeros, PValueMethod::Exact).unwrap();
            let approx = wilcoxon_signed_rank_with(&d, &zeros, PValueMethod::Normal).unwrap();
            assert!((exact.p_value - enumerate_p(&d)).abs() < 1e-12);
            assert!((exact.p_value - approx.p_value).abs() < 0.02);
        }
    }

    #[test]
    fn large_n_uses_normal() {
        let a: Vec<f64> = (0..30).map(|i| i as f64 * 0.01 + 0.5).collect();
        let b = vec![0.0; 30];
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!w.exact);
        assert!(w.p_value < 1e-4);
    }

    #[test]
    fn sign_test_examples() {
        let (w, l, p) = sign_test(&[0.0; 10], &[1.0; 10]).unwrap();
        assert_eq!((w, l), (10, 0));
        assert!((p - 2.0 / 1024.0).abs() < 1e-15);
        let (_, _, p) = sign_test(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(sign_test(&[1.0], &[1.0]).unwrap().2, 1.0);
    }

    #[test]
    fn bonferroni_caps() {
        assert_eq!(bonferroni(0.3, 5), 1.0);
        assert_eq!(bonferroni(0.01, 3), 0.03);
    }

    fn records_for(method: &str, errors: &[f64]) -> Vec<ErrorRecord> {
        errors
            .iter()
            .enumerate()
            .map(|(i, &e)| ErrorRecord::new(&format!("m{i}"), "d", method, 0.5 + e, 0.5))
            .collect()
    }

    #[test]
    fn identical_methods_are_both_best_equivalent() {
        let errs = [0.1, 0.2, 0.05, 0.3];
        let mut recs = records_for("a", &errs);
        recs.extend(records_for("b", &errs));
        let c = compare_methods(&recs).unwrap();
        assert!(c.summary.iter().all(|s| s.best_equivalent));
        assert_eq!(c.tests[0].n_comparisons, 1);
    }

    #[test]
    fn dominated_method_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let good: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 0.05).collect();
        let bad: Vec<f64> = good
            .iter()
            .map(|g| g + 0.05 + rng.random::<f64>() * 0.05)
            .collect();
        let mut recs = records_for("good", &good);
        recs.extend(records_for("bad", &bad));
        let c = compare_methods(&recs).unwrap();
        assert_eq!(c.best, "good");
        let bad_row = c.summary.iter().find(|s| s.method == "bad").unwrap();
        assert!(!bad_row.best_equivalent);
        assert!(bad_row.p_bonferroni.unwrap() < 0.05);
    }

    #[test]
    fn three_methods_two_comparisons() {
        let mut recs = records_for("a", &[0.1, 0.2, 0.3]);
        recs.extend(records_for("b", &[0.2, 0.2, 0.4]));
        recs.extend(records_for("c", &[0.3, 0.1, 0.3]));
        let c = compare_methods(&recs).unwrap();
        assert_eq!(c.tests.len(), 2);
        assert!(c.tests.iter().all(|t| t.n_comparisons == 2));
    }

    #[test]
    fn mismatched_coverage_is_error() {
        let mut recs = records_for("a", &[0.1, 0.2, 0.3]);
        recs.extend(records_for("b", &[0.2, 0.2]));
        assert!(compare_methods(&recs).is_err());
    }

    #[test]
    fn emits_files() {
        let mut recs = records_for("a", &[0.1, 0.2, 0.3]);
        recs.extend(records_for("b", &[0.2, 0.2, 0.4]));
        let cmp = compare_methods(&recs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let key = |r: &ErrorRecord| Some(r.model_id.clone());
        let files = emit_report(
            &[FamilyReport {
                family: "toy",
                records: &recs,
                comparison: &cmp,
            }],
            dir.path(),
            ReportFormat::Markdown,
            Some(&key),
        )
        .unwrap();
        let summary = std::fs::read_to_string(&files.summary).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(
            lines[0],
            "dataset_family,method,mae_pct,is_best,best_equivalent,p_bonferroni"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("toy,a,20.00,true,true,"));
        let errors = std::fs::read_to_string(&files.errors).unwrap();
        assert_eq!(
            errors.lines().next().unwrap(),
            "model_id,dataset_id,method,predicted,true,abs_error"
        );
        assert_eq!(errors.lines().count(), 7);
        let scatter = std::fs::read_to_string(&files.scatter).unwrap();
        assert_eq!(scatter.lines().next().unwrap(), "method,predicted,true");
        let curves = std::fs::read_to_string(files.curves.unwrap()).unwrap();
        assert_eq!(curves.lines().count(), 1 + 6);
        assert!(files.markdown.unwrap().exists());
    }

    #[test]
    fn curves_have_one_value_per_severity() {
        let mut recs = Vec::new();
        for method in ["a", "b"] {
            for sev in 1..=5 {
                for m in 0..3 {
                    recs.push(ErrorRecord::new(
                        &format!("m{m}"),
                        &format!("sev{sev}"),
                        method,
                        0.5,
                        0.4,
                    ));
                }
            }
        }
        let cmp = compare_methods(&recs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let key = |r: &ErrorRecord| r.dataset_id.strip_prefix("sev").map(str::to_string);
        let files = emit_report(
            &[FamilyReport {
                family: "f",
                records: &recs,
                comparison: &cmp,
            }],
            dir.path(),
            ReportFormat::Csv,
            Some(&key),
        )
        .unwrap();
        let curves = std::fs::read_to_string(files.curves.unwrap()).unwrap();
        for method in ["a", "b"] {
            let n = curves
                .lines()
                .filter(|l| l.split(',').nth(2) == Some(method))
                .count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn empty_report_is_error() {
        let cmp = MethodComparison {
            best: "a".into(),
            tests: vec![],
            summary: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(
            &[FamilyReport {
                family: "f",
                records: &[],
                comparison: &cmp
            }],
            dir.path(),
            ReportFormat::Csv,
            None
        )
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn swap_symmetry_and_bounds(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let ab = wilcoxon_signed_rank(&a, &b).unwrap();
            let ba = wilcoxon_signed_rank(&b, &a).unwrap();
            proptest::prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            proptest::prop_assert!((0.0..=1.0).contains(&ab.p_value));
            for n in 1..5 {
                let c = bonferroni(ab.p_value, n);
                proptest::prop_assert!(c >= ab.p_value && c <= 1.0);
            }
        }

        #[test]
        fn mae_scaling(errs in proptest::collection::vec(0.0f64..0.5, 1..20), s in 0.0f64..2.0) {
            let base: Vec<ErrorRecord> = errs.iter().map(|&e| ErrorRecord::new("m", "d", "x", e, 0.0)).collect();
            let scaled: Vec<ErrorRecord> = errs.iter().map(|&e| ErrorRecord::new("m", "d", "x", e * s, 0.0)).collect();
            let mut rev = base.clone();
            rev.reverse();
            let m = mae(&base).unwrap();
            proptest::prop_assert!((mae(&rev).unwrap() - m).abs() < 1e-12);
            proptest::prop_assert!((mae(&scaled).unwrap() - s * m).abs() < 1e-9);
        }
    }
}
