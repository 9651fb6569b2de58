//! Confidence Optimal Transport (COT) baseline.
//!
//! Test softmax rows are matched to an equal number of one-hot source
//! vectors that follow the validation label distribution. With uniform
//! weights on both sides the transport problem is a linear assignment,
//! solved exactly. The ground cost is half the L1 distance between
//! probability vectors, and the estimate is `1 - mean matched cost`,
//! averaged over batches.
//!
//! The half-L1 cost and the `1 - cost` read-out are this crate's rendering
//! of COT, not a transcription of a reference implementation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::subsample_indices;
use crate::error::{Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 2_500;
pub const DEFAULT_MAX_SAMPLES: usize = 25_000;
const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotConfig {
    pub batch_size: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            max_samples: DEFAULT_MAX_SAMPLES,
            seed: 0,
        }
    }
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns `assignment[row] = column`. Shortest augmenting path with
/// potentials, `O(n^3)`.
pub fn solve_assignment(costs: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(costs.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &costs[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// `1/2 * || onehot(label) - p ||_1`.
pub fn half_l1_to_onehot(p: &[f64], label: usize) -> f64 {
    let abs_sum: f64 = p.iter().map(|x| x.abs()).sum();
    0.5 * (abs_sum - p[label].abs() + (1.0 - p[label]).abs())
}

/// Source labels for a batch of `m`: class counts apportioned to the
/// empirical label frequencies by largest remainder, remainder ties broken
/// by a seeded shuffle of the classes.
pub fn source_labels(label_counts: &[usize], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total: usize = label_counts.iter().sum();
    let mut counts: Vec<usize> = label_counts.iter().map(|&c| c * m / total).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..label_counts.len()).collect();
    order.shuffle(rng);
    // remainder numerators c * m mod total, larger first; shuffled order breaks ties
    order.sort_by_key(|&c| std::cmp::Reverse(label_counts[c] * m % total));
    for &c in order.iter().take(m - assigned) {
        counts[c] += 1;
    }
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect()
}

/// Mean matched half-L1 cost between probability rows (flattened, `c`
/// columns) and one-hot source labels of equal count.
pub fn batch_transport_cost(probs: &[f64], c: usize, sources: &[usize]) -> f64 {
    let m = sources.len();
    assert_eq!(probs.len(), m * c);
    let mut costs = Vec::with_capacity(m * m);
    for row in probs.chunks_exact(c) {
        costs.extend(sources.iter().map(|&y| half_l1_to_onehot(row, y)));
    }
    let assignment = solve_assignment(&costs, m);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[i * m + j])
        .sum();
    total / m as f64
}

/// COT accuracy estimate from validation labels and test probability rows.
pub fn cot_estimate(
    val_labels: &[usize],
    test_probs: &[f64],
    num_classes: usize,
    cfg: &CotConfig,
) -> Result<f64> {
    if val_labels.is_empty() {
        return Err(Error::Empty("validation labels"));
    }
    if num_classes < 2 || test_probs.is_empty() || !test_probs.len().is_multiple_of(num_classes) {
        return Err(Error::Empty("test probabilities"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > cfg.max_samples {
        return Err(Error::invalid(format!(
            "batch size {} must be in 1..={}",
            cfg.batch_size, cfg.max_samples
        )));
    }
    for (i, row) in test_probs.chunks_exact(num_classes).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE
            || row.iter().any(|&p| p.is_nan() || p < -ROW_SUM_TOLERANCE)
        {
            return Err(Error::invalid(format!(
                "row {i} is not a probability vector"
            )));
        }
    }
    let mut label_counts = vec![0usize; num_classes];
    for &y in val_labels {
        *label_counts
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label {y} outside {num_classes} classes")))? +=
            1;
    }

    let n = test_probs.len() / num_classes;
    let idx = subsample_indices(n, cfg.max_samples, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batches: Vec<(Vec<f64>, Vec<usize>)> = idx
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let mut rows = Vec::with_capacity(chunk.len() * num_classes);
            for &i in chunk {
                rows.extend_from_slice(&test_probs[i * num_classes..(i + 1) * num_classes]);
            }
            (rows, source_labels(&label_counts, chunk.len(), &mut rng))
        })
        .collect();

    let errors: Vec<f64> = batches
        .par_iter()
        .map(|(rows, sources)| batch_transport_cost(rows, num_classes, sources))
        .collect();
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok((1.0 - mean_error).clamp(0.0, 1.0))
}
