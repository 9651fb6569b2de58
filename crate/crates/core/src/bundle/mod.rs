//! On-disk dataset bundles: embeddings, logits and labels for the train,
//! validation and shifted test splits of one (model, dataset) pair.
//!
//! Layout of a bundle directory:
//!
//! ```text
//! manifest.json
//! train_features.npy  train_labels.npy
//! val_features.npy    val_logits.npy    val_labels.npy
//! test_features.npy   test_logits.npy   [test_labels.npy]
//! ```
//!
//! Features and logits are `<f4`, labels `<i8`. Row `i` of every file of a
//! split describes sample `i` of that split.

pub mod npy;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use npy::{NpyArray, NpyData};

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_FEATURES: &str = "train_features.npy";
pub const TRAIN_LABELS: &str = "train_labels.npy";
pub const VAL_FEATURES: &str = "val_features.npy";
pub const VAL_LOGITS: &str = "val_logits.npy";
pub const VAL_LABELS: &str = "val_labels.npy";
pub const TEST_FEATURES: &str = "test_features.npy";
pub const TEST_LOGITS: &str = "test_logits.npy";
pub const TEST_LABELS: &str = "test_labels.npy";

/// Row-major `n x cols` matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Dense {
    fn new(rows: usize, cols: usize, data: Vec<f32>, what: &str) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                file: what.to_string(),
                reason: format!("shape ({rows}, {cols}) has an empty axis"),
            });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                file: what.to_string(),
                reason: format!("{} values do not fill ({rows}, {cols})", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                file: what.to_string(),
                index,
            });
        }
        Ok(Dense { rows, cols, data })
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn select(&self, indices: &[usize]) -> Dense {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Dense {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// `N x D` penultimate-layer embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Dense);

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        Dense::new(n, d, data, "features").map(FeatureMatrix)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged feature rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.0.rows
    }

    pub fn dim(&self) -> usize {
        self.0.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.0.data.chunks_exact(self.0.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0.data
    }

    /// Rows at `indices`, in that order. Panics on an empty selection.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        assert!(!indices.is_empty(), "empty row selection");
        FeatureMatrix(self.0.select(indices))
    }
}

/// `N x C` pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Dense);

impl LogitMatrix {
    pub fn new(n: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if c < 2 {
            return Err(Error::ShapeMismatch {
                file: "logits".into(),
                reason: format!("need at least 2 classes, found {c}"),
            });
        }
        Dense::new(n, c, data, "logits").map(LogitMatrix)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("ragged logit rows"));
        }
        Self::new(rows.len(), c, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.0.rows
    }

    pub fn classes(&self) -> usize {
        self.0.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.0.data.chunks_exact(self.0.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0.data
    }

    pub fn select(&self, indices: &[usize]) -> LogitMatrix {
        assert!(!indices.is_empty(), "empty row selection");
        LogitMatrix(self.0.select(indices))
    }

    /// Index of the largest logit per row; ties resolve to the lowest class.
    pub fn argmax(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Class labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(index) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                file: "labels".into(),
                index,
                value: labels[index] as i64,
                classes: num_classes,
            });
        }
        Ok(LabelVector(labels))
    }

    fn from_i64(raw: &[i64], num_classes: usize, file: &str) -> Result<Self> {
        let mut labels = Vec::with_capacity(raw.len());
        for (index, &value) in raw.iter().enumerate() {
            if value < 0 || value as u64 >= num_classes as u64 {
                return Err(Error::LabelOutOfRange {
                    file: file.to_string(),
                    index,
                    value,
                    classes: num_classes,
                });
            }
            labels.push(value as usize);
        }
        Ok(LabelVector(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn select(&self, indices: &[usize]) -> LabelVector {
        LabelVector(indices.iter().map(|&i| self.0[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub model_id: String,
    pub seed: i64,
    pub num_classes: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSplit {
    pub features: FeatureMatrix,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValSplit {
    pub features: FeatureMatrix,
    pub logits: LogitMatrix,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub features: FeatureMatrix,
    pub logits: LogitMatrix,
    pub labels: Option<LabelVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub manifest: Manifest,
    pub train: TrainSplit,
    pub val: ValSplit,
    pub test: TestSplit,
}

impl SplitBundle {
    /// Checks the cross-split invariants: shared `D`, shared `C`, matching
    /// row counts, manifest agreeing with the arrays.
    pub fn validate(&self) -> Result<()> {
        let d = self.manifest.dim;
        let c = self.manifest.num_classes;
        for (file, fm) in [
            (TRAIN_FEATURES, &self.train.features),
            (VAL_FEATURES, &self.val.features),
            (TEST_FEATURES, &self.test.features),
        ] {
            if fm.dim() != d {
                return Err(Error::DimensionMismatch {
                    file: file.into(),
                    expected: d,
                    found: fm.dim(),
                });
            }
        }
        for (file, lm) in [
            (VAL_LOGITS, &self.val.logits),
            (TEST_LOGITS, &self.test.logits),
        ] {
            if lm.classes() != c {
                return Err(Error::DimensionMismatch {
                    file: file.into(),
                    expected: c,
                    found: lm.classes(),
                });
            }
        }
        let rows = [
            (
                TRAIN_LABELS,
                self.train.features.n(),
                self.train.labels.len(),
            ),
            (VAL_LOGITS, self.val.features.n(), self.val.logits.n()),
            (VAL_LABELS, self.val.features.n(), self.val.labels.len()),
            (TEST_LOGITS, self.test.features.n(), self.test.logits.n()),
        ];
        for (file, expected, found) in rows {
            if expected != found {
                return Err(Error::ShapeMismatch {
                    file: file.into(),
                    reason: format!("{found} rows, expected {expected}"),
                });
            }
        }
        if let Some(labels) = &self.test.labels {
            if labels.len() != self.test.features.n() {
                return Err(Error::ShapeMismatch {
                    file: TEST_LABELS.into(),
                    reason: format!("{} rows, expected {}", labels.len(), self.test.features.n()),
                });
            }
        }
        for (file, labels) in [
            (TRAIN_LABELS, Some(&self.train.labels)),
            (VAL_LABELS, Some(&self.val.labels)),
            (TEST_LABELS, self.test.labels.as_ref()),
        ] {
            let Some(labels) = labels else { continue };
            if let Some(index) = labels.as_slice().iter().position(|&l| l >= c) {
                return Err(Error::LabelOutOfRange {
                    file: file.into(),
                    index,
                    value: labels.as_slice()[index] as i64,
                    classes: c,
                });
            }
        }
        Ok(())
    }

    /// Test-set accuracy of the bundle's logits, if test labels are present.
    pub fn test_accuracy(&self) -> Option<f64> {
        let labels = self.test.labels.as_ref()?;
        let pred = self.test.logits.argmax();
        let correct = pred
            .iter()
            .zip(labels.as_slice())
            .filter(|(p, l)| p == l)
            .count();
        Some(correct as f64 / pred.len() as f64)
    }
}

fn read_npy(dir: &Path, file: &str) -> Result<NpyArray> {
    let path = dir.join(file);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile {
                file: path.display().to_string(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    npy::parse(&bytes).map_err(|reason| Error::Npy {
        file: file.into(),
        reason,
    })
}

fn matrix_from_npy(arr: NpyArray, file: &str) -> Result<(usize, usize, Vec<f32>)> {
    let [rows, cols] = arr.shape[..] else {
        return Err(Error::ShapeMismatch {
            file: file.into(),
            reason: format!("expected a 2-d array, found shape {:?}", arr.shape),
        });
    };
    let NpyData::F32(data) = arr.data else {
        return Err(Error::Npy {
            file: file.into(),
            reason: "expected dtype <f4".into(),
        });
    };
    if rows == 0 || cols == 0 {
        return Err(Error::ShapeMismatch {
            file: file.into(),
            reason: format!("shape ({rows}, {cols}) has an empty axis"),
        });
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            file: file.into(),
            index,
        });
    }
    Ok((rows, cols, data))
}

pub(crate) fn load_features(dir: &Path, file: &str, dim: usize) -> Result<FeatureMatrix> {
    let (rows, cols, data) = matrix_from_npy(read_npy(dir, file)?, file)?;
    if cols != dim {
        return Err(Error::DimensionMismatch {
            file: file.into(),
            expected: dim,
            found: cols,
        });
    }
    Ok(FeatureMatrix(Dense { rows, cols, data }))
}

fn load_logits(
    dir: &Path,
    file: &str,
    classes: usize,
    rows_expected: usize,
) -> Result<LogitMatrix> {
    let (rows, cols, data) = matrix_from_npy(read_npy(dir, file)?, file)?;
    if cols != classes {
        return Err(Error::DimensionMismatch {
            file: file.into(),
            expected: classes,
            found: cols,
        });
    }
    if rows != rows_expected {
        return Err(Error::ShapeMismatch {
            file: file.into(),
            reason: format!("{rows} rows, expected {rows_expected}"),
        });
    }
    Ok(LogitMatrix(Dense { rows, cols, data }))
}

fn load_labels(
    dir: &Path,
    file: &str,
    classes: usize,
    rows_expected: usize,
) -> Result<LabelVector> {
    let arr = read_npy(dir, file)?;
    let [rows] = arr.shape[..] else {
        return Err(Error::ShapeMismatch {
            file: file.into(),
            reason: format!("expected a 1-d array, found shape {:?}", arr.shape),
        });
    };
    let NpyData::I64(raw) = arr.data else {
        return Err(Error::Npy {
            file: file.into(),
            reason: "expected an integer dtype".into(),
        });
    };
    if rows != rows_expected {
        return Err(Error::ShapeMismatch {
            file: file.into(),
            reason: format!("{rows} rows, expected {rows_expected}"),
        });
    }
    LabelVector::from_i64(&raw, classes, file)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile {
                file: path.display().to_string(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        file: MANIFEST.into(),
        reason: e.to_string(),
    })
}

/// Raw manifest JSON, including keys the typed [`Manifest`] ignores.
pub fn load_manifest_value(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        file: MANIFEST.into(),
        reason: e.to_string(),
    })
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<SplitBundle> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let (d, c) = (manifest.dim, manifest.num_classes);
    if c < 2 {
        return Err(Error::Manifest {
            file: MANIFEST.into(),
            reason: format!("num_classes must be at least 2, found {c}"),
        });
    }

    let train_features = load_features(dir, TRAIN_FEATURES, d)?;
    let train_labels = load_labels(dir, TRAIN_LABELS, c, train_features.n())?;

    let val_features = load_features(dir, VAL_FEATURES, d)?;
    let val_logits = load_logits(dir, VAL_LOGITS, c, val_features.n())?;
    let val_labels = load_labels(dir, VAL_LABELS, c, val_features.n())?;

    let test_features = load_features(dir, TEST_FEATURES, d)?;
    let test_logits = load_logits(dir, TEST_LOGITS, c, test_features.n())?;
    let test_labels = if dir.join(TEST_LABELS).exists() {
        Some(load_labels(dir, TEST_LABELS, c, test_features.n())?)
    } else {
        None
    };

    let bundle = SplitBundle {
        manifest,
        train: TrainSplit {
            features: train_features,
            labels: train_labels,
        },
        val: ValSplit {
            features: val_features,
            logits: val_logits,
            labels: val_labels,
        },
        test: TestSplit {
            features: test_features,
            logits: test_logits,
            labels: test_labels,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}

pub(crate) fn write_npy(dir: &Path, file: &str, array: &NpyArray) -> Result<()> {
    let mut buf = Vec::new();
    let path = dir.join(file);
    npy::write(&mut buf, array).map_err(|e| Error::io(&path, e))?;
    fsutil::write_atomic(&path, &buf)
}

fn features_npy(fm: &FeatureMatrix) -> NpyArray {
    NpyArray::f32(vec![fm.n(), fm.dim()], fm.as_slice().to_vec())
}

fn logits_npy(lm: &LogitMatrix) -> NpyArray {
    NpyArray::f32(vec![lm.n(), lm.classes()], lm.as_slice().to_vec())
}

fn labels_npy(lv: &LabelVector) -> NpyArray {
    NpyArray::i64(
        vec![lv.len()],
        lv.as_slice().iter().map(|&l| l as i64).collect(),
    )
}

pub(crate) fn save_features(dir: &Path, file: &str, fm: &FeatureMatrix) -> Result<()> {
    write_npy(dir, file, &features_npy(fm))
}

/// Writes `bundle` to `dir`, creating the directory if needed. Each file is
/// written atomically. A stale `test_labels.npy` is removed when the bundle
/// carries no test labels.
pub fn save_bundle(bundle: &SplitBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fsutil::create_dir(dir)?;

    write_npy(dir, TRAIN_FEATURES, &features_npy(&bundle.train.features))?;
    write_npy(dir, TRAIN_LABELS, &labels_npy(&bundle.train.labels))?;
    write_npy(dir, VAL_FEATURES, &features_npy(&bundle.val.features))?;
    write_npy(dir, VAL_LOGITS, &logits_npy(&bundle.val.logits))?;
    write_npy(dir, VAL_LABELS, &labels_npy(&bundle.val.labels))?;
    write_npy(dir, TEST_FEATURES, &features_npy(&bundle.test.features))?;
    write_npy(dir, TEST_LOGITS, &logits_npy(&bundle.test.logits))?;
    match &bundle.test.labels {
        Some(labels) => write_npy(dir, TEST_LABELS, &labels_npy(labels))?,
        None => {
            let path = dir.join(TEST_LABELS);
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }

    let manifest = serde_json::to_string_pretty(&bundle.manifest).expect("manifest serializes");
    fsutil::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}
