//! Tabular data ingestion and preprocessing.
//!
//! Continuous columns are min-max scaled into `[0, 1]` and categorical
//! columns are one-hot encoded, with all scaling parameters fitted on the
//! training split only. Every [`SplitDataset`] carries a [`TransformLog`]
//! that is sufficient to rebuild the exact same matrices from the source
//! file (see [`replay_csv`]).

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid schema spec: {0}")]
    SchemaSpec(String),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("non-numeric value {value:?} in continuous column `{column}` (row {row})")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("label column is constant; the task is degenerate")]
    ConstantLabel,
    #[error("label value {0} is not binary; set label_binarize = \"median\"")]
    NonBinaryLabel(f64),
    #[error("dataset too small: {have} training rows, need at least {need}")]
    TooSmall { have: usize, need: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("malformed cache file: {0}")]
    Cache(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// Min/max fitted on the training split.
    Continuous { min: f64, max: f64 },
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Ordered feature layout of the preprocessed matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureDescriptor>,
    pub label: String,
}

/// A contiguous slice of the expanded feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureGroup {
    Continuous(usize),
    OneHot { start: usize, len: usize },
}

impl FeatureSchema {
    /// Schema of already-scaled continuous features named `names`.
    pub fn continuous(names: &[&str]) -> Self {
        Self {
            features: names
                .iter()
                .map(|n| FeatureDescriptor {
                    name: n.to_string(),
                    kind: FeatureKind::Continuous { min: 0.0, max: 1.0 },
                })
                .collect(),
            label: "label".into(),
        }
    }

    /// Width after one-hot expansion.
    pub fn width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Continuous { .. } => 1,
                FeatureKind::Categorical { categories } => categories.len(),
            })
            .sum()
    }

    pub fn groups(&self) -> Vec<FeatureGroup> {
        let mut out = Vec::with_capacity(self.features.len());
        let mut at = 0;
        for f in &self.features {
            match &f.kind {
                FeatureKind::Continuous { .. } => {
                    out.push(FeatureGroup::Continuous(at));
                    at += 1;
                }
                FeatureKind::Categorical { categories } => {
                    out.push(FeatureGroup::OneHot {
                        start: at,
                        len: categories.len(),
                    });
                    at += categories.len();
                }
            }
        }
        out
    }

    /// Expanded column names (`name` or `name=category`).
    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        for f in &self.features {
            match &f.kind {
                FeatureKind::Continuous { .. } => out.push(f.name.clone()),
                FeatureKind::Categorical { categories } => {
                    out.extend(categories.iter().map(|c| format!("{}={}", f.name, c)))
                }
            }
        }
        out
    }
}

/// Rows of a split. `ids` are source row numbers (0-based, data rows only).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub ids: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn push(&mut self, id: usize, features: Vec<f64>, label: u8) {
        self.ids.push(id);
        self.features.push(features);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &Samples) {
        self.ids.extend_from_slice(&other.ids);
        self.features.extend(other.features.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
    }

    /// Keeps the rows at the given positions, in order.
    pub fn select(&self, positions: &[usize]) -> Samples {
        let mut out = Samples::default();
        for &p in positions {
            out.push(self.ids[p], self.features[p].clone(), self.labels[p]);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    /// Source rows dropped because of missing cells.
    pub dropped_rows: Vec<usize>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// Threshold used for median binarization, if any.
    pub label_threshold: Option<f64>,
    /// Training rows removed by a leave-one-out subset.
    pub removed_rows: Vec<usize>,
    pub warnings: Vec<String>,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub log: TransformLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub schema: FeatureSchema,
    pub train: Samples,
    pub test: Samples,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelBinarize {
    /// Labels must already be 0/1.
    #[default]
    None,
    /// 1 iff value > median of the training split.
    Median,
}

/// TOML schema document for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSpec {
    pub label: String,
    #[serde(default)]
    pub label_binarize: LabelBinarize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub columns: Vec<ColumnSpec>,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl SchemaSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SchemaSpec =
            toml::from_str(text).map_err(|e| DataError::SchemaSpec(e.to_string()))?;
        if !(0.0..1.0).contains(&spec.test_fraction) {
            return Err(DataError::SchemaSpec(format!(
                "test_fraction {} not in [0, 1)",
                spec.test_fraction
            )));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

struct RawTable {
    /// Per data row: the declared columns' cells, then the label cell.
    rows: Vec<(usize, Vec<String>)>,
    dropped: Vec<usize>,
}

fn read_raw(path: &Path, spec: &SchemaSpec) -> Result<RawTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let mut positions = spec
        .columns
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;
    positions.push(find(&spec.label)?);

    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let cells: Vec<String> = positions
            .iter()
            .map(|&p| record.get(p).unwrap_or("").trim().to_string())
            .collect();
        if cells.iter().any(String::is_empty) {
            dropped.push(row_no);
        } else {
            rows.push((row_no, cells));
        }
    }
    Ok(RawTable { rows, dropped })
}

fn parse_num(cell: &str, column: &str, row: usize) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::NonNumeric {
            column: column.to_string(),
            row,
            value: cell.to_string(),
        })
}

fn fit_schema(spec: &SchemaSpec, train: &[&(usize, Vec<String>)]) -> Result<FeatureSchema> {
    let mut features = Vec::with_capacity(spec.columns.len());
    for (c, col) in spec.columns.iter().enumerate() {
        let kind = match col.kind {
            ColumnKind::Continuous => {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for (row, cells) in train {
                    let v = parse_num(&cells[c], &col.name, *row)?;
                    min = min.min(v);
                    max = max.max(v);
                }
                if train.is_empty() {
                    (min, max) = (0.0, 1.0);
                }
                FeatureKind::Continuous { min, max }
            }
            ColumnKind::Categorical => {
                let set: BTreeSet<&str> = train.iter().map(|(_, cells)| cells[c].as_str()).collect();
                FeatureKind::Categorical {
                    categories: set.into_iter().map(str::to_string).collect(),
                }
            }
        };
        features.push(FeatureDescriptor {
            name: col.name.clone(),
            kind,
        });
    }
    Ok(FeatureSchema {
        features,
        label: spec.label.clone(),
    })
}

/// Encodes one row with a fitted schema. Unseen categories become an
/// all-zero group and are reported through `warnings`.
fn encode_row(
    schema: &FeatureSchema,
    row: usize,
    cells: &[String],
    warnings: &mut Vec<String>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(schema.width());
    for (f, cell) in schema.features.iter().zip(cells) {
        match &f.kind {
            FeatureKind::Continuous { min, max } => {
                let v = parse_num(cell, &f.name, row)?;
                let scaled = if max > min { (v - min) / (max - min) } else { 0.0 };
                out.push(scaled.clamp(0.0, 1.0));
            }
            FeatureKind::Categorical { categories } => {
                let hit = categories.iter().position(|c| c == cell);
                if hit.is_none() {
                    let msg = format!("row {row}: unseen category {cell:?} in `{}`", f.name);
                    warn!("{msg}");
                    warnings.push(msg);
                }
                out.extend((0..categories.len()).map(|k| if Some(k) == hit { 1.0 } else { 0.0 }));
            }
        }
    }
    Ok(out)
}

/// Median binarization: 1 iff value > median of `train`.
pub fn binarize_label(train: &[f64], test: &[f64]) -> Result<(Vec<u8>, Vec<u8>, f64)> {
    let mut sorted = train.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (Some(first), Some(last)) = (sorted.first(), sorted.last()) else {
        return Err(DataError::ConstantLabel);
    };
    if first == last {
        return Err(DataError::ConstantLabel);
    }
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let bin = |v: &[f64]| v.iter().map(|&x| u8::from(x > median)).collect();
    Ok((bin(train), bin(test), median))
}

fn labels_from(values: &[f64]) -> Result<Vec<u8>> {
    values
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(DataError::NonBinaryLabel(v))
            }
        })
        .collect()
}

/// Loads a CSV file, fits preprocessing on a seeded train split and
/// returns both splits.
pub fn load_csv(path: &Path, spec: &SchemaSpec, seed: u64) -> Result<SplitDataset> {
    let raw = read_raw(path, spec)?;
    let n = raw.rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let mut test_pos = order[..n_test].to_vec();
    let mut train_pos = order[n_test..].to_vec();
    test_pos.sort_unstable();
    train_pos.sort_unstable();

    let train_raw: Vec<_> = train_pos.iter().map(|&p| &raw.rows[p]).collect();
    let schema = fit_schema(spec, &train_raw)?;

    let log = TransformLog {
        dropped_rows: raw.dropped.clone(),
        train_rows: train_pos.iter().map(|&p| raw.rows[p].0).collect(),
        test_rows: test_pos.iter().map(|&p| raw.rows[p].0).collect(),
        ..TransformLog::default()
    };
    build_split(path, spec, &raw, schema, log, seed)
}

/// Rebuilds a dataset from its source file using the recorded schema,
/// split and label threshold instead of refitting.
pub fn replay_csv(path: &Path, spec: &SchemaSpec, recorded: &SplitDataset) -> Result<SplitDataset> {
    let raw = read_raw(path, spec)?;
    let mut log = recorded.provenance.log.clone();
    log.warnings.clear();
    log.steps.clear();
    let mut out = build_split(
        path,
        spec,
        &raw,
        recorded.schema.clone(),
        log,
        recorded.provenance.seed,
    )?;
    if let Some(t) = recorded.provenance.log.label_threshold {
        // Labels follow the recorded threshold, not a refit median.
        let relabel = |s: &mut Samples| -> Result<()> {
            for (k, id) in s.ids.iter().enumerate() {
                let (_, cells) = raw.rows.iter().find(|(r, _)| r == id).expect("row present");
                let v = parse_num(cells.last().expect("label cell"), &spec.label, *id)?;
                s.labels[k] = u8::from(v > t);
            }
            Ok(())
        };
        relabel(&mut out.train)?;
        relabel(&mut out.test)?;
        out.provenance.log.label_threshold = Some(t);
    }
    let removed: BTreeSet<usize> = recorded.provenance.log.removed_rows.iter().copied().collect();
    if !removed.is_empty() {
        let keep: Vec<usize> = (0..out.train.len())
            .filter(|&k| !removed.contains(&out.train.ids[k]))
            .collect();
        out.train = out.train.select(&keep);
    }
    Ok(out)
}

fn build_split(
    path: &Path,
    spec: &SchemaSpec,
    raw: &RawTable,
    schema: FeatureSchema,
    mut log: TransformLog,
    seed: u64,
) -> Result<SplitDataset> {
    let by_id = |id: usize| raw.rows.iter().find(|(r, _)| *r == id);
    let mut warnings = Vec::new();
    let mut encode = |ids: &[usize]| -> Result<(Samples, Vec<f64>)> {
        let mut s = Samples::default();
        let mut label_values = Vec::with_capacity(ids.len());
        for &id in ids {
            let (_, cells) = by_id(id).ok_or_else(|| {
                DataError::SchemaMismatch(format!("row {id} missing from source"))
            })?;
            let (feature_cells, label_cell) = cells.split_at(cells.len() - 1);
            let x = encode_row(&schema, id, feature_cells, &mut warnings)?;
            label_values.push(parse_num(&label_cell[0], &spec.label, id)?);
            s.push(id, x, 0);
        }
        Ok((s, label_values))
    };
    let (mut train, train_y) = encode(&log.train_rows.clone())?;
    let (mut test, test_y) = encode(&log.test_rows.clone())?;

    match spec.label_binarize {
        LabelBinarize::Median => {
            let (a, b, t) = binarize_label(&train_y, &test_y)?;
            train.labels = a;
            test.labels = b;
            log.label_threshold = Some(t);
            log.steps.push(format!("binarize label at train median {t}"));
        }
        LabelBinarize::None => {
            train.labels = labels_from(&train_y)?;
            test.labels = labels_from(&test_y)?;
        }
    }
    log.steps.insert(
        0,
        format!(
            "read {} rows, dropped {} with missing cells, split {}/{} (seed {seed})",
            raw.rows.len() + raw.dropped.len(),
            raw.dropped.len(),
            train.len(),
            test.len()
        ),
    );
    log.warnings.extend(warnings);
    Ok(SplitDataset {
        schema,
        train,
        test,
        provenance: Provenance {
            source: path.display().to_string(),
            seed,
            log,
        },
    })
}

/// Removes `⌈0.01·n⌉` seeded training rows; the test split is untouched.
pub fn make_loo_subset(dataset: &SplitDataset, seed: u64) -> Result<SplitDataset> {
    loo_subset_with_fraction(dataset, 0.01, seed)
}

pub fn loo_subset_with_fraction(dataset: &SplitDataset, fraction: f64, seed: u64) -> Result<SplitDataset> {
    const MIN_ROWS: usize = 100;
    let n = dataset.train.len();
    if n < MIN_ROWS {
        return Err(DataError::TooSmall {
            have: n,
            need: MIN_ROWS,
        });
    }
    let k = (fraction * n as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, k).into_iter().collect();
    let keep: Vec<usize> = (0..n).filter(|p| !drop.contains(p)).collect();
    let mut out = dataset.clone();
    out.train = dataset.train.select(&keep);
    let removed: Vec<usize> = drop.iter().map(|&p| dataset.train.ids[p]).collect();
    out.provenance
        .log
        .steps
        .push(format!("leave-one-out: removed {k} training rows (seed {seed})"));
    out.provenance.log.removed_rows.extend(removed);
    Ok(out)
}

/// Two-Gaussian-blob task with an optional third cluster for
/// distribution-shift experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsSpec {
    /// Points in the two base blobs (split evenly between classes).
    pub n: usize,
    pub center0: [f64; 2],
    pub center1: [f64; 2],
    pub std: f64,
    /// Extra training points of the shift cluster, labelled 1.
    pub shift_points: usize,
    /// Extra test points of the shift cluster.
    pub shift_test_points: usize,
    pub shift_center: [f64; 2],
    pub shift_std: f64,
    pub test_fraction: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            n: 500,
            center0: [-1.0, -1.0],
            center1: [1.0, 1.0],
            std: 0.6,
            shift_points: 100,
            shift_test_points: 25,
            shift_center: [-1.4, 0.4],
            shift_std: 0.35,
            test_fraction: 0.2,
        }
    }
}

fn gaussian_points(rng: &mut ChaCha8Rng, n: usize, center: [f64; 2], std: f64) -> Vec<[f64; 2]> {
    let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
    (0..n)
        .map(|_| [center[0] + normal.sample(rng), center[1] + normal.sample(rng)])
        .collect()
}

/// Returns `(original, shifted)`. The shifted training split is the
/// original one plus the shift cluster relabelled to class 1; both share
/// one schema fitted on the union of their raw training points.
pub fn make_synthetic_shift(spec: &BlobsSpec, seed: u64) -> (SplitDataset, SplitDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = spec.n / 2;
    let n1 = spec.n - n0;
    let mut base: Vec<([f64; 2], u8)> = Vec::with_capacity(spec.n);
    base.extend(gaussian_points(&mut rng, n0, spec.center0, spec.std).into_iter().map(|p| (p, 0)));
    base.extend(gaussian_points(&mut rng, n1, spec.center1, spec.std).into_iter().map(|p| (p, 1)));
    let shift_train = gaussian_points(&mut rng, spec.shift_points, spec.shift_center, spec.shift_std);
    let shift_test = gaussian_points(&mut rng, spec.shift_test_points, spec.shift_center, spec.shift_std);

    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let n_test = (spec.n as f64 * spec.test_fraction).round() as usize;
    let mut test_pos = order[..n_test].to_vec();
    let mut train_pos = order[n_test..].to_vec();
    test_pos.sort_unstable();
    train_pos.sort_unstable();

    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in train_pos.iter().map(|&i| &base[i].0).chain(shift_train.iter()) {
        for d in 0..2 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    let scale = |p: &[f64; 2]| -> Vec<f64> {
        (0..2)
            .map(|d| {
                if max[d] > min[d] {
                    ((p[d] - min[d]) / (max[d] - min[d])).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    };
    let schema = FeatureSchema {
        features: (0..2)
            .map(|d| FeatureDescriptor {
                name: format!("x{d}"),
                kind: FeatureKind::Continuous {
                    min: min[d],
                    max: max[d],
                },
            })
            .collect(),
        label: "label".into(),
    };

    let mut train = Samples::default();
    for &i in &train_pos {
        train.push(i, scale(&base[i].0), base[i].1);
    }
    let mut test = Samples::default();
    for &i in &test_pos {
        test.push(i, scale(&base[i].0), base[i].1);
    }
    let log = TransformLog {
        train_rows: train.ids.clone(),
        test_rows: test.ids.clone(),
        steps: vec![format!(
            "two-blob synthetic task: {} points, split {}/{}",
            spec.n,
            train.len(),
            test.len()
        )],
        ..TransformLog::default()
    };
    let original = SplitDataset {
        schema: schema.clone(),
        train: train.clone(),
        test: test.clone(),
        provenance: Provenance {
            source: "synthetic:blobs".into(),
            seed,
            log,
        },
    };

    let mut shifted = original.clone();
    let mut next_id = spec.n;
    for p in &shift_train {
        shifted.train.push(next_id, scale(p), 1);
        next_id += 1;
    }
    for p in &shift_test {
        shifted.test.push(next_id, scale(p), 1);
        next_id += 1;
    }
    shifted.provenance.source = "synthetic:blobs+shift".into();
    shifted.provenance.log.train_rows = shifted.train.ids.clone();
    shifted.provenance.log.test_rows = shifted.test.ids.clone();
    shifted.provenance.log.steps.push(format!(
        "added shift cluster: {} train / {} test points relabelled to class 1",
        spec.shift_points, spec.shift_test_points
    ));
    (original, shifted)
}

/// The unshifted two-blob dataset.
pub fn make_blobs(spec: &BlobsSpec, seed: u64) -> SplitDataset {
    make_synthetic_shift(spec, seed).0
}

const CACHE_MAGIC: &[u8; 4] = b"CCFM";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheSidecar {
    format_version: u32,
    rows: usize,
    cols: usize,
    column_names: Vec<String>,
    ids: Vec<usize>,
    labels: Vec<u8>,
    schema: FeatureSchema,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Writes a little-endian row-major `f64` matrix plus a JSON sidecar
/// (`<path>.json`) holding the schema, ids and labels.
pub fn write_matrix_cache(path: &Path, samples: &Samples, schema: &FeatureSchema) -> Result<()> {
    let cols = schema.width();
    if let Some(row) = samples.features.iter().find(|r| r.len() != cols) {
        return Err(DataError::SchemaMismatch(format!(
            "row width {} vs schema width {cols}",
            row.len()
        )));
    }
    let mut buf = Vec::with_capacity(24 + samples.len() * cols * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for row in &samples.features {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io_err(path))?;
    let sidecar = CacheSidecar {
        format_version: CACHE_VERSION,
        rows: samples.len(),
        cols,
        column_names: schema.column_names(),
        ids: samples.ids.clone(),
        labels: samples.labels.clone(),
        schema: schema.clone(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(io_err(&side))?;
    Ok(())
}

pub fn read_matrix_cache(path: &Path) -> Result<(Samples, FeatureSchema)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    if buf.len() < 24 || &buf[..4] != CACHE_MAGIC {
        return Err(DataError::Cache("bad magic".into()));
    }
    let word = |at: usize| u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(DataError::Cache(format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(16) as usize);
    if buf.len() != 24 + rows * cols * 8 {
        return Err(DataError::Cache("length does not match header".into()));
    }
    let side = sidecar_path(path);
    let sidecar: CacheSidecar =
        serde_json::from_str(&fs::read_to_string(&side).map_err(io_err(&side))?)?;
    if sidecar.rows != rows || sidecar.cols != cols || sidecar.schema.width() != cols {
        return Err(DataError::Cache("sidecar does not match matrix header".into()));
    }
    let mut samples = Samples::default();
    for r in 0..rows {
        let row = (0..cols)
            .map(|c| {
                let at = 24 + (r * cols + c) * 8;
                f64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes"))
            })
            .collect();
        samples.push(sidecar.ids[r], row, sidecar.labels[r]);
    }
    Ok((samples, sidecar.schema))
}

/// Writes preprocessed rows as CSV: `id`, the expanded feature columns,
/// then `label`.
pub fn write_feature_csv<W: Write>(out: W, samples: &Samples, schema: &FeatureSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(schema.column_names());
    header.push("label".into());
    w.write_record(&header)?;
    for k in 0..samples.len() {
        let mut rec = vec![samples.ids[k].to_string()];
        rec.extend(samples.features[k].iter().map(|v| format!("{v:?}")));
        rec.push(samples.labels[k].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| DataError::Io {
        path: "<csv writer>".into(),
        source: e,
    })?;
    Ok(())
}

/// Reads preprocessed rows. The feature columns must match `schema`
/// exactly; `id` and `label` columns are optional.
pub fn read_feature_csv(path: &Path, schema: &FeatureSchema) -> Result<Samples> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let id_col = headers.iter().position(|h| h == "id");
    let label_col = headers.iter().position(|h| h == "label");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != id_col && Some(c) != label_col)
        .collect();
    let names: Vec<&str> = feature_cols.iter().map(|&c| headers[c].as_str()).collect();
    let expected = schema.column_names();
    if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(DataError::SchemaMismatch(format!(
            "columns {names:?} do not match model features {expected:?}"
        )));
    }
    let mut samples = Samples::default();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| rec.get(c).unwrap_or("").trim();
        let id = match id_col {
            Some(c) => cell(c).parse::<usize>().map_err(|_| DataError::NonNumeric {
                column: "id".into(),
                row,
                value: cell(c).into(),
            })?,
            None => row,
        };
        let x = feature_cols
            .iter()
            .map(|&c| parse_num(cell(c), &headers[c], row))
            .collect::<Result<Vec<_>>>()?;
        let label = match label_col {
            Some(c) => labels_from(&[parse_num(cell(c), "label", row)?])?[0],
            None => 0,
        };
        samples.push(id, x, label);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn toy_csv(dir: &Path) -> std::path::PathBuf {
        let mut text = String::from("a,b,y\n");
        for i in 0..10 {
            text.push_str(&format!("{},{},{}\n", i, 100 - 3 * i, i % 2));
        }
        write(dir, "toy.csv", &text)
    }

    fn toy_spec() -> SchemaSpec {
        SchemaSpec::from_toml(
            r#"
label = "y"
[[columns]]
name = "a"
kind = "continuous"
[[columns]]
name = "b"
kind = "continuous"
"#,
        )
        .unwrap()
    }

    #[test]
    fn continuous_csv_splits_eight_two() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_csv(&toy_csv(dir.path()), &toy_spec(), 3).unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.test.len(), 2);
        for row in ds.train.features.iter().chain(&ds.test.features) {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let train: BTreeSet<_> = ds.train.ids.iter().collect();
        assert!(ds.test.ids.iter().all(|i| !train.contains(i)));
    }

    #[test]
    fn categorical_column_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("c,y\n");
        for i in 0..12 {
            text.push_str(&format!("{},{}\n", ["red", "green", "blue"][i % 3], i % 2));
        }
        let p = write(dir.path(), "cat.csv", &text);
        let spec = SchemaSpec::from_toml(
            "label = \"y\"\ntest_fraction = 0.0\n[[columns]]\nname = \"c\"\nkind = \"categorical\"\n",
        )
        .unwrap();
        let ds = load_csv(&p, &spec, 0).unwrap();
        assert_eq!(ds.schema.width(), 3);
        for row in &ds.train.features {
            assert_eq!(row.len(), 3);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn unseen_category_maps_to_zero_group() {
        let schema = FeatureSchema {
            features: vec![FeatureDescriptor {
                name: "c".into(),
                kind: FeatureKind::Categorical {
                    categories: vec!["a".into(), "b".into()],
                },
            }],
            label: "y".into(),
        };
        let mut warnings = Vec::new();
        let row = encode_row(&schema, 7, &["zzz".to_string()], &mut warnings).unwrap();
        assert_eq!(row, vec![0.0, 0.0]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn missing_column_and_non_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", "a,y\n1,0\nx,1\n");
        let spec = SchemaSpec::from_toml(
            "label = \"y\"\ntest_fraction = 0.0\n[[columns]]\nname = \"a\"\nkind = \"continuous\"\n",
        )
        .unwrap();
        assert!(matches!(load_csv(&p, &spec, 0), Err(DataError::NonNumeric { .. })));
        let spec2 = SchemaSpec::from_toml(
            "label = \"y\"\n[[columns]]\nname = \"nope\"\nkind = \"continuous\"\n",
        )
        .unwrap();
        assert!(matches!(load_csv(&p, &spec2, 0), Err(DataError::MissingColumn(_))));
    }

    #[test]
    fn rows_with_missing_cells_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "a,y\n1,0\n,1\n3,1\n");
        let spec = SchemaSpec::from_toml(
            "label = \"y\"\ntest_fraction = 0.0\n[[columns]]\nname = \"a\"\nkind = \"continuous\"\n",
        )
        .unwrap();
        let ds = load_csv(&p, &spec, 0).unwrap();
        assert_eq!(ds.provenance.log.dropped_rows, vec![1]);
        assert_eq!(ds.train.len(), 2);
    }

    #[test]
    fn replay_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_csv(dir.path());
        let ds = load_csv(&path, &toy_spec(), 11).unwrap();
        let again = replay_csv(&path, &toy_spec(), &ds).unwrap();
        assert_eq!(ds.train, again.train);
        assert_eq!(ds.test, again.test);
    }

    #[test]
    fn median_binarization() {
        let (tr, te, t) = binarize_label(&[1.0, 2.0, 3.0, 4.0], &[2.4, 2.6]).unwrap();
        assert_eq!(t, 2.5);
        assert_eq!(tr, vec![0, 0, 1, 1]);
        assert_eq!(te, vec![0, 1]);
        assert!(matches!(
            binarize_label(&[5.0, 5.0, 5.0], &[]),
            Err(DataError::ConstantLabel)
        ));
    }

    #[test]
    fn median_is_fitted_on_train_only() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        let (_, test_labels, _) = binarize_label(&a, &b).unwrap();
        let (swapped_labels, _, _) = binarize_label(&b, &a).unwrap();
        assert_eq!(test_labels, vec![1, 1, 1, 1]);
        // Swapping the splits changes which median is used, so labels change.
        assert_ne!(test_labels, swapped_labels);
    }

    #[test]
    fn loo_removes_one_percent() {
        let spec = BlobsSpec {
            n: 1250,
            ..BlobsSpec::default()
        };
        let ds = make_blobs(&spec, 1);
        assert_eq!(ds.train.len(), 1000);
        let a = make_loo_subset(&ds, 5).unwrap();
        let b = make_loo_subset(&ds, 5).unwrap();
        let c = make_loo_subset(&ds, 6).unwrap();
        assert_eq!(a.train.len(), 990);
        assert_eq!(a.test, ds.test);
        assert_eq!(a, b);
        assert_ne!(a.provenance.log.removed_rows, c.provenance.log.removed_rows);
    }

    #[test]
    fn loo_rejects_small_dataset() {
        let spec = BlobsSpec {
            n: 50,
            ..BlobsSpec::default()
        };
        assert!(matches!(
            make_loo_subset(&make_blobs(&spec, 0), 0),
            Err(DataError::TooSmall { .. })
        ));
    }

    #[test]
    fn synthetic_shift_sizes() {
        let none = BlobsSpec {
            shift_points: 0,
            shift_test_points: 0,
            ..BlobsSpec::default()
        };
        let (o, s) = make_synthetic_shift(&none, 4);
        assert_eq!(o.train, s.train);
        assert_eq!(o.test, s.test);

        let spec = BlobsSpec::default();
        let (o, s) = make_synthetic_shift(&spec, 4);
        assert_eq!(s.train.len(), o.train.len() + 100);
        let ones = |x: &Samples| x.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones(&s.train), ones(&o.train) + 100);
        // Base blobs are balanced; split noise stays small.
        let frac = ones(&o.train) as f64 / o.train.len() as f64;
        assert!((frac - 0.5).abs() < 0.08, "class-1 fraction {frac}");
        for row in s.train.features.iter().chain(&s.test.features) {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn matrix_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_blobs(&BlobsSpec::default(), 2);
        let p = dir.path().join("test.bin");
        write_matrix_cache(&p, &ds.test, &ds.schema).unwrap();
        let (back, schema) = read_matrix_cache(&p).unwrap();
        assert_eq!(back, ds.test);
        assert_eq!(schema, ds.schema);
    }

    #[test]
    fn feature_csv_checks_header() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_blobs(&BlobsSpec::default(), 2);
        let p = dir.path().join("f.csv");
        write_feature_csv(fs::File::create(&p).unwrap(), &ds.test, &ds.schema).unwrap();
        assert_eq!(read_feature_csv(&p, &ds.schema).unwrap(), ds.test);
        let other = FeatureSchema::continuous(&["u", "v"]);
        assert!(matches!(
            read_feature_csv(&p, &other),
            Err(DataError::SchemaMismatch(_))
        ));
    }
}
