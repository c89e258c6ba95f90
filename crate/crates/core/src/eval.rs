//! Empirical robustness protocols and counterfactual quality metrics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{loo_subset_with_fraction, DataError, Samples, SplitDataset};
use crate::model::{JointModel, ModelError};
use crate::train::{finetune, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fleet needs at least 2 models, got {0}")]
    FleetTooSmall(usize),
    #[error("schema mismatch between fleet members")]
    Schema,
    #[error("no training points for nearest-neighbour lookup")]
    EmptyTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variation {
    Ri,
    Loo,
    Ds,
}

impl std::str::FromStr for Variation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ri" => Ok(Variation::Ri),
            "loo" => Ok(Variation::Loo),
            "ds" => Ok(Variation::Ds),
            other => Err(format!("unknown variation `{other}` (ri, loo, ds)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSpec {
    pub variation: Variation,
    pub fleet_size: usize,
    pub loo_drop_fraction: f64,
    pub ds_finetune_epochs: usize,
    pub seed: u64,
    /// Every member uses `seed` instead of `seed + k`.
    pub same_seed: bool,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            variation: Variation::Ri,
            fleet_size: 10,
            loo_drop_fraction: 0.01,
            ds_finetune_epochs: 20,
            seed: 0,
            same_seed: false,
        }
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

/// `matrix[i][j]`: fraction of model `i`'s valid counterfactuals on which
/// model `j` agrees with model `i`. The diagonal is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatrix {
    pub matrix: Vec<Vec<f64>>,
    /// Valid counterfactuals per source model.
    pub valid_counts: Vec<usize>,
    pub summary: Stat,
}

impl PairMatrix {
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.matrix.len();
        let mut v = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    v.push(self.matrix[i][j]);
                }
            }
        }
        v
    }
}

/// Counterfactuals of `model` on `samples` that are valid on the model
/// itself, paired with the label the model gives them.
fn valid_cfs(model: &JointModel, samples: &Samples) -> Result<Vec<(Vec<f64>, u8)>> {
    let mut out = Vec::new();
    for x in &samples.features {
        let xp = model.generate_cf(x)?;
        let label = model.predict(&xp)?;
        if label != model.predict(x)? {
            out.push((xp, label));
        }
    }
    Ok(out)
}

fn agreement(model: &JointModel, cfs: &[(Vec<f64>, u8)]) -> Result<f64> {
    if cfs.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for (xp, label) in cfs {
        hit += usize::from(model.predict(xp)? == *label);
    }
    Ok(hit as f64 / cfs.len() as f64)
}

pub fn cross_model_validity(fleet: &[JointModel], samples: &Samples) -> Result<PairMatrix> {
    if fleet.len() < 2 {
        return Err(EvalError::FleetTooSmall(fleet.len()));
    }
    let names = fleet[0].schema.column_names();
    if fleet.iter().any(|m| m.schema.column_names() != names) {
        return Err(EvalError::Schema);
    }
    let n = fleet.len();
    let mut matrix = vec![vec![1.0; n]; n];
    let mut valid_counts = Vec::with_capacity(n);
    for i in 0..n {
        let cfs = valid_cfs(&fleet[i], samples)?;
        valid_counts.push(cfs.len());
        for j in 0..n {
            if i != j {
                matrix[i][j] = agreement(&fleet[j], &cfs)?;
            }
        }
    }
    let mut pm = PairMatrix {
        matrix,
        valid_counts,
        summary: Stat { mean: 0.0, std: 0.0 },
    };
    pm.summary = Stat::of(&pm.off_diagonal());
    Ok(pm)
}

/// Fraction of `original`'s valid counterfactuals on which `shifted`
/// gives the same label.
pub fn ds_validity(original: &JointModel, shifted: &JointModel, samples: &Samples) -> Result<f64> {
    if original.schema.column_names() != shifted.schema.column_names() {
        return Err(EvalError::Schema);
    }
    agreement(shifted, &valid_cfs(original, samples)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub proximity: f64,
    pub sparsity: f64,
    pub ddm: f64,
}

pub const SPARSITY_TOL: f64 = 1e-9;

pub fn proximity(x: &[f64], x_prime: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().zip(x_prime).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
}

pub fn sparsity(x: &[f64], x_prime: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let changed = x.iter().zip(x_prime).filter(|(a, b)| (*a - *b).abs() > SPARSITY_TOL).count();
    changed as f64 / x.len() as f64
}

/// ℓ1 distance from `x_prime` to its nearest training point, per feature.
pub fn ddm(x_prime: &[f64], train: &Samples) -> Result<f64> {
    if train.is_empty() {
        return Err(EvalError::EmptyTrain);
    }
    let best = train
        .features
        .iter()
        .map(|t| proximity(t, x_prime))
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

pub fn quality_metrics(x: &[f64], x_prime: &[f64], train: &Samples) -> Result<Quality> {
    if x.len() != x_prime.len() {
        return Err(ModelError::Dimension {
            expected: x.len(),
            got: x_prime.len(),
        }
        .into());
    }
    Ok(Quality {
        proximity: proximity(x, x_prime),
        sparsity: sparsity(x, x_prime),
        ddm: ddm(x_prime, train)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub proximity: Stat,
    pub sparsity: Stat,
    pub ddm: Stat,
}

pub fn quality_summary(model: &JointModel, samples: &Samples, train: &Samples) -> Result<QualitySummary> {
    let mut p = Vec::with_capacity(samples.len());
    let mut s = Vec::with_capacity(samples.len());
    let mut d = Vec::with_capacity(samples.len());
    for x in &samples.features {
        let q = quality_metrics(x, &model.generate_cf(x)?, train)?;
        p.push(q.proximity);
        s.push(q.sparsity);
        d.push(q.ddm);
    }
    Ok(QualitySummary {
        proximity: Stat::of(&p),
        sparsity: Stat::of(&s),
        ddm: Stat::of(&d),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub n_cfs: usize,
    pub repeats: usize,
    /// Seconds per counterfactual.
    pub mean: f64,
    /// Absent for a single repeat.
    pub std: Option<f64>,
}

/// Generates `n_cfs` counterfactuals (cycling over `samples`) `repeats`
/// times and reports per-counterfactual wall time.
pub fn timing_benchmark(model: &JointModel, samples: &Samples, n_cfs: usize, repeats: usize) -> Result<Timing> {
    let repeats = repeats.max(1);
    let mut per = Vec::with_capacity(repeats);
    let mut sink = 0.0;
    for _ in 0..repeats {
        let start = Instant::now();
        for k in 0..n_cfs {
            let x = &samples.features[k % samples.len().max(1)];
            sink += model.generate_cf(x)?[0];
        }
        per.push(start.elapsed().as_secs_f64() / n_cfs.max(1) as f64);
    }
    std::hint::black_box(sink);
    let s = Stat::of(&per);
    Ok(Timing {
        n_cfs,
        repeats,
        mean: s.mean,
        std: (repeats > 1).then_some(s.std),
    })
}

impl FleetSpec {
    pub fn member_seed(&self, k: usize) -> u64 {
        if self.same_seed {
            self.seed
        } else {
            self.seed.wrapping_add(k as u64)
        }
    }
}

/// Trains one model per fleet member. RI varies the training seed; LOO
/// keeps it and varies the removed rows.
pub fn train_fleet(data: &SplitDataset, config: &TrainConfig, fleet: &FleetSpec) -> Result<Vec<JointModel>> {
    (0..fleet.fleet_size)
        .into_par_iter()
        .map(|k| {
            let member_seed = fleet.member_seed(k);
            Ok(match fleet.variation {
                Variation::Ri | Variation::Ds => {
                    let c = TrainConfig {
                        seed: member_seed,
                        ..config.clone()
                    };
                    train(data, &c)?.0
                }
                Variation::Loo => {
                    let subset = loo_subset_with_fraction(data, fleet.loo_drop_fraction, member_seed)?;
                    train(&subset, config)?.0
                }
            })
        })
        .collect()
}

/// Per-trial DS validity: train on `original` with seed `seed + t`,
/// finetune on `shifted`, and compare on `original.test`.
pub fn ds_trials(original: &SplitDataset, shifted: &SplitDataset, config: &TrainConfig, fleet: &FleetSpec) -> Result<Vec<f64>> {
    (0..fleet.fleet_size)
        .into_par_iter()
        .map(|t| {
            let c = TrainConfig {
                seed: fleet.member_seed(t),
                ..config.clone()
            };
            let (model, _) = train(original, &c)?;
            let moved = finetune(&model, shifted, fleet.ds_finetune_epochs, &c)?;
            ds_validity(&model, &moved, &original.test)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub variation: Variation,
    pub fleet_size: usize,
    pub validity: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PairMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trials: Vec<f64>,
    pub quality: QualitySummary,
}

/// Runs the fleet protocol named by `fleet.variation`. `shifted` is
/// required for DS.
pub fn run_protocol(
    label: &str,
    data: &SplitDataset,
    shifted: Option<&SplitDataset>,
    config: &TrainConfig,
    fleet: &FleetSpec,
) -> Result<EvalReport> {
    let (validity, pairs, trials, reference) = match fleet.variation {
        Variation::Ds => {
            let shifted = shifted.ok_or_else(|| {
                EvalError::Data(DataError::SchemaMismatch("DS protocol needs a shifted dataset".into()))
            })?;
            let trials = ds_trials(data, shifted, config, fleet)?;
            let c = TrainConfig {
                seed: fleet.seed,
                ..config.clone()
            };
            (Stat::of(&trials), None, trials, train(data, &c)?.0)
        }
        _ => {
            if fleet.fleet_size < 2 {
                return Err(EvalError::FleetTooSmall(fleet.fleet_size));
            }
            let models = train_fleet(data, config, fleet)?;
            let pm = cross_model_validity(&models, &data.test)?;
            (pm.summary, Some(pm), Vec::new(), models.into_iter().next().expect("non-empty"))
        }
    };
    Ok(EvalReport {
        label: label.to_string(),
        variation: fleet.variation,
        fleet_size: fleet.fleet_size,
        validity,
        pairs,
        trials,
        quality: quality_summary(&reference, &data.test, &data.train)?,
    })
}

/// One CSV row per report with `mean (std)` cells.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("label,variation,validity,proximity,sparsity,ddm\n");
    let cell = |s: &Stat| format!("{:.4} ({:.4})", s.mean, s.std);
    for r in reports {
        let v = match r.variation {
            Variation::Ri => "ri",
            Variation::Loo => "loo",
            Variation::Ds => "ds",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            v,
            cell(&r.validity),
            cell(&r.quality.proximity),
            cell(&r.quality.sparsity),
            cell(&r.quality.ddm)
        ));
    }
    out
}
