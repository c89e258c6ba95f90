//! Alternating training of the classifier and the generator.
//!
//! Each epoch first generates counterfactuals with the current weights,
//! then makes one mini-batch pass over the training split optimizing the
//! classifier on `L_f` (counterfactuals held fixed), then one pass
//! optimizing the generator head on `L_g` (classifier held fixed).

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::bounds::{BoxVars, LayerRadius, MultiplicitySpec, Norm};
use crate::certify::{certify_dataset, rate, CertifyError};
use crate::data::{Samples, SplitDataset};
use crate::losses::{loss_f_tape, loss_g_tape, robust_loss_tape, LossWeights};
use crate::model::{forward_tape, Architecture, JointModel, MlpParams, ModelError};
use crate::simul::SimulError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became NaN in epoch {epoch}, {phase} phase, batch {batch}")]
    NaN {
        epoch: usize,
        phase: &'static str,
        batch: usize,
    },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("empty training split")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simul(#[from] SimulError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Target κ reached at the end of the ramp.
    pub kappa: f64,
    pub norm: Norm,
    /// Fraction of epochs over which κ ramps linearly from 0.
    pub kappa_ramp: f64,
    pub weights: LossWeights,
    pub architecture: Architecture,
    pub seed: u64,
    /// Points of the test split used for per-epoch monitoring.
    pub monitor_points: usize,
    pub finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            kappa: 0.05,
            norm: Norm::Inf,
            kappa_ramp: 0.5,
            weights: LossWeights::default(),
            architecture: Architecture::default(),
            seed: 0,
            monitor_points: 200,
            finetune_epochs: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if !(0.0..=1.0).contains(&self.kappa_ramp) {
            return bad(format!("kappa_ramp must lie in [0, 1], got {}", self.kappa_ramp));
        }
        self.weights.validate().map_err(TrainError::Config)
    }

    /// κ used during `epoch` (0-based).
    pub fn kappa_at(&self, epoch: usize) -> f64 {
        let ramp = (self.epochs as f64 * self.kappa_ramp).floor() as usize;
        if ramp == 0 || epoch >= ramp {
            self.kappa
        } else {
            self.kappa * epoch as f64 / ramp as f64
        }
    }

    pub fn spec_at(&self, epoch: usize) -> MultiplicitySpec {
        MultiplicitySpec {
            norm: self.norm,
            kappa: self.kappa_at(epoch),
            delta: None,
        }
    }

    pub fn target_spec(&self) -> MultiplicitySpec {
        MultiplicitySpec {
            norm: self.norm,
            kappa: self.kappa,
            delta: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kappa: f64,
    pub loss_f: f64,
    pub loss_g: f64,
    pub acc: f64,
    pub validity: f64,
    pub cert_rate: f64,
    pub robust_loss: f64,
}

pub fn to_jsonl(logs: &[EpochLog]) -> String {
    logs.iter()
        .map(|l| serde_json::to_string(l).expect("plain struct") + "\n")
        .collect()
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn adam_for(n: usize, c: &TrainConfig) -> Adam {
    Adam::new(n, c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps)
}

/// Gradient of `L_f` for one instance, in classifier flattening order.
pub fn grad_f(
    w: &LossWeights,
    f: &MlpParams,
    radii: &[LayerRadius],
    x: &[f64],
    y: u8,
    x_prime: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars = f.to_vars(&tape);
    let bx = BoxVars::new(&tape, vars.clone(), radii.to_vec()).map_err(SimulError::from)?;
    let loss = loss_f_tape(w, &bx, tape.vector(x), y, tape.vector(x_prime))?;
    let g = tape.backward(&loss)?;
    Ok((loss.item(), MlpParams::grads_of(&vars, &g)))
}

/// Gradient of `L_g` for one instance, in generator flattening order.
pub fn grad_g(
    w: &LossWeights,
    model: &JointModel,
    radii: &[LayerRadius],
    x: &[f64],
    y: u8,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let bx = BoxVars::new(&tape, model.classifier.to_vars(&tape), radii.to_vec())
        .map_err(SimulError::from)?;
    let g_vars = model.cf_head.to_vars(&tape);
    let xv = tape.vector(x);
    let delta = forward_tape(&g_vars, tape.vector(&model.encode(x)?))?;
    let x_prime = xv.add(&delta)?.clamp(0.0, 1.0);
    let loss = loss_g_tape(w, &bx, xv, y, x_prime)?;
    let g = tape.backward(&loss)?;
    Ok((loss.item(), MlpParams::grads_of(&g_vars, &g)))
}

fn mean_grad(acc: &mut [f64], n: usize) {
    let s = 1.0 / n as f64;
    acc.iter_mut().for_each(|v| *v *= s);
}

/// Monitoring statistics of `model` on `samples`.
pub fn evaluate(model: &JointModel, samples: &Samples, spec: &MultiplicitySpec, w: &LossWeights) -> Result<(f64, f64, f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0, 0.0, 0.0));
    }
    let n = samples.len() as f64;
    let mut correct = 0usize;
    let mut valid = 0usize;
    let mut robust_loss = 0.0;
    let pbox = crate::bounds::build_param_box(&model.classifier, spec);
    for (x, &y) in samples.features.iter().zip(&samples.labels) {
        let y_hat = model.predict(x)?;
        correct += usize::from(y_hat == y);
        let xp = model.generate_cf(x)?;
        valid += usize::from(model.predict(&xp)? != y_hat);
        let tape = Tape::new();
        let bx = BoxVars::leaf(&tape, &pbox).map_err(SimulError::from)?;
        robust_loss += robust_loss_tape(w.method, &bx, tape.vector(x), tape.vector(&xp), y_hat)?.item();
    }
    let certs = certify_dataset(model, spec, samples, w.method)?;
    Ok((correct as f64 / n, valid as f64 / n, rate(&certs), robust_loss / n))
}

fn monitor_split(data: &SplitDataset, n: usize) -> Samples {
    let k = data.test.len().min(n);
    data.test.select(&(0..k).collect::<Vec<_>>())
}

/// Trains a fresh model on `data.train`.
pub fn train(data: &SplitDataset, config: &TrainConfig) -> Result<(JointModel, Vec<EpochLog>)> {
    config.validate()?;
    let model = JointModel::init(data.schema.clone(), &config.architecture, config.seed);
    train_from(model, data, config)
}

/// Continues joint training of `model`.
pub fn train_from(mut model: JointModel, data: &SplitDataset, config: &TrainConfig) -> Result<(JointModel, Vec<EpochLog>)> {
    config.validate()?;
    check_schema(&model, data)?;
    let train = &data.train;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let monitor = monitor_split(data, config.monitor_points);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt_f = adam_for(model.classifier.num_params(), config);
    let mut opt_g = adam_for(model.cf_head.num_params(), config);
    let w = &config.weights;
    let mut logs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let spec = config.spec_at(epoch);
        let radii = spec.radii(&model.classifier);
        let cfs = train
            .features
            .iter()
            .map(|x| model.generate_cf(x))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        order.shuffle(&mut rng);
        let mut loss_f_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut acc = vec![0.0; model.classifier.num_params()];
            for &i in batch {
                let (l, g) = grad_f(w, &model.classifier, &radii, &train.features[i], train.labels[i], &cfs[i])?;
                if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NaN { epoch, phase: "classifier", batch: b });
                }
                loss_f_sum += l;
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
            }
            mean_grad(&mut acc, batch.len());
            let mut flat = model.classifier.flatten();
            opt_f.step(&mut flat, &acc);
            model.classifier = model.classifier.unflatten(&flat)?;
        }

        let radii = spec.radii(&model.classifier);
        order.shuffle(&mut rng);
        let mut loss_g_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut acc = vec![0.0; model.cf_head.num_params()];
            for &i in batch {
                let (l, g) = grad_g(w, &model, &radii, &train.features[i], train.labels[i])?;
                if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NaN { epoch, phase: "generator", batch: b });
                }
                loss_g_sum += l;
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
            }
            mean_grad(&mut acc, batch.len());
            let mut flat = model.cf_head.flatten();
            opt_g.step(&mut flat, &acc);
            model.cf_head = model.cf_head.unflatten(&flat)?;
        }

        let (acc, validity, cert_rate, robust_loss) = evaluate(&model, &monitor, &config.target_spec(), w)?;
        let n = train.len() as f64;
        let log = EpochLog {
            epoch,
            kappa: spec.kappa,
            loss_f: loss_f_sum / n,
            loss_g: loss_g_sum / n,
            acc,
            validity,
            cert_rate,
            robust_loss,
        };
        debug!("{}", serde_json::to_string(&log).unwrap_or_default());
        logs.push(log);
    }
    Ok((model, logs))
}

fn check_schema(model: &JointModel, data: &SplitDataset) -> Result<()> {
    if model.schema.column_names() != data.schema.column_names() {
        return Err(TrainError::Schema(format!(
            "model features {:?} vs data features {:?}",
            model.schema.column_names(),
            data.schema.column_names()
        )));
    }
    Ok(())
}

/// Continues training the classifier alone on the accuracy loss for
/// `epochs` passes over `data.train`; the generator is left untouched.
pub fn finetune(model: &JointModel, data: &SplitDataset, epochs: usize, config: &TrainConfig) -> Result<JointModel> {
    check_schema(model, data)?;
    let mut out = model.clone();
    if epochs == 0 {
        return Ok(out);
    }
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    let train = &data.train;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let w = LossWeights {
        lambda2: 0.0,
        ..config.weights.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x51_7cc1_b727_220a);
    let mut opt = adam_for(out.classifier.num_params(), config);
    let radii = MultiplicitySpec::linf(0.0).radii(&out.classifier);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut acc = vec![0.0; out.classifier.num_params()];
            for &i in batch {
                let x = &train.features[i];
                let (l, g) = grad_f(&w, &out.classifier, &radii, x, train.labels[i], x)?;
                if !l.is_finite() {
                    return Err(TrainError::NaN { epoch, phase: "finetune", batch: b });
                }
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
            }
            mean_grad(&mut acc, batch.len());
            let mut flat = out.classifier.flatten();
            opt.step(&mut flat, &acc);
            out.classifier = out.classifier.unflatten(&flat)?;
        }
    }
    Ok(out)
}

/// Largest absolute parameter change per classifier layer (weights and
/// biases together).
pub fn layer_drift(a: &MlpParams, b: &MlpParams) -> Vec<f64> {
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(p, q)| {
            let w = p.weight.data().iter().zip(q.weight.data());
            let bb = p.bias.data().iter().zip(q.bias.data());
            w.chain(bb).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobsSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-2,
            monitor_points: 20,
            ..TrainConfig::default()
        }
    }

    fn small_data() -> SplitDataset {
        make_blobs(
            &BlobsSpec {
                n: 120,
                ..BlobsSpec::default()
            },
            1,
        )
    }

    #[test]
    fn kappa_ramp() {
        let c = TrainConfig {
            epochs: 10,
            kappa: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(c.kappa_at(0), 0.0);
        assert!((c.kappa_at(1) - 0.02).abs() < 1e-15);
        assert_eq!(c.kappa_at(5), 0.1);
        assert_eq!(c.kappa_at(9), 0.1);
    }

    #[test]
    fn zero_epochs_rejected() {
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&small_data(), &c), Err(TrainError::Config(_))));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let d = small_data();
        let (a, la) = train(&d, &small_config()).unwrap();
        let (b, lb) = train(&d, &small_config()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(to_jsonl(&la), to_jsonl(&lb));
        assert_eq!(la.len(), 3);
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let d = small_data();
        let (m, _) = train(&d, &small_config()).unwrap();
        let f = finetune(&m, &d, 0, &small_config()).unwrap();
        assert_eq!(f, m);
        let g = finetune(&m, &d, 2, &small_config()).unwrap();
        assert!(layer_drift(&m.classifier, &g.classifier).iter().any(|&v| v > 0.0));
        assert_eq!(g.cf_head, m.cf_head);
    }

    #[test]
    fn finetune_rejects_other_schema() {
        let d = small_data();
        let (m, _) = train(&d, &small_config()).unwrap();
        let mut other = d.clone();
        other.schema = crate::data::FeatureSchema::continuous(&["p", "q"]);
        assert!(matches!(finetune(&m, &other, 1, &small_config()), Err(TrainError::Schema(_))));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] + 0.9).abs() < 1e-9);
    }
}
