//! Post-training certification of counterfactual robustness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{build_param_box, LayerRadius, MultiplicitySpec, Norm, ParamBox};
use crate::data::Samples;
use crate::model::{JointModel, ModelError};
use crate::simul::{worst_logit, Method, SimulError};

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("no instances to certify")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simul(#[from] SimulError),
}

pub type Result<T> = std::result::Result<T, CertifyError>;

pub const REASON_INVALID: &str = "invalid-on-f";

/// The multiplicity set a certificate was issued against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecSnapshot {
    pub norm: Norm,
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub radii: Vec<LayerRadius>,
    pub outer_approximated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub input_id: usize,
    pub y_hat: u8,
    pub method: Method,
    /// Worst-case logit of the counterfactual; absent when the
    /// counterfactual is not valid on `f` itself.
    pub worst_logit: Option<f64>,
    pub robust: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub spec: SpecSnapshot,
    pub model_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Certifies pairs against one model, spec and method.
#[derive(Debug, Clone)]
pub struct Certifier {
    pbox: ParamBox,
    snapshot: SpecSnapshot,
    fingerprint: String,
    config_hash: Option<String>,
    method: Method,
}

impl Certifier {
    pub fn new(model: &JointModel, spec: &MultiplicitySpec, method: Method) -> Result<Self> {
        let pbox = build_param_box(&model.classifier, spec);
        let snapshot = SpecSnapshot {
            norm: spec.norm,
            kappa: spec.kappa,
            delta: spec.delta,
            radii: pbox.radii.clone(),
            outer_approximated: pbox.outer_approximated,
        };
        Ok(Self {
            pbox,
            snapshot,
            fingerprint: model.fingerprint()?,
            config_hash: model.config_hash.clone(),
            method,
        })
    }

    pub fn param_box(&self) -> &ParamBox {
        &self.pbox
    }

    pub fn certify(&self, input_id: usize, x: &[f64], x_prime: &[f64]) -> Result<Certificate> {
        let f = &self.pbox.center;
        let y_hat = f.predict(x)?;
        let cf_label = f.predict(x_prime)?;
        let mut cert = Certificate {
            input_id,
            y_hat,
            method: self.method,
            worst_logit: None,
            robust: false,
            reason: None,
            spec: self.snapshot.clone(),
            model_fingerprint: self.fingerprint.clone(),
            config_hash: self.config_hash.clone(),
        };
        if cf_label == y_hat {
            cert.reason = Some(REASON_INVALID.into());
            return Ok(cert);
        }
        let t = worst_logit(self.method, &self.pbox, x, x_prime, y_hat)?;
        cert.worst_logit = Some(t);
        // Strict: a bound that touches the threshold certifies nothing.
        cert.robust = if y_hat == 1 { t < 0.0 } else { t > 0.0 };
        Ok(cert)
    }
}

pub fn certify_pair(
    model: &JointModel,
    spec: &MultiplicitySpec,
    x: &[f64],
    x_prime: &[f64],
    method: Method,
) -> Result<Certificate> {
    Certifier::new(model, spec, method)?.certify(0, x, x_prime)
}

/// Certificates for the model's own counterfactuals of `samples`, sorted
/// by input id.
pub fn certify_dataset(
    model: &JointModel,
    spec: &MultiplicitySpec,
    samples: &Samples,
    method: Method,
) -> Result<Vec<Certificate>> {
    let c = Certifier::new(model, spec, method)?;
    let mut out = samples
        .ids
        .par_iter()
        .zip(&samples.features)
        .map(|(id, x)| c.certify(*id, x, &model.generate_cf(x)?))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|c| c.input_id);
    Ok(out)
}

/// Certificates for explicit `(id, x, x′)` pairs, sorted by id.
pub fn certify_pairs(
    model: &JointModel,
    spec: &MultiplicitySpec,
    pairs: &[(usize, Vec<f64>, Vec<f64>)],
    method: Method,
) -> Result<Vec<Certificate>> {
    let c = Certifier::new(model, spec, method)?;
    let mut out = pairs
        .par_iter()
        .map(|(id, x, xp)| c.certify(*id, x, xp))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|c| c.input_id);
    Ok(out)
}

/// Fraction of `samples` whose generated counterfactual is certified.
pub fn robustness_rate(
    model: &JointModel,
    spec: &MultiplicitySpec,
    samples: &Samples,
    method: Method,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CertifyError::Empty);
    }
    let certs = certify_dataset(model, spec, samples, method)?;
    Ok(rate(&certs))
}

pub fn rate(certs: &[Certificate]) -> f64 {
    if certs.is_empty() {
        return 0.0;
    }
    certs.iter().filter(|c| c.robust).count() as f64 / certs.len() as f64
}
