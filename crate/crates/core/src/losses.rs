//! Training objectives.
//!
//! `L_f = λ₁·L_A + λ₂·L_R` for the classifier and
//! `L_g = λ₃·L_Q + λ₄·L_V + λ₂·L_R` for the generator, where `L_A` and
//! `L_V` are squared errors on the soft output, `L_Q` is the mean ℓ1
//! distance and `L_R` is the squared error of the worst-case soft output on
//! the counterfactual against `1 − ŷ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bounds::{build_param_box, BoxVars, MultiplicitySpec, ParamBox};
use crate::model::{forward_pre_tape, MlpParams, ModelError};
use crate::simul::{worst_logit_tape, Method, Result, SimulError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub method: Method,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.2,
            lambda4: 1.0,
            method: Method::SimulCrown,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

fn sq(v: f64) -> f64 {
    v * v
}

/// `(score − y)²`.
pub fn loss_accuracy(score: f64, y: u8) -> f64 {
    sq(score - f64::from(y))
}

/// `(score − (1 − y))²`.
pub fn loss_validity(score: f64, y: u8) -> f64 {
    sq(score - f64::from(1 - y.min(1)))
}

/// Mean absolute difference per feature.
pub fn loss_quality(x: &[f64], x_prime: &[f64]) -> std::result::Result<f64, ModelError> {
    if x.len() != x_prime.len() {
        return Err(ModelError::Dimension {
            expected: x.len(),
            got: x_prime.len(),
        });
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter().zip(x_prime).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Robust loss over the box for the given method.
pub fn loss_robust(method: Method, pbox: &ParamBox, x: &[f64], x_prime: &[f64], y_hat: u8) -> Result<f64> {
    let t = crate::simul::worst_logit(method, pbox, x, x_prime, y_hat)?;
    Ok(loss_validity(crate::autodiff::sigmoid(t), y_hat))
}

fn target<'t>(tape: &'t Tape, v: f64) -> Var<'t> {
    tape.scalar(v)
}

/// `L_R` on a tape.
pub fn robust_loss_tape<'t>(
    method: Method,
    bx: &BoxVars<'t>,
    x: Var<'t>,
    x_prime: Var<'t>,
    y_hat: u8,
) -> Result<Var<'t>> {
    let t = worst_logit_tape(method, bx, x, x_prime, y_hat)?;
    Ok(t.sigmoid().mse(&target(bx.tape(), f64::from(1 - y_hat)))?)
}

fn hard_label(bx: &BoxVars<'_>, x: Var<'_>) -> Result<u8> {
    Ok(bx.nominal().predict(x.value().data())?)
}

/// `λ₁·L_A + λ₂·L_R` for one instance. The classifier parameters are the
/// centers of `bx`; `x_prime` is normally a constant here.
pub fn loss_f_tape<'t>(
    w: &LossWeights,
    bx: &BoxVars<'t>,
    x: Var<'t>,
    y: u8,
    x_prime: Var<'t>,
) -> Result<Var<'t>> {
    let tape = bx.tape();
    let soft = forward_pre_tape(&bx.layers, x)?.sigmoid();
    let mut loss = soft.mse(&target(tape, f64::from(y)))?.scale(w.lambda1);
    if w.lambda2 != 0.0 {
        let y_hat = hard_label(bx, x)?;
        let r = robust_loss_tape(w.method, bx, x, x_prime, y_hat)?;
        loss = loss.add(&r.scale(w.lambda2))?;
    }
    Ok(loss)
}

/// `λ₃·L_Q + λ₄·L_V + λ₂·L_R` for one instance, differentiable in
/// `x_prime`.
pub fn loss_g_tape<'t>(
    w: &LossWeights,
    bx: &BoxVars<'t>,
    x: Var<'t>,
    y: u8,
    x_prime: Var<'t>,
) -> Result<Var<'t>> {
    let tape = bx.tape();
    let quality = x.l1_mean(&x_prime)?;
    let soft_cf = forward_pre_tape(&bx.layers, x_prime)?.sigmoid();
    let validity = soft_cf.mse(&target(tape, f64::from(1 - y)))?;
    let mut loss = quality.scale(w.lambda3).add(&validity.scale(w.lambda4))?;
    if w.lambda2 != 0.0 {
        let y_hat = hard_label(bx, x)?;
        let r = robust_loss_tape(w.method, bx, x, x_prime, y_hat)?;
        loss = loss.add(&r.scale(w.lambda2))?;
    }
    Ok(loss)
}

fn check_dims(f: &MlpParams, x: &[f64], x_prime: &[f64]) -> Result<()> {
    for v in [x, x_prime] {
        if v.len() != f.input_dim() {
            return Err(SimulError::from(ModelError::Dimension {
                expected: f.input_dim(),
                got: v.len(),
            }));
        }
    }
    Ok(())
}

/// Plain-value `L_f`.
pub fn loss_f(w: &LossWeights, f: &MlpParams, spec: &MultiplicitySpec, x: &[f64], y: u8, x_prime: &[f64]) -> Result<f64> {
    check_dims(f, x, x_prime)?;
    let tape = Tape::new();
    let bx = BoxVars::leaf(&tape, &build_param_box(f, spec))?;
    Ok(loss_f_tape(w, &bx, tape.vector(x), y, tape.vector(x_prime))?.item())
}

/// Plain-value `L_g`.
pub fn loss_g(w: &LossWeights, f: &MlpParams, spec: &MultiplicitySpec, x: &[f64], y: u8, x_prime: &[f64]) -> Result<f64> {
    check_dims(f, x, x_prime)?;
    let tape = Tape::new();
    let bx = BoxVars::leaf(&tape, &build_param_box(f, spec))?;
    Ok(loss_g_tape(w, &bx, tape.vector(x), y, tape.vector(x_prime))?.item())
}
