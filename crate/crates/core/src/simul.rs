//! Bounds that only range over models agreeing with `f` on `x`.
//!
//! The agreement constraint and the objective are both replaced by the
//! linear bounds of [`crate::bounds`], which turns the worst case into a
//! linear program with one constraint over a box:
//!
//! ```text
//! ŷ = 1:  max μ·z + ν  s.t.  α·z + β ≥ 0,  lo ≤ z ≤ hi
//! ŷ = 0:  min μ·z + ν  s.t.  α·z + β ≤ 0,  lo ≤ z ≤ hi
//! ```
//!
//! The program is a fractional knapsack and is solved greedily in
//! `O(n log n)`. [`greedy_solve_tape`] records the solution on a tape, with
//! the sort order and the set of fully moved indices treated as constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::bounds::{
    build_param_box, crown_ibp_side_tape, crown_side_tape, ibp_tape, BoundsError, BoxVars,
    LinBounds, MultiplicitySpec, ParamBox,
};
use crate::model::{MlpParams, ModelError};

#[derive(Debug, Error)]
pub enum SimulError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("NaN in problem coefficients")]
    NaN,
    #[error("label must be 0 or 1, got {0}")]
    Label(u8),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl From<ModelError> for SimulError {
    fn from(e: ModelError) -> Self {
        SimulError::Bounds(e.into())
    }
}

pub type Result<T> = std::result::Result<T, SimulError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulProblem {
    pub mu: Vec<f64>,
    pub nu: f64,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub label: u8,
}

impl SimulProblem {
    fn validate(&self) -> Result<()> {
        let n = self.mu.len();
        if self.alpha.len() != n || self.lo.len() != n || self.hi.len() != n {
            return Err(SimulError::Length(format!(
                "mu {}, alpha {}, lo {}, hi {}",
                n,
                self.alpha.len(),
                self.lo.len(),
                self.hi.len()
            )));
        }
        if self.label > 1 {
            return Err(SimulError::Label(self.label));
        }
        let all = self.mu.iter().chain(&self.alpha).chain(&self.lo).chain(&self.hi);
        if all.chain([&self.nu, &self.beta]).any(|v| v.is_nan()) {
            return Err(SimulError::NaN);
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| l > h) {
            return Err(SimulError::Length("lo > hi".into()));
        }
        Ok(())
    }

    /// The same problem with every coefficient negated and the label
    /// flipped; its optimum is the negated optimum of `self`.
    pub fn negated(&self) -> SimulProblem {
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect();
        SimulProblem {
            mu: neg(&self.mu),
            nu: -self.nu,
            alpha: neg(&self.alpha),
            beta: -self.beta,
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            label: 1 - self.label,
        }
    }
}

pub const MAX_EXHAUSTIVE: usize = 16;

/// Exact optimum by enumeration, for cross-checking [`greedy_solve`] on
/// small instances. The optimum of a linear objective over a box cut by
/// one halfspace is attained at a box corner or where the hyperplane
/// crosses a box edge; all `n·2ⁿ` such points are visited.
pub fn exhaustive_solve(p: &SimulProblem) -> Result<f64> {
    p.validate()?;
    let n = p.mu.len();
    if n > MAX_EXHAUSTIVE {
        return Err(SimulError::Length(format!("exhaustive solve supports n <= {MAX_EXHAUSTIVE}, got {n}")));
    }
    let obj = |z: &[f64]| p.nu + p.mu.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    let con = |z: &[f64]| p.beta + p.alpha.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    let feasible = |c: f64| if p.label == 1 { c >= -1e-12 } else { c <= 1e-12 };
    let better = |a: f64, b: f64| if p.label == 1 { a > b } else { a < b };
    let mut best = if p.label == 1 { f64::NEG_INFINITY } else { f64::INFINITY };
    for mask in 0u32..(1 << n) {
        let z: Vec<f64> = (0..n)
            .map(|i| if mask >> i & 1 == 1 { p.hi[i] } else { p.lo[i] })
            .collect();
        if feasible(con(&z)) && better(obj(&z), best) {
            best = obj(&z);
        }
        for free in 0..n {
            if p.alpha[free] == 0.0 {
                continue;
            }
            let mut e = z.clone();
            e[free] = 0.0;
            let v = -con(&e) / p.alpha[free];
            if v >= p.lo[free] - 1e-12 && v <= p.hi[free] + 1e-12 {
                e[free] = v.clamp(p.lo[free], p.hi[free]);
                if better(obj(&e), best) {
                    best = obj(&e);
                }
            }
        }
    }
    Ok(best)
}

/// Decisions taken by the greedy walk on the maximization form.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    /// Initial endpoint of each index (`true` = hi).
    start_hi: Vec<bool>,
    /// Indices moved across their whole range, in walk order.
    full: Vec<usize>,
    /// Index moved part of the way, if the slack ran out.
    partial: Option<usize>,
}

/// Greedy walk for `max μ·z s.t. α·z + β ≥ 0`. `None` when infeasible.
fn plan(mu: &[f64], alpha: &[f64], beta: f64, lo: &[f64], hi: &[f64]) -> Option<Plan> {
    let n = mu.len();
    let start_hi: Vec<bool> = (0..n)
        .map(|i| alpha[i] > 0.0 || (alpha[i] == 0.0 && mu[i] > 0.0))
        .collect();
    let mut slack = beta;
    for i in 0..n {
        slack += alpha[i] * if start_hi[i] { hi[i] } else { lo[i] };
    }
    if slack < 0.0 {
        return None;
    }
    let mut trade: Vec<usize> = (0..n).filter(|&i| mu[i] * alpha[i] < 0.0).collect();
    // Stable: equal ratios keep index order.
    trade.sort_by(|&a, &b| (-mu[b] / alpha[b]).total_cmp(&(-mu[a] / alpha[a])));
    let mut full = Vec::new();
    let mut partial = None;
    for i in trade {
        let cost = alpha[i].abs() * (hi[i] - lo[i]);
        if cost <= slack {
            slack -= cost;
            full.push(i);
        } else {
            partial = Some(i);
            break;
        }
    }
    Some(Plan {
        start_hi,
        full,
        partial,
    })
}

/// Optimal value of the problem, or `-∞` (ŷ = 1) / `+∞` (ŷ = 0) when the
/// constraint cannot be met inside the box.
pub fn greedy_solve(prob: &SimulProblem) -> Result<f64> {
    prob.validate()?;
    if prob.label == 0 {
        return Ok(-greedy_solve(&prob.negated())?);
    }
    let (mu, alpha, lo, hi) = (&prob.mu, &prob.alpha, &prob.lo, &prob.hi);
    let Some(p) = plan(mu, alpha, prob.beta, lo, hi) else {
        return Ok(f64::NEG_INFINITY);
    };
    let n = mu.len();
    let mut value = prob.nu;
    let mut slack = prob.beta;
    for i in 0..n {
        let z = if p.start_hi[i] { hi[i] } else { lo[i] };
        value += mu[i] * z;
        slack += alpha[i] * z;
    }
    for &i in &p.full {
        value += mu[i].abs() * (hi[i] - lo[i]);
        slack -= alpha[i].abs() * (hi[i] - lo[i]);
    }
    if let Some(i) = p.partial {
        value += mu[i].abs() / alpha[i].abs() * slack.max(0.0);
    }
    Ok(value)
}

/// The point attained by the greedy walk (ŷ = 1 form only).
pub fn greedy_argmax(prob: &SimulProblem) -> Result<Option<Vec<f64>>> {
    prob.validate()?;
    let (mu, alpha, lo, hi) = (&prob.mu, &prob.alpha, &prob.lo, &prob.hi);
    let Some(p) = plan(mu, alpha, prob.beta, lo, hi) else {
        return Ok(None);
    };
    let mut z: Vec<f64> = (0..mu.len())
        .map(|i| if p.start_hi[i] { hi[i] } else { lo[i] })
        .collect();
    let mut slack = prob.beta + alpha.iter().zip(&z).map(|(a, v)| a * v).sum::<f64>();
    for &i in &p.full {
        z[i] = if p.start_hi[i] { lo[i] } else { hi[i] };
        slack -= alpha[i].abs() * (hi[i] - lo[i]);
    }
    if let Some(i) = p.partial {
        let step = slack / alpha[i].abs();
        z[i] = if p.start_hi[i] { hi[i] - step } else { lo[i] + step };
    }
    Ok(Some(z))
}

/// Tape version of [`greedy_solve`]. Returns `None` when infeasible.
/// `mu`, `alpha`, `lo`, `hi` are `n × 1`; `nu`, `beta` are scalars.
#[allow(clippy::too_many_arguments)]
pub fn greedy_solve_tape<'t>(
    mu: Var<'t>,
    nu: Var<'t>,
    alpha: Var<'t>,
    beta: Var<'t>,
    lo: Var<'t>,
    hi: Var<'t>,
    label: u8,
) -> Result<Option<Var<'t>>> {
    if label > 1 {
        return Err(SimulError::Label(label));
    }
    if label == 0 {
        let v = greedy_solve_tape(mu.neg(), nu.neg(), alpha.neg(), beta.neg(), lo, hi, 1)?;
        return Ok(v.map(|v| v.neg()));
    }
    let n = mu.shape().0;
    for v in [alpha, lo, hi] {
        if v.shape() != (n, 1) {
            return Err(SimulError::Length(format!("{:?} vs ({n}, 1)", v.shape())));
        }
    }
    let (mu_v, alpha_v, lo_v, hi_v) = (mu.value(), alpha.value(), lo.value(), hi.value());
    if mu_v.data().iter().chain(alpha_v.data()).any(|v| v.is_nan()) {
        return Err(SimulError::NaN);
    }
    let Some(p) = plan(mu_v.data(), alpha_v.data(), beta.item(), lo_v.data(), hi_v.data()) else {
        return Ok(None);
    };
    let z = hi.select(&p.start_hi, &lo)?;
    let mut value = mu.mul(&z)?.sum().add(&nu)?;
    if p.full.is_empty() && p.partial.is_none() {
        return Ok(Some(value));
    }
    let range = hi.sub(&lo)?;
    let cost = alpha.abs().mul(&range)?;
    let gain = mu.abs().mul(&range)?;
    let mut slack = alpha.mul(&z)?.sum().add(&beta)?;
    if !p.full.is_empty() {
        value = value.add(&gain.gather(&p.full)?.sum())?;
        slack = slack.sub(&cost.gather(&p.full)?.sum())?;
    }
    if let Some(i) = p.partial {
        let rate = mu.gather(&[i])?.abs().div(&alpha.gather(&[i])?.abs())?;
        value = value.add(&rate.mul(&slack)?)?;
    }
    Ok(Some(value))
}

/// Picks the objective/constraint pair for the label: upper bounds for
/// ŷ = 1, lower bounds for ŷ = 0.
pub fn build_simul_problem(
    x_bounds: &LinBounds,
    cf_bounds: &LinBounds,
    pbox: &ParamBox,
    y_hat: u8,
) -> Result<SimulProblem> {
    let n = pbox.num_params();
    for (name, len) in [
        ("x alpha", x_bounds.alpha_hi.len()),
        ("x alpha", x_bounds.alpha_lo.len()),
        ("cf alpha", cf_bounds.alpha_hi.len()),
        ("cf alpha", cf_bounds.alpha_lo.len()),
    ] {
        if len != n {
            return Err(SimulError::Length(format!("{name} has {len}, box has {n}")));
        }
    }
    let (mu, nu, alpha, beta) = match y_hat {
        1 => (&cf_bounds.alpha_hi, cf_bounds.beta_hi, &x_bounds.alpha_hi, x_bounds.beta_hi),
        0 => (&cf_bounds.alpha_lo, cf_bounds.beta_lo, &x_bounds.alpha_lo, x_bounds.beta_lo),
        other => return Err(SimulError::Label(other)),
    };
    Ok(SimulProblem {
        mu: mu.clone(),
        nu,
        alpha: alpha.clone(),
        beta,
        lo: pbox.lo_flat(),
        hi: pbox.hi_flat(),
        label: y_hat,
    })
}

/// Bounding method for the worst-case logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ibp")]
    Ibp,
    #[serde(rename = "crown-ibp")]
    CrownIbp,
    #[serde(rename = "simul-crown")]
    SimulCrown,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ibp, Method::CrownIbp, Method::SimulCrown];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ibp => "ibp",
            Method::CrownIbp => "crown-ibp",
            Method::SimulCrown => "simul-crown",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ibp" => Ok(Method::Ibp),
            "crown-ibp" | "crown" => Ok(Method::CrownIbp),
            "simul-crown" | "simul" => Ok(Method::SimulCrown),
            other => Err(format!("unknown method `{other}` (ibp, crown-ibp, simul-crown)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Worst-case logit of `x′` over the box for the label `y_hat`: the
/// largest possible logit when `ŷ = 1`, the smallest when `ŷ = 0`.
///
/// Simul-CROWN falls back to the CROWN-IBP bound when the relaxed
/// agreement constraint is infeasible, and never returns a looser value
/// than CROWN-IBP.
pub fn worst_logit_tape<'t>(
    method: Method,
    bx: &BoxVars<'t>,
    x: Var<'t>,
    x_prime: Var<'t>,
    y_hat: u8,
) -> Result<Var<'t>> {
    if y_hat > 1 {
        return Err(SimulError::Label(y_hat));
    }
    let upper = y_hat == 1;
    let pre_cf = ibp_tape(bx, x_prime)?;
    if method == Method::Ibp {
        let logit = pre_cf.last().expect("non-empty");
        return Ok(if upper { logit.hi } else { logit.lo });
    }
    let (crown, cf_side) = crown_ibp_side_tape(bx, x_prime, &pre_cf, upper)?;
    if method == Method::CrownIbp {
        return Ok(crown);
    }
    let pre_x = ibp_tape(bx, x)?;
    let sign = if upper { 1.0 } else { -1.0 };
    let x_side = crown_side_tape(bx, x, &pre_x, sign)?;
    // Sides bound sign·logit; undo the sign to get the objective and
    // constraint of the label's program.
    let (mu, nu, alpha, beta) = if upper {
        (cf_side.alpha, cf_side.beta, x_side.alpha, x_side.beta)
    } else {
        (
            cf_side.alpha.neg(),
            cf_side.beta.neg(),
            x_side.alpha.neg(),
            x_side.beta.neg(),
        )
    };
    let lo = bx.theta().sub(&bx.delta())?;
    let hi = bx.theta().add(&bx.delta())?;
    let Some(t) = greedy_solve_tape(mu, nu, alpha, beta, lo, hi, y_hat)? else {
        return Ok(crown);
    };
    let tighter = if upper { t.item() < crown.item() } else { t.item() > crown.item() };
    Ok(if tighter { t } else { crown })
}

/// Plain-value wrapper around [`worst_logit_tape`].
pub fn worst_logit(
    method: Method,
    pbox: &ParamBox,
    x: &[f64],
    x_prime: &[f64],
    y_hat: u8,
) -> Result<f64> {
    let d = pbox.center.input_dim();
    for v in [x, x_prime] {
        if v.len() != d {
            return Err(ModelError::Dimension {
                expected: d,
                got: v.len(),
            }
            .into());
        }
    }
    let tape = Tape::new();
    let bx = BoxVars::leaf(&tape, pbox)?;
    Ok(worst_logit_tape(method, &bx, tape.vector(x), tape.vector(x_prime), y_hat)?.item())
}

/// Simul-CROWN worst-case logit for the classifier `f` under `spec`.
pub fn simul_crown_logit_bound(
    f: &MlpParams,
    spec: &MultiplicitySpec,
    x: &[f64],
    x_prime: &[f64],
    y_hat: u8,
) -> Result<f64> {
    worst_logit(Method::SimulCrown, &build_param_box(f, spec), x, x_prime, y_hat)
}
