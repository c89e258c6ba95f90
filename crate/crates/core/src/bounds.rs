//! Bounds on the classifier logit when the *parameters* range over a box
//! and the input is fixed.
//!
//! Two propagators are provided. [`ibp_forward`] pushes parameter intervals
//! forward with interval arithmetic. [`crown_ibp_bounds`] runs a backward
//! pass that keeps every layer's weights and biases symbolic: the bilinear
//! term `W_jk h_k` of a hidden layer is replaced by a McCormick plane
//! (linear in `W_jk` and in `h_k`), and the dependence on `h_k` is pushed
//! further back through a linear ReLU relaxation built from IBP
//! pre-activation intervals. The result is a pair of affine functions of
//! the flattened parameter vector that bracket the logit over the box.
//!
//! Everything is recorded on a [`Tape`] so the same code serves
//! certification and training.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::model::{Activation, LayerVars, MlpParams, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("coefficient length {got} does not match parameter count {expected}")]
    Length { expected: usize, got: usize },
    #[error("unsupported network: {0}")]
    Network(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, BoundsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi || lo.is_nan() || hi.is_nan(), "[{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn contains_interval(&self, other: &Interval, tol: f64) -> bool {
        other.lo >= self.lo - tol && other.hi <= self.hi + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[serde(alias = "linf", alias = "infinity")]
    Inf,
    L2,
    L1,
}

impl Norm {
    pub fn of(self, t: &Tensor) -> f64 {
        match self {
            Norm::Inf => t.max_abs(),
            Norm::L2 => t.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::L1 => t.data().iter().map(|v| v.abs()).sum(),
        }
    }
}

/// Radius of the weight matrix and of the bias vector of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRadius {
    pub weight: f64,
    pub bias: f64,
}

/// Definition of the multiplicity set: every parameter tensor `θᵢ` may
/// move by at most `δᵢ = κ‖θᵢ‖_p`, unless `delta` fixes one radius for all
/// tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplicitySpec {
    #[serde(default = "default_norm")]
    pub norm: Norm,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

fn default_norm() -> Norm {
    Norm::Inf
}

impl MultiplicitySpec {
    pub fn linf(kappa: f64) -> Self {
        Self {
            norm: Norm::Inf,
            kappa,
            delta: None,
        }
    }

    pub fn explicit(delta: f64) -> Self {
        Self {
            norm: Norm::Inf,
            kappa: 0.0,
            delta: Some(delta),
        }
    }

    pub fn radii(&self, params: &MlpParams) -> Vec<LayerRadius> {
        params
            .layers
            .iter()
            .map(|l| match self.delta {
                Some(d) => LayerRadius { weight: d, bias: d },
                None => LayerRadius {
                    weight: self.kappa * self.norm.of(&l.weight),
                    bias: self.kappa * self.norm.of(&l.bias),
                },
            })
            .collect()
    }

    /// True when the ℓ∞ box is a strict outer approximation of the ball.
    pub fn outer_approximated(&self) -> bool {
        self.norm != Norm::Inf
    }
}

/// Per-tensor box `θ_f ± δᵢ` around the classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    pub center: MlpParams,
    pub radii: Vec<LayerRadius>,
    pub outer_approximated: bool,
}

pub fn build_param_box(params: &MlpParams, spec: &MultiplicitySpec) -> ParamBox {
    ParamBox {
        center: params.clone(),
        radii: spec.radii(params),
        outer_approximated: spec.outer_approximated(),
    }
}

impl ParamBox {
    pub fn num_params(&self) -> usize {
        self.center.num_params()
    }

    /// Per-parameter radius in flattening order.
    pub fn delta_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (l, r) in self.center.layers.iter().zip(&self.radii) {
            out.extend(std::iter::repeat_n(r.weight, l.weight.len()));
            out.extend(std::iter::repeat_n(r.bias, l.bias.len()));
        }
        out
    }

    pub fn lo_flat(&self) -> Vec<f64> {
        let c = self.center.flatten();
        c.iter().zip(self.delta_flat()).map(|(a, d)| a - d).collect()
    }

    pub fn hi_flat(&self) -> Vec<f64> {
        let c = self.center.flatten();
        c.iter().zip(self.delta_flat()).map(|(a, d)| a + d).collect()
    }

    /// Interval of each weight (row-major) and bias of layer `l`.
    pub fn layer_intervals(&self, l: usize) -> (Vec<Interval>, Vec<Interval>) {
        let layer = &self.center.layers[l];
        let r = self.radii[l];
        let w = layer.weight.data().iter().map(|&v| Interval::new(v - r.weight, v + r.weight));
        let b = layer.bias.data().iter().map(|&v| Interval::new(v - r.bias, v + r.bias));
        (w.collect(), b.collect())
    }

    pub fn contains(&self, flat: &[f64], tol: f64) -> bool {
        flat.len() == self.num_params()
            && self
                .lo_flat()
                .iter()
                .zip(self.hi_flat())
                .zip(flat)
                .all(|((lo, hi), v)| *v >= lo - tol && *v <= hi + tol)
    }

    /// Uniform sample from the box.
    pub fn sample(&self, rng: &mut impl Rng) -> MlpParams {
        let flat: Vec<f64> = self
            .center
            .flatten()
            .iter()
            .zip(self.delta_flat())
            .map(|(&c, d)| if d > 0.0 { c + rng.random_range(-d..=d) } else { c })
            .collect();
        self.center.unflatten(&flat).expect("same shapes")
    }

    /// Each parameter is pushed to a random endpoint with probability
    /// `p_edge` and drawn uniformly otherwise.
    pub fn sample_with_edges(&self, rng: &mut impl Rng, p_edge: f64) -> MlpParams {
        let flat: Vec<f64> = self
            .center
            .flatten()
            .iter()
            .zip(self.delta_flat())
            .map(|(&c, d)| {
                if d == 0.0 {
                    c
                } else if rng.random_bool(p_edge) {
                    if rng.random_bool(0.5) { c + d } else { c - d }
                } else {
                    c + rng.random_range(-d..=d)
                }
            })
            .collect();
        self.center.unflatten(&flat).expect("same shapes")
    }
}

/// Affine bounds `αˡ·θ + βˡ ≤ logit_θ(x) ≤ αᵘ·θ + βᵘ` over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinBounds {
    pub alpha_lo: Vec<f64>,
    pub beta_lo: f64,
    pub alpha_hi: Vec<f64>,
    pub beta_hi: f64,
}

impl LinBounds {
    pub fn eval(&self, theta: &[f64]) -> Interval {
        let dot = |a: &[f64]| a.iter().zip(theta).map(|(x, y)| x * y).sum::<f64>();
        Interval {
            lo: dot(&self.alpha_lo) + self.beta_lo,
            hi: dot(&self.alpha_hi) + self.beta_hi,
        }
    }
}

/// `[min αˡθ+βˡ, max αᵘθ+βᵘ]` over the box, by sign-based endpoint choice.
pub fn concretize(lin: &LinBounds, pbox: &ParamBox) -> Result<Interval> {
    let n = pbox.num_params();
    for a in [&lin.alpha_lo, &lin.alpha_hi] {
        if a.len() != n {
            return Err(BoundsError::Length {
                expected: n,
                got: a.len(),
            });
        }
    }
    let c = pbox.center.flatten();
    let d = pbox.delta_flat();
    let side = |a: &[f64], s: f64| {
        a.iter()
            .zip(&c)
            .zip(&d)
            .map(|((a, c), d)| a * c + s * a.abs() * d)
            .sum::<f64>()
    };
    Ok(Interval {
        lo: side(&lin.alpha_lo, -1.0) + lin.beta_lo,
        hi: side(&lin.alpha_hi, 1.0) + lin.beta_hi,
    })
}

/// Interval with tape-recorded endpoints.
#[derive(Debug, Clone, Copy)]
pub struct IntervalVar<'t> {
    pub lo: Var<'t>,
    pub hi: Var<'t>,
}

impl IntervalVar<'_> {
    pub fn value(&self) -> Interval {
        Interval {
            lo: self.lo.item(),
            hi: self.hi.item(),
        }
    }
}

/// One side of a symbolic bound: `s·logit ≤ alpha·θ + beta`.
#[derive(Debug, Clone, Copy)]
pub struct SideVar<'t> {
    pub alpha: Var<'t>,
    pub beta: Var<'t>,
}

/// A parameter box recorded on a tape: centers are vars, radii constants.
#[derive(Debug, Clone)]
pub struct BoxVars<'t> {
    pub layers: Vec<LayerVars<'t>>,
    pub radii: Vec<LayerRadius>,
    nominal: MlpParams,
    theta: Var<'t>,
    delta: Var<'t>,
}

impl<'t> BoxVars<'t> {
    pub fn new(tape: &'t Tape, layers: Vec<LayerVars<'t>>, radii: Vec<LayerRadius>) -> Result<Self> {
        if layers.is_empty() || layers.len() != radii.len() {
            return Err(BoundsError::Network("layer and radius counts differ".into()));
        }
        let nominal = MlpParams::new(
            layers
                .iter()
                .map(|l| crate::model::Layer::new(l.w.value(), l.b.value(), l.activation))
                .collect(),
        )?;
        let last = nominal.layers.len() - 1;
        if nominal.output_dim() != 1 {
            return Err(BoundsError::Network("classifier must have one output".into()));
        }
        if nominal.layers[..last].iter().any(|l| l.activation != Activation::Relu) {
            return Err(BoundsError::Network("hidden layers must use ReLU".into()));
        }
        let mut parts = Vec::with_capacity(2 * layers.len());
        for l in &layers {
            parts.push(l.w.flatten());
            parts.push(l.b);
        }
        let theta = tape.concat(&parts)?;
        let mut d = Vec::with_capacity(nominal.num_params());
        for (l, r) in nominal.layers.iter().zip(&radii) {
            d.extend(std::iter::repeat_n(r.weight, l.weight.len()));
            d.extend(std::iter::repeat_n(r.bias, l.bias.len()));
        }
        let delta = tape.vector(&d);
        Ok(Self {
            layers,
            radii,
            nominal,
            theta,
            delta,
        })
    }

    /// Records the box centers as fresh leaves.
    pub fn leaf(tape: &'t Tape, pbox: &ParamBox) -> Result<Self> {
        Self::new(tape, pbox.center.to_vars(tape), pbox.radii.clone())
    }

    pub fn nominal(&self) -> &MlpParams {
        &self.nominal
    }

    /// Flattened centers `θ_f`.
    pub fn theta(&self) -> Var<'t> {
        self.theta
    }

    /// Flattened radii (a constant leaf).
    pub fn delta(&self) -> Var<'t> {
        self.delta
    }

    pub fn tape(&self) -> &'t Tape {
        self.theta.tape()
    }
}

/// Interval product `[wl, wu] · [hl, hu]` summed over the inner dimension.
fn interval_matvec<'t>(
    wl: Var<'t>,
    wu: Var<'t>,
    hl: Var<'t>,
    hu: Option<Var<'t>>,
) -> Result<IntervalVar<'t>> {
    let m = wl.shape().0;
    let hl_b = hl.row_broadcast(m)?;
    let p1 = wl.mul(&hl_b)?;
    let p3 = wu.mul(&hl_b)?;
    let (lo, hi) = match hu {
        None => (p1.min(&p3)?, p1.max(&p3)?),
        Some(hu) => {
            let hu_b = hu.row_broadcast(m)?;
            let p2 = wl.mul(&hu_b)?;
            let p4 = wu.mul(&hu_b)?;
            (
                p1.min(&p2)?.min(&p3.min(&p4)?)?,
                p1.max(&p2)?.max(&p3.max(&p4)?)?,
            )
        }
    };
    Ok(IntervalVar {
        lo: lo.row_sums(),
        hi: hi.row_sums(),
    })
}

/// Pre-activation intervals of every layer for a concrete input `x`
/// (an `d × 1` var). The last entry is the logit interval.
pub fn ibp_tape<'t>(bx: &BoxVars<'t>, x: Var<'t>) -> Result<Vec<IntervalVar<'t>>> {
    let mut out: Vec<IntervalVar<'t>> = Vec::with_capacity(bx.layers.len());
    for (l, r) in bx.layers.iter().zip(&bx.radii) {
        let wl = l.w.add_scalar(-r.weight);
        let wu = l.w.add_scalar(r.weight);
        let prod = match out.last() {
            None => interval_matvec(wl, wu, x, None)?,
            Some(prev) => interval_matvec(wl, wu, prev.lo.relu(), Some(prev.hi.relu()))?,
        };
        out.push(IntervalVar {
            lo: prod.lo.add(&l.b.add_scalar(-r.bias))?,
            hi: prod.hi.add(&l.b.add_scalar(r.bias))?,
        });
    }
    Ok(out)
}

/// Backward linear bound of `sign · logit` over the box, given the IBP
/// pre-activation intervals `pre` of the same input.
pub fn crown_side_tape<'t>(
    bx: &BoxVars<'t>,
    x: Var<'t>,
    pre: &[IntervalVar<'t>],
    sign: f64,
) -> Result<SideVar<'t>> {
    let tape = bx.tape();
    let depth = bx.layers.len();
    let nominal_acts = bx.nominal.trace(x.value().data())?;
    let mut lambda = tape.var(Tensor::filled(1, 1, sign));
    let mut beta = tape.scalar(0.0);
    let mut coefs: Vec<(Var<'t>, Var<'t>)> = Vec::with_capacity(depth);

    for l in (0..depth).rev() {
        let lay = bx.layers[l];
        let (m, n) = lay.w.shape();
        if l == 0 {
            coefs.push((lambda.matmul(&x.transpose())?, lambda));
            break;
        }
        let r = bx.radii[l];
        let z = pre[l - 1];
        let hl = z.lo.relu();
        let hu = z.hi.relu();
        let (hl_v, hu_v) = (hl.value(), hu.value());
        let q0 = &nominal_acts[l - 1];
        let lam_v = lambda.value();

        // Plane selection per (j, k); see the module docs.
        let mut a_is_hu = Vec::with_capacity(m * n);
        let mut b_is_wl = Vec::with_capacity(m * n);
        for j in 0..m {
            let up = lam_v.data()[j] >= 0.0;
            for (k, &q) in q0.iter().enumerate().take(n) {
                let (lo, hi) = (hl_v.data()[k], hu_v.data()[k]);
                if up {
                    let first = hi - q <= q - lo;
                    a_is_hu.push(first);
                    b_is_wl.push(first);
                } else {
                    let first = q - lo <= hi - q;
                    a_is_hu.push(!first);
                    b_is_wl.push(first);
                }
            }
        }
        let wl = lay.w.add_scalar(-r.weight);
        let wu = lay.w.add_scalar(r.weight);
        let a = hu.row_broadcast(m)?.select(&a_is_hu, &hl.row_broadcast(m)?)?;
        let b = wl.select(&b_is_wl, &wu)?;
        let lam_b = lambda.col_broadcast(n)?;
        let la = lam_b.mul(&a)?;
        beta = beta.sub(&la.mul(&b)?.sum())?;
        coefs.push((la, lambda));
        let c = lam_b.mul(&b)?.col_sums();

        // ReLU relaxation of h = relu(z) against the coefficient c.
        let (zl, zu, c_v) = (z.lo.value(), z.hi.value(), c.value());
        let mut tri = vec![false; n];
        let mut fixed = vec![0.0; n];
        for k in 0..n {
            let (lo, hi) = (zl.data()[k], zu.data()[k]);
            if hi <= 0.0 {
                fixed[k] = 0.0;
            } else if lo >= 0.0 {
                fixed[k] = 1.0;
            } else if c_v.data()[k] >= 0.0 {
                tri[k] = true;
            } else {
                fixed[k] = if hi >= -lo { 1.0 } else { 0.0 };
            }
        }
        let ones = tape.var(Tensor::filled(n, 1, 1.0));
        let zeros = tape.var(Tensor::zeros(n, 1));
        let denom = z.hi.sub(&z.lo)?.select(&tri, &ones)?;
        let tri_slope = z.hi.select(&tri, &zeros)?.div(&denom)?;
        let slope = tri_slope.select(&tri, &tape.var(Tensor::new(n, 1, fixed)))?;
        let intercept = z.lo.neg().mul(&tri_slope)?;
        beta = beta.add(&c.mul(&intercept)?.sum())?;
        lambda = c.mul(&slope)?;
    }

    let mut parts = Vec::with_capacity(2 * depth);
    for (w, b) in coefs.into_iter().rev() {
        parts.push(w.flatten());
        parts.push(b);
    }
    Ok(SideVar {
        alpha: tape.concat(&parts)?,
        beta,
    })
}

/// `max` (sign = 1) or `-min` (sign = -1) of `alpha·θ + beta` over the box,
/// i.e. the concrete bound on `sign · logit`.
pub fn concretize_side_tape<'t>(bx: &BoxVars<'t>, side: &SideVar<'t>) -> Result<Var<'t>> {
    let center = side.alpha.mul(&bx.theta)?.sum();
    let spread = side.alpha.abs().mul(&bx.delta)?.sum();
    Ok(center.add(&spread)?.add(&side.beta)?)
}

/// Concrete logit bound from the backward pass on one side: the upper
/// bound when `upper`, else the lower bound. The IBP endpoint is used
/// instead whenever it is tighter.
pub fn crown_ibp_side_tape<'t>(
    bx: &BoxVars<'t>,
    x: Var<'t>,
    pre: &[IntervalVar<'t>],
    upper: bool,
) -> Result<(Var<'t>, SideVar<'t>)> {
    let sign = if upper { 1.0 } else { -1.0 };
    let side = crown_side_tape(bx, x, pre, sign)?;
    let crown = concretize_side_tape(bx, &side)?;
    let logit = pre.last().expect("non-empty network");
    let bound = if upper {
        if crown.item() <= logit.hi.item() { crown } else { logit.hi }
    } else {
        let lo = crown.neg();
        if lo.item() >= logit.lo.item() { lo } else { logit.lo }
    };
    Ok((bound, side))
}

fn leaf_setup(pbox: &ParamBox, x: &[f64]) -> Result<()> {
    if x.len() != pbox.center.input_dim() {
        return Err(ModelError::Dimension {
            expected: pbox.center.input_dim(),
            got: x.len(),
        }
        .into());
    }
    Ok(())
}

/// Sound enclosure of the logit over the box.
pub fn ibp_forward(pbox: &ParamBox, x: &[f64]) -> Result<Interval> {
    leaf_setup(pbox, x)?;
    let tape = Tape::new();
    let bx = BoxVars::leaf(&tape, pbox)?;
    let pre = ibp_tape(&bx, tape.vector(x))?;
    Ok(pre.last().expect("non-empty").value())
}

/// IBP intervals of every pre-activation (last = logit).
pub fn ibp_layers(pbox: &ParamBox, x: &[f64]) -> Result<Vec<Vec<Interval>>> {
    leaf_setup(pbox, x)?;
    let tape = Tape::new();
    let bx = BoxVars::leaf(&tape, pbox)?;
    let pre = ibp_tape(&bx, tape.vector(x))?;
    Ok(pre
        .iter()
        .map(|iv| {
            let (lo, hi) = (iv.lo.value(), iv.hi.value());
            lo.data()
                .iter()
                .zip(hi.data())
                .map(|(&a, &b)| Interval::new(a, b))
                .collect()
        })
        .collect())
}

fn side_to_vec(side: &SideVar<'_>, sign: f64) -> (Vec<f64>, f64) {
    (
        side.alpha.value().data().iter().map(|a| sign * a).collect(),
        sign * side.beta.item(),
    )
}

/// Raw backward-pass coefficients, without comparison against IBP.
pub fn crown_linear_bounds(pbox: &ParamBox, x: &[f64]) -> Result<LinBounds> {
    leaf_setup(pbox, x)?;
    let tape = Tape::new();
    let bx = BoxVars::leaf(&tape, pbox)?;
    let xv = tape.vector(x);
    let pre = ibp_tape(&bx, xv)?;
    let up = crown_side_tape(&bx, xv, &pre, 1.0)?;
    let down = crown_side_tape(&bx, xv, &pre, -1.0)?;
    let (alpha_hi, beta_hi) = side_to_vec(&up, 1.0);
    let (alpha_lo, beta_lo) = side_to_vec(&down, -1.0);
    Ok(LinBounds {
        alpha_lo,
        beta_lo,
        alpha_hi,
        beta_hi,
    })
}

/// Linear bounds whose concretization is contained in the IBP interval.
/// A side that concretizes looser than IBP is replaced by the constant
/// IBP endpoint (`α = 0`).
pub fn crown_ibp_bounds(pbox: &ParamBox, x: &[f64]) -> Result<LinBounds> {
    let mut lin = crown_linear_bounds(pbox, x)?;
    let ibp = ibp_forward(pbox, x)?;
    let conc = concretize(&lin, pbox)?;
    if conc.hi > ibp.hi {
        lin.alpha_hi.iter_mut().for_each(|a| *a = 0.0);
        lin.beta_hi = ibp.hi;
    }
    if conc.lo < ibp.lo {
        lin.alpha_lo.iter_mut().for_each(|a| *a = 0.0);
        lin.beta_lo = ibp.lo;
    }
    Ok(lin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn example_linear() -> MlpParams {
        MlpParams::new(vec![Layer::new(
            Tensor::new(1, 2, vec![1.0, -1.0]),
            Tensor::scalar(-2.0),
            Activation::Sigmoid,
        )])
        .unwrap()
    }

    fn random_net(seed: u64, dims: &[usize]) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams::init(dims, Activation::Sigmoid, &mut rng);
        for l in &mut p.layers {
            let b = (0..l.outputs()).map(|_| rng.random_range(-0.5..0.5)).collect();
            l.bias = Tensor::new(l.outputs(), 1, b);
        }
        p
    }

    #[test]
    fn example_box_and_ibp() {
        let pbox = build_param_box(&example_linear(), &MultiplicitySpec::explicit(2.0));
        let (w, b) = pbox.layer_intervals(0);
        assert_eq!(w, vec![Interval::new(-1.0, 3.0), Interval::new(-3.0, 1.0)]);
        assert_eq!(b, vec![Interval::new(-4.0, 0.0)]);
        assert_eq!(ibp_forward(&pbox, &[-4.0, -1.0]).unwrap(), Interval::new(-17.0, 7.0));
    }

    #[test]
    fn example_crown_coefficients() {
        let pbox = build_param_box(&example_linear(), &MultiplicitySpec::explicit(2.0));
        let lin = crown_ibp_bounds(&pbox, &[-4.0, -1.0]).unwrap();
        assert_eq!(lin.alpha_hi, vec![-4.0, -1.0, 1.0]);
        assert_eq!(lin.alpha_lo, vec![-4.0, -1.0, 1.0]);
        assert_eq!((lin.beta_lo, lin.beta_hi), (0.0, 0.0));
        assert_eq!(concretize(&lin, &pbox).unwrap(), Interval::new(-17.0, 7.0));
    }

    #[test]
    fn concretize_examples() {
        let pbox = build_param_box(&example_linear(), &MultiplicitySpec::explicit(2.0));
        let lin = LinBounds {
            alpha_lo: vec![-4.0, -1.0, 1.0],
            beta_lo: 0.0,
            alpha_hi: vec![-4.0, -1.0, 1.0],
            beta_hi: 0.0,
        };
        assert_eq!(concretize(&lin, &pbox).unwrap().hi, 7.0);
        assert_eq!(lin.eval(&[-1.0, -3.0, 0.0]).hi, 7.0);
        let zero = LinBounds {
            alpha_lo: vec![0.0; 3],
            beta_lo: 1.5,
            alpha_hi: vec![0.0; 3],
            beta_hi: 1.5,
        };
        assert_eq!(concretize(&zero, &pbox).unwrap(), Interval::point(1.5));
        let short = LinBounds {
            alpha_lo: vec![0.0; 2],
            ..zero
        };
        assert!(matches!(concretize(&short, &pbox), Err(BoundsError::Length { .. })));
    }

    #[test]
    fn kappa_definition() {
        let p = MlpParams::new(vec![Layer::new(
            Tensor::new(1, 3, vec![1.0, -4.0, 2.0]),
            Tensor::scalar(0.5),
            Activation::Sigmoid,
        )])
        .unwrap();
        let r = MultiplicitySpec::linf(0.1).radii(&p);
        assert!((r[0].weight - 0.4).abs() < 1e-15);
        assert!((r[0].bias - 0.05).abs() < 1e-15);
        let l2 = MultiplicitySpec {
            norm: Norm::L2,
            kappa: 1.0,
            delta: None,
        };
        assert!((l2.radii(&p)[0].weight - 21f64.sqrt()).abs() < 1e-12);
        assert!(l2.outer_approximated());
    }

    #[test]
    fn zero_width_box_is_exact() {
        let p = random_net(5, &[3, 6, 4, 1]);
        let pbox = build_param_box(&p, &MultiplicitySpec::linf(0.0));
        let x = [0.2, 0.7, 0.1];
        let logit = p.logit(&x).unwrap();
        let ibp = ibp_forward(&pbox, &x).unwrap();
        assert!((ibp.lo - logit).abs() < 1e-12 && (ibp.hi - logit).abs() < 1e-12);
        let lin = crown_linear_bounds(&pbox, &x).unwrap();
        let theta = p.flatten();
        let at = lin.eval(&theta);
        assert!((at.lo - logit).abs() < 1e-12 && (at.hi - logit).abs() < 1e-12);
    }

    #[test]
    fn deep_nets_have_non_trivial_coefficients() {
        let p = random_net(8, &[2, 8, 8, 1]);
        let pbox = build_param_box(&p, &MultiplicitySpec::linf(0.05));
        let lin = crown_linear_bounds(&pbox, &[0.4, 0.6]).unwrap();
        assert!(lin.alpha_hi.iter().any(|&a| a < 0.0));
        assert!(lin.alpha_hi.iter().any(|&a| a > 0.0));
    }

    #[test]
    fn rejects_non_relu_hidden_layers() {
        let mut p = random_net(1, &[2, 3, 1]);
        p.layers[0].activation = Activation::Sigmoid;
        let pbox = build_param_box(&p, &MultiplicitySpec::linf(0.1));
        assert!(matches!(ibp_forward(&pbox, &[0.0, 0.0]), Err(BoundsError::Network(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sampled_soundness(seed in any::<u64>(), kappa in 0.0f64..0.2) {
            let p = random_net(seed, &[3, 5, 4, 1]);
            let pbox = build_param_box(&p, &MultiplicitySpec::linf(kappa));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let ibp = ibp_forward(&pbox, &x).unwrap();
            let raw = crown_linear_bounds(&pbox, &x).unwrap();
            let lin = crown_ibp_bounds(&pbox, &x).unwrap();
            let crown = concretize(&lin, &pbox).unwrap();
            prop_assert!(ibp.contains_interval(&crown, 1e-9));
            prop_assert!(crown.contains(p.logit(&x).unwrap(), 1e-9));
            for _ in 0..200 {
                let q = pbox.sample_with_edges(&mut rng, 0.5);
                let theta = q.flatten();
                let v = q.logit(&x).unwrap();
                prop_assert!(ibp.contains(v, 1e-9));
                let affine = raw.eval(&theta);
                prop_assert!(affine.lo <= v + 1e-9 && v <= affine.hi + 1e-9,
                    "logit {} outside [{}, {}]", v, affine.lo, affine.hi);
                let clipped = lin.eval(&theta);
                prop_assert!(clipped.lo <= v + 1e-9 && v <= clipped.hi + 1e-9);
            }
        }

        #[test]
        fn ibp_monotone_in_kappa(seed in any::<u64>(), k1 in 0.0f64..0.1, extra in 0.0f64..0.1) {
            let p = random_net(seed, &[2, 4, 3, 1]);
            let x = [0.3, 0.9];
            let small = ibp_forward(&build_param_box(&p, &MultiplicitySpec::linf(k1)), &x).unwrap();
            let large = ibp_forward(&build_param_box(&p, &MultiplicitySpec::linf(k1 + extra)), &x).unwrap();
            prop_assert!(large.contains_interval(&small, 1e-12));
        }
    }
}
