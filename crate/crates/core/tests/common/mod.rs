//! Randomized checks shared by the integration tests and the acceptance
//! target. Each returns counts so callers can both assert and report.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certcf_core::autodiff::sigmoid;
use certcf_core::bounds::{build_param_box, MultiplicitySpec};
use certcf_core::certify::Certifier;
use certcf_core::data::FeatureSchema;
use certcf_core::losses::{loss_robust, loss_validity, LossWeights};
use certcf_core::model::{Activation, Architecture, JointModel, Layer, MlpParams};
use certcf_core::simul::{exhaustive_solve, greedy_solve, worst_logit, Method, SimulProblem};
use certcf_core::tensor::Tensor;
use certcf_core::train::{grad_f, grad_g};

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

/// ReLU network `d → h → … → h → 1` with `hidden` hidden layers and a
/// sigmoid head.
pub fn random_net(rng: &mut ChaCha8Rng, d: usize, h: usize, hidden: usize) -> MlpParams {
    let mut layers = Vec::with_capacity(hidden + 1);
    let mut fan_in = d;
    for _ in 0..hidden {
        layers.push(Layer::new(
            Tensor::new(h, fan_in, uniform(rng, h * fan_in, 1.0)),
            Tensor::new(h, 1, uniform(rng, h, 0.5)),
            Activation::Relu,
        ));
        fan_in = h;
    }
    layers.push(Layer::new(
        Tensor::new(1, fan_in, uniform(rng, fan_in, 1.0)),
        Tensor::scalar(rng.random_range(-0.5..0.5)),
        Activation::Sigmoid,
    ));
    MlpParams::new(layers).unwrap()
}

#[derive(Debug, Default)]
pub struct OracleStats {
    pub instances: usize,
    pub infeasible: usize,
    pub tied: usize,
    pub mismatches: usize,
    pub max_err: f64,
}

fn quarter(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    (rng.random_range(-r..r) * 4.0).round() / 4.0
}

/// Two trade candidates share a ratio `|μᵢ/αᵢ|`.
fn has_tied_ratio(p: &SimulProblem) -> bool {
    let ratios: Vec<f64> = (0..p.mu.len())
        .filter(|&i| p.alpha[i] != 0.0 && p.mu[i] != 0.0)
        .map(|i| (p.mu[i] / p.alpha[i]).abs())
        .collect();
    ratios.iter().enumerate().any(|(i, a)| ratios[i + 1..].iter().any(|b| (a - b).abs() < 1e-12))
}

pub fn random_simul_problem(rng: &mut ChaCha8Rng, kind: usize) -> SimulProblem {
    let n = rng.random_range(1..=6);
    let lo: Vec<f64> = (0..n).map(|_| quarter(rng, 2.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + quarter(rng, 2.0).abs()).collect();
    let alpha: Vec<f64> = (0..n).map(|_| quarter(rng, 3.0)).collect();
    let mut mu: Vec<f64> = (0..n).map(|_| quarter(rng, 3.0)).collect();
    let label = rng.random_range(0..2u8);
    let mut beta = quarter(rng, 4.0);
    match kind {
        // The constraint cannot be met anywhere in the box.
        0 => {
            let reach: f64 = (0..n)
                .map(|i| (alpha[i] * lo[i]).max(alpha[i] * hi[i]))
                .sum();
            let floor: f64 = (0..n)
                .map(|i| (alpha[i] * lo[i]).min(alpha[i] * hi[i]))
                .sum();
            beta = if label == 1 { -reach - 1.0 } else { -floor + 1.0 };
        }
        // Every index trades at the same price.
        1 => {
            let c = if rng.random_bool(0.5) { -1.5 } else { 1.5 };
            for i in 0..n {
                mu[i] = c * alpha[i];
            }
        }
        _ => {}
    }
    SimulProblem {
        mu,
        nu: quarter(rng, 1.0),
        alpha,
        beta,
        lo,
        hi,
        label,
    }
}

pub fn oracle_suite(instances: usize, seed: u64) -> OracleStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleStats::default();
    for k in 0..instances {
        let p = random_simul_problem(&mut rng, k % 4);
        let g = greedy_solve(&p).unwrap();
        let o = exhaustive_solve(&p).unwrap();
        s.instances += 1;
        if o.is_infinite() {
            s.infeasible += 1;
            if g != o {
                s.mismatches += 1;
            }
            continue;
        }
        if has_tied_ratio(&p) {
            s.tied += 1;
        }
        let err = (g - o).abs();
        s.max_err = s.max_err.max(err);
        if err > 1e-9 {
            s.mismatches += 1;
        }
    }
    s
}

#[derive(Debug, Default)]
pub struct SandwichStats {
    pub models: usize,
    pub violations: usize,
    /// Largest amount by which a looser bound fell below a tighter one.
    pub max_excess: f64,
    pub min_agreeing: usize,
    pub simul_tighter: usize,
    pub crown_tighter: usize,
}

/// Sampled worst loss ≤ Simul-CROWN ≤ CROWN-IBP ≤ IBP on random
/// two-layer models.
pub fn sandwich(models: usize, samples: usize, kappa: f64, hidden: usize, seed: u64) -> SandwichStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MultiplicitySpec::linf(kappa);
    let mut s = SandwichStats {
        min_agreeing: usize::MAX,
        ..SandwichStats::default()
    };
    for _ in 0..models {
        let d = rng.random_range(2..=4);
        let h = rng.random_range(3..=6);
        let f = random_net(&mut rng, d, h, hidden);
        let x = uniform(&mut rng, d, 1.0);
        let xp = uniform(&mut rng, d, 1.0);
        let y_hat = f.predict(&x).unwrap();
        let pbox = build_param_box(&f, &spec);
        let l = |m| loss_robust(m, &pbox, &x, &xp, y_hat).unwrap();
        let (simul, crown, ibp) = (l(Method::SimulCrown), l(Method::CrownIbp), l(Method::Ibp));
        let mut sampled = f64::NEG_INFINITY;
        let mut agreeing = 0;
        for _ in 0..samples {
            let g = pbox.sample_with_edges(&mut rng, 0.3);
            if g.predict(&x).unwrap() == y_hat {
                agreeing += 1;
                sampled = sampled.max(loss_validity(sigmoid(g.logit(&xp).unwrap()), y_hat));
            }
        }
        s.models += 1;
        s.min_agreeing = s.min_agreeing.min(agreeing);
        let chain = [sampled, simul, crown, ibp];
        for w in chain.windows(2) {
            let excess = w[0] - w[1];
            if excess > 0.0 {
                s.max_excess = s.max_excess.max(excess);
            }
            if excess > 1e-6 {
                s.violations += 1;
            }
        }
        let t = |m| worst_logit(m, &pbox, &x, &xp, y_hat).unwrap();
        let (ts, tc, ti) = (t(Method::SimulCrown), t(Method::CrownIbp), t(Method::Ibp));
        let tighter = |a: f64, b: f64| if y_hat == 1 { a < b - 1e-9 } else { a > b + 1e-9 };
        s.simul_tighter += usize::from(tighter(ts, tc));
        s.crown_tighter += usize::from(tighter(tc, ti));
    }
    s
}

#[derive(Debug, Default)]
pub struct GradStats {
    pub points: usize,
    pub rejected: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    pub simul_active: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// `|a − fd| ≤ 1e-4·max(|a|, |fd|) + 1e-8`.
fn close(a: f64, fd: f64) -> bool {
    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-8
}

/// Central differences of `value` around `theta`, or `None` at a kink
/// (one-sided slopes disagree).
fn central_diffs(theta: &[f64], h: f64, value: impl Fn(&[f64]) -> f64) -> Option<Vec<f64>> {
    let v0 = value(theta);
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut p = theta.to_vec();
        p[i] += h;
        let mut m = theta.to_vec();
        m[i] -= h;
        let (vp, vm) = (value(&p), value(&m));
        let (fwd, bwd) = ((vp - v0) / h, (v0 - vm) / h);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) {
            return None;
        }
        out.push((vp - vm) / (2.0 * h));
    }
    Some(out)
}

/// A joint model and instance for the gradient check. Odd `k` gives a
/// linear classifier with `x` near the boundary and `x′` roughly opposite
/// to it, where the agreement constraint tends to bind; even `k` gives a
/// one-hidden-layer classifier on `[0, 1]` inputs.
fn gradient_case(rng: &mut ChaCha8Rng, k: usize) -> (JointModel, Vec<f64>, Vec<f64>) {
    let schema = FeatureSchema::continuous(&["a", "b", "c"]);
    let mut model = if k % 2 == 1 {
        let f = random_net(rng, 3, 1, 0);
        let mut m = JointModel::with_classifier(schema, f, 0, &[4]).unwrap();
        m.cf_head = MlpParams::init(&[3, 4, 3], Activation::Identity, rng);
        m
    } else {
        let arch = Architecture {
            encoder: vec![5],
            cf_hidden: vec![4],
        };
        JointModel::init(schema, &arch, rng.random())
    };
    for l in &mut model.cf_head.layers {
        l.weight = l.weight.map(|v| v * 3.0);
    }
    if k % 2 == 1 {
        let x = uniform(rng, 3, 1.0);
        let xp = x.iter().map(|v| -v + rng.random_range(-0.2..0.2)).collect();
        // Put x close to the decision boundary.
        let l = &mut model.classifier.layers[0];
        let wx: f64 = l.weight.data().iter().zip(&x).map(|(a, b)| a * b).sum();
        l.bias = Tensor::scalar(-wx + rng.random_range(-0.2..0.2));
        (model, x, xp)
    } else {
        let x = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        let xp = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        (model, x, xp)
    }
}

/// Autodiff gradients of `L_f` (classifier parameters) and `L_g`
/// (generator parameters) with Simul-CROWN against central differences.
pub fn gradient_check(points: usize, kappa: f64, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 0.2,
        lambda4: 1.0,
        method: Method::SimulCrown,
    };
    let spec = MultiplicitySpec::linf(kappa);
    let h = 1e-5;
    let mut s = GradStats::default();
    let mut attempts = 0;
    while s.points < points && attempts < points * 20 {
        let (model, x, xp) = gradient_case(&mut rng, attempts);
        attempts += 1;
        let y = rng.random_range(0..2u8);
        let radii = spec.radii(&model.classifier);

        let theta = model.classifier.flatten();
        let f_at = |t: &[f64]| {
            let f = model.classifier.unflatten(t).unwrap();
            grad_f(&w, &f, &radii, &x, y, &xp).unwrap().0
        };
        let phi = model.cf_head.flatten();
        let g_at = |p: &[f64]| {
            let mut m = model.clone();
            m.cf_head = m.cf_head.unflatten(p).unwrap();
            grad_g(&w, &m, &radii, &x, y).unwrap().0
        };
        let (Some(fd_f), Some(fd_g)) = (central_diffs(&theta, h, f_at), central_diffs(&phi, h, g_at)) else {
            s.rejected += 1;
            continue;
        };
        let (_, an_f) = grad_f(&w, &model.classifier, &radii, &x, y, &xp).unwrap();
        let (_, an_g) = grad_g(&w, &model, &radii, &x, y).unwrap();
        s.points += 1;
        for (a, fd) in an_f.iter().zip(&fd_f).chain(an_g.iter().zip(&fd_g)) {
            s.checked += 1;
            if a.abs().max(fd.abs()) > 1e-8 {
                s.max_rel_err = s.max_rel_err.max(rel_err(*a, *fd));
            }
            if !close(*a, *fd) {
                s.failures += 1;
            }
        }
        let pbox = build_param_box(&model.classifier, &spec);
        let y_hat = model.classifier.predict(&x).unwrap();
        let cf = model.generate_cf(&x).unwrap();
        if [&xp, &cf].iter().any(|xp| {
            let ts = worst_logit(Method::SimulCrown, &pbox, &x, xp, y_hat).unwrap();
            let tc = worst_logit(Method::CrownIbp, &pbox, &x, xp, y_hat).unwrap();
            (ts - tc).abs() > 1e-9
        }) {
            s.simul_active += 1;
        }
    }
    s
}

#[derive(Debug, Default)]
pub struct AuditStats {
    pub certificates: usize,
    pub candidates: usize,
    pub samples_each: usize,
    pub short_of_samples: usize,
    pub violations: usize,
}

/// Samples agreeing models for robust certificates and counts label
/// flips of the counterfactual.
pub fn audit(certs: usize, samples: usize, kappa: f64, seed: u64) -> AuditStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MultiplicitySpec::linf(kappa);
    let mut s = AuditStats {
        samples_each: samples,
        ..AuditStats::default()
    };
    while s.certificates < certs && s.candidates < certs * 200 {
        s.candidates += 1;
        let d = rng.random_range(2..=4);
        let h = rng.random_range(3..=6);
        let f = random_net(&mut rng, d, h, 2);
        let model = JointModel::with_classifier(FeatureSchema::continuous(&["a", "b", "c", "d"][..d]), f.clone(), 1, &[]).unwrap();
        let x = uniform(&mut rng, d, 1.0);
        let xp = uniform(&mut rng, d, 1.0);
        let certifier = Certifier::new(&model, &spec, Method::SimulCrown).unwrap();
        let cert = certifier.certify(s.candidates, &x, &xp).unwrap();
        if !cert.robust {
            continue;
        }
        s.certificates += 1;
        let pbox = certifier.param_box();
        let (y_hat, cf_label) = (f.predict(&x).unwrap(), f.predict(&xp).unwrap());
        let mut agreeing = 0;
        let mut draws = 0;
        while agreeing < samples && draws < samples * 20 {
            draws += 1;
            let g = pbox.sample_with_edges(&mut rng, 0.3);
            if g.predict(&x).unwrap() != y_hat {
                continue;
            }
            agreeing += 1;
            if g.predict(&xp).unwrap() != cf_label {
                s.violations += 1;
            }
        }
        if agreeing < samples {
            s.short_of_samples += 1;
        }
    }
    s
}
