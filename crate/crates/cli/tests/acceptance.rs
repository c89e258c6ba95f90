//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

use certcf_core::autodiff::sigmoid;
use certcf_core::bounds::{build_param_box, concretize, crown_ibp_bounds, ibp_forward, Interval, MultiplicitySpec};
use certcf_core::eval::{timing_benchmark, Stat};
use certcf_core::losses::loss_robust;
use certcf_core::model::{Activation, JointModel, Layer, MlpParams};
use certcf_core::data::read_feature_csv;
use certcf_core::simul::{greedy_solve, worst_logit, Method, SimulProblem};
use certcf_core::tensor::Tensor;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn certcf(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_certcf"))
        .args(args)
        .output()
        .expect("run certcf");
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn example_model() -> MlpParams {
    MlpParams::new(vec![Layer::new(
        Tensor::new(1, 2, vec![1.0, -1.0]),
        Tensor::scalar(-2.0),
        Activation::Sigmoid,
    )])
    .unwrap()
}

fn c1_ibp_crown_golden() -> Outcome {
    let pbox = build_param_box(&example_model(), &MultiplicitySpec::explicit(2.0));
    let x = [-4.0, -1.0];
    let ibp = ibp_forward(&pbox, &x).map_err(|e| e.to_string())?;
    let lin = crown_ibp_bounds(&pbox, &x).map_err(|e| e.to_string())?;
    let conc = concretize(&lin, &pbox).map_err(|e| e.to_string())?;
    let coeffs = vec![-4.0, -1.0, 1.0];
    check(
        ibp == Interval::new(-17.0, 7.0)
            && lin.alpha_hi == coeffs
            && lin.alpha_lo == coeffs
            && lin.beta_hi == 0.0
            && lin.beta_lo == 0.0
            && conc == ibp,
        format!("IBP [{}, {}], CROWN alpha {:?} beta {}, concretized [{}, {}]", ibp.lo, ibp.hi, lin.alpha_hi, lin.beta_hi, conc.lo, conc.hi),
    )
}

fn c2_greedy_golden() -> Outcome {
    let p = SimulProblem {
        mu: vec![-4.0, -1.0, 1.0],
        nu: 0.0,
        alpha: vec![4.0, 1.0, 1.0],
        beta: 0.0,
        lo: vec![-1.0, -3.0, -4.0],
        hi: vec![3.0, 1.0, 0.0],
        label: 1,
    };
    let t = greedy_solve(&p).map_err(|e| e.to_string())?;
    let pbox = build_param_box(&example_model(), &MultiplicitySpec::explicit(2.0));
    let (x, xp) = ([4.0, 1.0], [-4.0, -1.0]);
    let score = |m| worst_logit(m, &pbox, &x, &xp, 1).map(sigmoid).unwrap();
    let (s, c, i) = (score(Method::SimulCrown), score(Method::CrownIbp), score(Method::Ibp));
    let l = loss_robust(Method::SimulCrown, &pbox, &x, &xp, 1).unwrap();
    check(
        t.abs() <= 1e-12 && (s - 0.5).abs() <= 1e-12 && (c - sigmoid(7.0)).abs() <= 1e-12 && (i - sigmoid(7.0)).abs() <= 1e-12 && (l - 0.25).abs() <= 1e-12,
        format!("greedy {t:e}, sigma bounds simul {s} crown {c:.6} ibp {i:.6}"),
    )
}

fn c3_oracle() -> Outcome {
    let s = common::oracle_suite(1000, 2024);
    check(
        s.mismatches == 0 && s.instances == 1000 && s.infeasible >= 100 && s.tied >= 100,
        format!(
            "{} instances, {} infeasible, {} tied, {} mismatches, max error {:e}",
            s.instances, s.infeasible, s.tied, s.mismatches, s.max_err
        ),
    )
}

fn c4_sandwich() -> Outcome {
    let s = common::sandwich(200, 2000, 0.05, 1, 4);
    check(
        s.violations == 0 && s.models == 200 && s.min_agreeing > 0,
        format!(
            "{} models, {} violations, min agreeing samples {}, simul tighter than crown on {}, crown tighter than ibp on {}",
            s.models, s.violations, s.min_agreeing, s.simul_tighter, s.crown_tighter
        ),
    )
}

fn c5_gradients() -> Outcome {
    let s = common::gradient_check(20, 0.05, 5);
    check(
        s.points == 20 && s.failures == 0,
        format!(
            "{} points ({} rejected as non-generic), {} partials, max rel err {:e}, greedy trades active at {} points",
            s.points, s.rejected, s.checked, s.max_rel_err, s.simul_active
        ),
    )
}

struct Runs {
    robust: PathBuf,
    plain: PathBuf,
}

fn train(config: &str, out: &Path) -> Result<Value, String> {
    let cfg = root().join("configs").join(config);
    let (code, text) = certcf(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    if code != 0 {
        return Err(format!("train {config} exited {code}: {text}"));
    }
    Ok(read_json(&out.join("manifest.json")))
}

fn c6_desk_training(runs: &Runs) -> Outcome {
    let r = train("blobs.toml", &runs.robust)?;
    let p = train("blobs_plain.toml", &runs.plain)?;
    let f = |v: &Value, k: &str| v[k].as_f64().unwrap();
    let (acc, val, rr, pr) = (f(&r, "test_accuracy"), f(&r, "test_validity"), f(&r, "robustness_rate"), f(&p, "robustness_rate"));
    check(
        acc >= 0.9 && val >= 0.9 && rr > pr,
        format!(
            "robust: accuracy {acc:.3}, validity {val:.3}, certified {rr:.3}; plain: accuracy {:.3}, certified {pr:.3}",
            f(&p, "test_accuracy")
        ),
    )
}

fn eval(config: &Path, variation: &str, out: &Path) -> Result<Value, String> {
    let (code, text) = certcf(&["eval-xmodel", "--config", config.to_str().unwrap(), "--variation", variation, "--out", out.to_str().unwrap()]);
    if code != 0 {
        return Err(format!("eval-xmodel {variation} exited {code}: {text}"));
    }
    Ok(read_json(&out.join(format!("eval_{variation}.json")))["report"].clone())
}

/// Rates in [0, 1] and the summary recomputed from the stored matrix.
fn consistent_pairs(report: &Value, size: usize) -> bool {
    let pairs = &report["pairs"];
    let m: Vec<Vec<f64>> = serde_json::from_value(pairs["matrix"].clone()).unwrap();
    let mut off = Vec::new();
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                off.push(*v);
            }
        }
    }
    let s = Stat::of(&off);
    m.len() == size
        && off.iter().all(|v| (0.0..=1.0).contains(v))
        && s.mean == report["validity"]["mean"].as_f64().unwrap()
        && s.std == report["validity"]["std"].as_f64().unwrap()
}

fn c7_cross_model(work: &Path) -> Outcome {
    let robust = root().join("configs/blobs.toml");
    let plain = root().join("configs/blobs_plain.toml");
    let mean = |r: &Value| r["validity"]["mean"].as_f64().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for v in ["ri", "loo"] {
        let r = eval(&robust, v, &work.join(format!("robust_{v}")))?;
        let p = eval(&plain, v, &work.join(format!("plain_{v}")))?;
        ok &= consistent_pairs(&r, 5) && consistent_pairs(&p, 5);
        parts.push(format!("{v} robust {:.3} plain {:.3}", mean(&r), mean(&p)));
    }

    let control_cfg = work.join("control.toml");
    let text = std::fs::read_to_string(&plain).unwrap().replace("fleet_size = 5", "fleet_size = 2\nsame_seed = true");
    std::fs::write(&control_cfg, text).unwrap();
    let c = eval(&control_cfg, "ri", &work.join("control"))?;
    ok &= mean(&c) == 1.0 && consistent_pairs(&c, 2);
    parts.push(format!("identical fleet {:.3}", mean(&c)));

    let dr = eval(&robust, "ds", &work.join("robust_ds"))?;
    let dp = eval(&plain, "ds", &work.join("plain_ds"))?;
    let trials = |r: &Value| r["trials"].as_array().map_or(0, Vec::len);
    let std = |r: &Value| r["validity"]["std"].as_f64().unwrap();
    ok &= trials(&dr) >= 3 && trials(&dp) >= 3 && mean(&dr) >= mean(&dp);
    parts.push(format!(
        "ds over {} trials robust {:.3} ({:.3}) plain {:.3} ({:.3})",
        trials(&dr),
        mean(&dr),
        std(&dr),
        mean(&dp),
        std(&dp)
    ));
    check(ok, parts.join("; "))
}

fn c8_audit() -> Outcome {
    let s = common::audit(50, 10_000, 0.05, 8);
    check(
        s.certificates == 50 && s.violations == 0 && s.short_of_samples == 0,
        format!(
            "{} robust certificates from {} candidates, {} agreeing samples each, {} violations",
            s.certificates, s.candidates, s.samples_each, s.violations
        ),
    )
}

fn c9_timing(runs: &Runs) -> Outcome {
    let model = JointModel::from_json(&std::fs::read_to_string(runs.robust.join("model.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let samples = read_feature_csv(&runs.robust.join("test.csv"), &model.schema).map_err(|e| e.to_string())?;
    let t = timing_benchmark(&model, &samples, 1000, 5).map_err(|e| e.to_string())?;
    check(
        t.mean < 1e-3,
        format!("mean {:.3e} s per counterfactual over {} x {}", t.mean, t.n_cfs, t.repeats),
    )
}

fn c10_determinism(runs: &Runs, work: &Path) -> Outcome {
    let again = work.join("robust_again");
    train("blobs.toml", &again)?;
    let same = |name: &str| std::fs::read(runs.robust.join(name)).unwrap() == std::fs::read(again.join(name)).unwrap();
    let model_same = same("model.json") && same("train_log.jsonl") && same("manifest.json");

    let model = runs.robust.join("model.json");
    let data = runs.robust.join("test.csv");
    let mut certs = Vec::new();
    for k in 0..2 {
        let out = work.join(format!("certs_{k}.json"));
        let (code, text) = certcf(&[
            "certify",
            "--model",
            model.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--method",
            "simul-crown",
            "--kappa",
            "0.05",
            "--out",
            out.to_str().unwrap(),
        ]);
        if code > 1 {
            return Err(format!("certify exited {code}: {text}"));
        }
        certs.push(std::fs::read(out).unwrap());
    }
    check(
        model_same && certs[0] == certs[1],
        format!("model/log/manifest identical: {model_same}; certificates identical: {}", certs[0] == certs[1]),
    )
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let runs = Runs {
        robust: work.path().join("robust"),
        plain: work.path().join("plain"),
    };
    let w = work.path();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Duration, Check<'_>)> = vec![
        ("1 IBP/CROWN-IBP golden example", Duration::from_secs(1), Box::new(c1_ibp_crown_golden)),
        ("2 greedy/Simul-CROWN golden example", Duration::from_secs(1), Box::new(c2_greedy_golden)),
        ("3 greedy vs exhaustive oracle", Duration::from_secs(30), Box::new(c3_oracle)),
        ("4 soundness sandwich", Duration::from_secs(300), Box::new(c4_sandwich)),
        ("5 gradient checks", Duration::from_secs(60), Box::new(c5_gradients)),
        ("6 desk-scale training", Duration::from_secs(600), Box::new(|| c6_desk_training(&runs))),
        ("7 cross-model validity protocols", Duration::from_secs(900), Box::new(|| c7_cross_model(w))),
        ("8 certification soundness audit", Duration::from_secs(300), Box::new(c8_audit)),
        ("9 generation latency", Duration::from_secs(60), Box::new(|| c9_timing(&runs))),
        ("10 determinism", Duration::from_secs(600), Box::new(|| c10_determinism(&runs, w))),
    ];
    let mut failed = 0;
    for (name, budget, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (status, detail) = match outcome {
            Ok(d) if took <= *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget {budget:?}")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} criterion {name} [{:.2}s]: {detail}", took.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
