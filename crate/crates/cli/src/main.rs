mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use certcf_core::bounds::{MultiplicitySpec, Norm};
use certcf_core::certify::{certify_dataset, certify_pairs, rate, CertifyError, Certificate};
use certcf_core::data::{read_feature_csv, write_feature_csv, DataError, Provenance, SplitDataset};
use certcf_core::eval::{proximity, reports_csv, run_protocol, sparsity, timing_benchmark, EvalError, EvalReport, Variation};
use certcf_core::model::{JointModel, ModelError};
use certcf_core::simul::{Method, SimulError};
use certcf_core::train::{evaluate, train, EpochLog, TrainError};

use config::LoadedConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Schema(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Csv(_) | DataError::Cache(_) | DataError::Json(_) => {
                CliError::Usage(e.to_string())
            }
            DataError::SchemaMismatch(m) => CliError::Schema(m),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Dimension { .. } => CliError::Schema(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SimulError> for CliError {
    fn from(e: SimulError) -> Self {
        match e {
            SimulError::Bounds(_) | SimulError::Length { .. } => CliError::Schema(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<CertifyError> for CliError {
    fn from(e: CertifyError) -> Self {
        match e {
            CertifyError::Model(m) => m.into(),
            CertifyError::Simul(s) => s.into(),
            CertifyError::Empty => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Schema(m) => CliError::Schema(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Data(d) => d.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Schema => CliError::Schema(e.to_string()),
            EvalError::FleetTooSmall(_) => CliError::Config(e.to_string()),
            EvalError::EmptyTrain => CliError::Usage(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "certcf", version, about = "Train, certify and evaluate robust counterfactual generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and counterfactual generator from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify counterfactuals of a trained model.
    Certify {
        #[arg(long)]
        model: PathBuf,
        /// Feature CSV (id, features, label). Counterfactuals come from the model.
        #[arg(long, required_unless_present = "pairs")]
        data: Option<PathBuf>,
        /// JSON array of `{"id", "x", "x_prime"}` objects.
        #[arg(long, conflicts_with = "data")]
        pairs: Option<PathBuf>,
        #[arg(long, default_value = "simul-crown")]
        method: Method,
        #[arg(long, default_value_t = 0.05)]
        kappa: f64,
        #[arg(long, default_value = "inf")]
        norm: String,
        /// Uniform radius for every parameter; overrides κ.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = "certificates.json")]
        out: PathBuf,
    },
    /// Generate counterfactuals for a feature CSV.
    GenCf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "counterfactuals.csv")]
        out: PathBuf,
        /// Print mean per-counterfactual latency over 1000 generations.
        #[arg(long)]
        timing: bool,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Cross-model validity of a fleet (RI, LOO) or under distribution shift (DS).
    EvalXmodel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variation: Variation,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fleet_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate evaluation reports into one CSV table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Aggregate even when config hashes differ.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct LogLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    log: &'a EpochLog,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    config: &'a str,
    model_fingerprint: String,
    dataset: &'a Provenance,
    train_rows: usize,
    test_rows: usize,
    test_accuracy: f64,
    test_validity: f64,
    robustness_rate: f64,
    method: Method,
    epochs_run: usize,
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    config_hash: String,
    config: String,
    report: EvalReport,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairDoc {
    id: usize,
    x: Vec<f64>,
    x_prime: Vec<f64>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<JointModel> {
    JointModel::from_json(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn feature_csv(data: &SplitDataset, test: bool) -> Result<String> {
    let mut buf = Vec::new();
    write_feature_csv(&mut buf, if test { &data.test } else { &data.train }, &data.schema)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let cfg = LoadedConfig::load(config, seed)?;
    let (data, _) = cfg.datasets()?;
    let dir = cfg.output_dir(out);
    let (mut model, logs) = train(&data, &cfg.config.train)?;
    model.config_hash = Some(cfg.hash.clone());

    let spec = cfg.certify_spec();
    let w = &cfg.config.train.weights;
    let (acc, validity, _, _) = evaluate(&model, &data.test, &spec, w)?;
    let certs = certify_dataset(&model, &spec, &data.test, cfg.config.certify.method)?;

    let model_json = model.to_json()?;
    write_text(&dir.join("model.json"), &model_json)?;
    let mut log_text = String::new();
    for l in &logs {
        let line = LogLine {
            config_hash: &cfg.hash,
            log: l,
        };
        log_text.push_str(&serde_json::to_string(&line).expect("plain struct"));
        log_text.push('\n');
    }
    write_text(&dir.join("train_log.jsonl"), &log_text)?;
    write_text(&dir.join("train.csv"), &feature_csv(&data, false)?)?;
    write_text(&dir.join("test.csv"), &feature_csv(&data, true)?)?;
    let manifest = Manifest {
        config_hash: &cfg.hash,
        config: &cfg.text,
        model_fingerprint: model.fingerprint()?,
        dataset: &data.provenance,
        train_rows: data.train.len(),
        test_rows: data.test.len(),
        test_accuracy: acc,
        test_validity: validity,
        robustness_rate: rate(&certs),
        method: cfg.config.certify.method,
        epochs_run: logs.len(),
    };
    write_text(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("plain struct"),
    )?;
    println!(
        "trained {} epochs: accuracy {:.4}, validity {:.4}, robustness rate ({}, kappa {}) {:.4}",
        logs.len(),
        acc,
        validity,
        cfg.config.certify.method,
        spec.kappa,
        rate(&certs)
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn parse_norm(s: &str) -> Result<Norm> {
    match s {
        "inf" | "linf" => Ok(Norm::Inf),
        "2" | "l2" => Ok(Norm::L2),
        "1" | "l1" => Ok(Norm::L1),
        other => Err(CliError::Usage(format!("unknown norm `{other}` (inf, l2, l1)"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_certify(
    model: &Path,
    data: Option<&Path>,
    pairs: Option<&Path>,
    method: Method,
    kappa: f64,
    norm: &str,
    delta: Option<f64>,
    out: &Path,
) -> Result<bool> {
    let m = load_model(model)?;
    if !(0.0..=1.0).contains(&kappa) {
        return Err(CliError::Usage(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    if delta.is_some_and(|d| !(d >= 0.0 && d.is_finite())) {
        return Err(CliError::Usage("delta must be a finite non-negative number".into()));
    }
    let spec = MultiplicitySpec {
        norm: parse_norm(norm)?,
        kappa,
        delta,
    };
    let certs: Vec<Certificate> = if let Some(p) = pairs {
        let docs: Vec<PairDoc> = serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let width = m.input_dim();
        for d in &docs {
            if d.x.len() != width || d.x_prime.len() != width {
                return Err(CliError::Schema(format!(
                    "pair {} has {} / {} features, model expects {width}",
                    d.id,
                    d.x.len(),
                    d.x_prime.len()
                )));
            }
        }
        let items: Vec<_> = docs.into_iter().map(|d| (d.id, d.x, d.x_prime)).collect();
        certify_pairs(&m, &spec, &items, method)?
    } else {
        let path = data.expect("clap enforces --data or --pairs");
        let samples = read_feature_csv(path, &m.schema)?;
        certify_dataset(&m, &spec, &samples, method)?
    };
    write_text(out, &serde_json::to_string_pretty(&certs).expect("plain struct"))?;
    let robust = certs.iter().filter(|c| c.robust).count();
    let invalid = certs.iter().filter(|c| c.worst_logit.is_none()).count();
    println!(
        "robustness rate {:.4} ({robust}/{} certified, {invalid} invalid on f) method {method} kappa {kappa}{}",
        rate(&certs),
        certs.len(),
        delta.map(|d| format!(" delta {d}")).unwrap_or_default()
    );
    Ok(robust == certs.len())
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn cmd_gen_cf(model: &Path, input: &Path, out: &Path, timing: bool, repeats: usize) -> Result<()> {
    let m = load_model(model)?;
    let samples = read_feature_csv(input, &m.schema)?;
    let hash = m.config_hash.clone().unwrap_or_default();
    let mut text = String::from("id,");
    for c in m.schema.column_names() {
        text.push_str(&c);
        text.push(',');
    }
    text.push_str("valid,proximity,sparsity,config_hash\n");
    let mut valid = 0usize;
    for (id, x) in samples.ids.iter().zip(&samples.features) {
        let xp = m.generate_cf(x)?;
        let ok = m.predict(&xp)? != m.predict(x)?;
        valid += usize::from(ok);
        let _ = writeln!(
            text,
            "{id},{},{},{:?},{:?},{hash}",
            fmt_row(&xp),
            u8::from(ok),
            proximity(x, &xp),
            sparsity(x, &xp)
        );
    }
    write_text(out, &text)?;
    println!("{} counterfactuals, {valid} valid, written to {}", samples.len(), out.display());
    if timing {
        if samples.is_empty() {
            println!("timing skipped: no input rows");
        } else {
            let t = timing_benchmark(&m, &samples, 1000, repeats)?;
            println!(
                "mean per-CF latency {:.3e} s{} over {} CFs x {} repeats",
                t.mean,
                t.std.map(|s| format!(" (std {s:.3e})")).unwrap_or_default(),
                t.n_cfs,
                t.repeats
            );
        }
    }
    Ok(())
}

fn variation_name(v: Variation) -> &'static str {
    match v {
        Variation::Ri => "ri",
        Variation::Loo => "loo",
        Variation::Ds => "ds",
    }
}

fn cmd_eval(config: &Path, variation: Variation, seed: Option<u64>, fleet_size: Option<usize>, out: Option<&Path>) -> Result<()> {
    let mut cfg = LoadedConfig::load(config, seed)?;
    cfg.config.fleet.variation = variation;
    if let Some(n) = fleet_size {
        cfg.config.fleet.fleet_size = n;
    }
    let (data, shifted) = cfg.datasets()?;
    if variation == Variation::Ds && shifted.is_none() {
        return Err(CliError::Config("variation ds needs a shifted dataset (dataset.shifted_path)".into()));
    }
    info!("running {} protocol with {} members", variation_name(variation), cfg.config.fleet.fleet_size);
    let report = run_protocol(&cfg.config.name, &data, shifted.as_ref(), &cfg.config.train, &cfg.config.fleet)?;
    let dir = cfg.output_dir(out);
    let name = variation_name(variation);
    let file = EvalFile {
        config_hash: cfg.hash.clone(),
        config: cfg.text.clone(),
        report,
    };
    write_text(
        &dir.join(format!("eval_{name}.json")),
        &serde_json::to_string_pretty(&file).expect("plain struct"),
    )?;
    write_text(&dir.join(format!("eval_{name}.csv")), &reports_csv(std::slice::from_ref(&file.report)))?;
    let r = &file.report;
    println!(
        "{name} validity {:.4} (std {:.4}) over {} {}",
        r.validity.mean,
        r.validity.std,
        r.fleet_size,
        if variation == Variation::Ds { "trials" } else { "models" }
    );
    if !r.trials.is_empty() {
        println!("trials {:?}", r.trials);
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], force: bool, out: Option<&Path>) -> Result<()> {
    let mut files = Vec::with_capacity(inputs.len());
    for p in inputs {
        let f: EvalFile = serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        files.push((p, f));
    }
    let first = &files[0].1.config_hash;
    let mismatched: Vec<_> = files
        .iter()
        .filter(|(_, f)| &f.config_hash != first)
        .map(|(p, _)| p.display().to_string())
        .collect();
    if !mismatched.is_empty() && !force {
        return Err(CliError::Config(format!(
            "config hash differs from {} in: {}; pass --force to aggregate anyway",
            files[0].0.display(),
            mismatched.join(", ")
        )));
    }
    let reports: Vec<EvalReport> = files.into_iter().map(|(_, f)| f.report).collect();
    let table = reports_csv(&reports);
    match out {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CERTCF_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("CERTCF_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref())?,
        Command::Certify {
            model,
            data,
            pairs,
            method,
            kappa,
            norm,
            delta,
            out,
        } => {
            let all = cmd_certify(&model, data.as_deref(), pairs.as_deref(), method, kappa, &norm, delta, &out)?;
            if !all {
                return Ok(ExitCode::from(1));
            }
        }
        Command::GenCf {
            model,
            input,
            out,
            timing,
            repeats,
        } => cmd_gen_cf(&model, &input, &out, timing, repeats)?,
        Command::EvalXmodel {
            config,
            variation,
            seed,
            fleet_size,
            out,
        } => cmd_eval(&config, variation, seed, fleet_size, out.as_deref())?,
        Command::Report { inputs, force, out } => cmd_report(&inputs, force, out.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
