//! MLP parameters and the joint classifier / counterfactual-generator model.
//!
//! The classifier `f` is an encoder trunk of ReLU layers followed by a single
//! linear unit whose output (the logit) goes through a sigmoid. The generator
//! `g` is a head over the encoder output that predicts a delta `Δx`; the
//! counterfactual is `project(x + Δx)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Var};
use crate::data::{FeatureGroup, FeatureSchema};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("layer {layer}: input width {got} does not chain with previous output {expected}")]
    Chain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("flattened parameter length {got} does not match {expected}")]
    FlatLength { expected: usize, got: usize },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
            Activation::Sigmoid => autodiff::sigmoid(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Tensor,
    /// `out × 1`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Self {
        assert_eq!(bias.shape(), (weight.rows(), 1), "bias must be out x 1");
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-activation `W h + b`.
    pub fn affine(&self, h: &[f64]) -> Vec<f64> {
        let (m, n) = self.weight.shape();
        let w = self.weight.data();
        let b = self.bias.data();
        (0..m)
            .map(|j| {
                let row = &w[j * n..(j + 1) * n];
                row.iter().zip(h).map(|(a, x)| a * x).sum::<f64>() + b[j]
            })
            .collect()
    }
}

/// Ordered dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].inputs() != pair[0].outputs() {
                return Err(ModelError::Chain {
                    layer: i + 1,
                    expected: pair[0].outputs(),
                    got: pair[1].inputs(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Layers with the given widths (`dims[0]` inputs), ReLU on every
    /// layer but the last, which gets `last`. Weights are drawn uniformly
    /// from `±sqrt(6 / fan_in)`, biases start at zero.
    pub fn init(dims: &[usize], last: Activation, rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (n, m) = (w[0], w[1]);
                let bound = (6.0 / n.max(1) as f64).sqrt();
                let data = (0..m * n).map(|_| rng.random_range(-bound..bound)).collect();
                let act = if i + 2 == dims.len() { last } else { Activation::Relu };
                Layer::new(Tensor::new(m, n, data), Tensor::zeros(m, 1), act)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Layer 0 weights row-major, layer 0 bias, layer 1 weights, ...
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` for shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<MlpParams> {
        if flat.len() != self.num_params() {
            return Err(ModelError::FlatLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = flat[at..at + n].to_vec();
            at += n;
            s
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (m, n) = l.weight.shape();
                let w = Tensor::new(m, n, take(m * n));
                let b = Tensor::new(m, 1, take(m));
                Layer::new(w, b, l.activation)
            })
            .collect();
        Ok(MlpParams { layers })
    }

    /// Output of the full stack, activations included.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.affine(&h).into_iter().map(|v| l.activation.apply(v)).collect();
        }
        Ok(h)
    }

    /// Post-ReLU activations of every hidden layer, followed by the final
    /// pre-activation.
    pub fn trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.affine(&h);
            if i + 1 == self.layers.len() {
                out.push(z);
                break;
            }
            h = z.iter().map(|v| v.max(0.0)).collect();
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Final pre-activation of a single-output network.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        Ok(self.trace(x)?.last().map_or(0.0, |z| z[0]))
    }

    /// `f̂(x) = σ(logit)`.
    pub fn predict_soft(&self, x: &[f64]) -> Result<f64> {
        Ok(autodiff::sigmoid(self.logit(x)?))
    }

    /// 1 iff `f̂(x) ≥ 0.5`, i.e. iff the logit is non-negative.
    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(self.logit(x)? >= 0.0))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Records every weight and bias as a leaf on `tape`.
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> Vec<LayerVars<'t>> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                w: tape.var(l.weight.clone()),
                b: tape.var(l.bias.clone()),
                activation: l.activation,
            })
            .collect()
    }

    /// Reads the per-layer gradients back in flattening order.
    pub fn grads_of(vars: &[LayerVars<'_>], grads: &autodiff::Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for l in vars {
            out.extend(grads.wrt(&l.w).into_data());
            out.extend(grads.wrt(&l.b).into_data());
        }
        out
    }
}

/// Parameters of one layer recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
    pub activation: Activation,
}

/// Runs a tape-recorded stack on `x` and returns the output of the last
/// layer before its activation.
pub fn forward_pre_tape<'t>(layers: &[LayerVars<'t>], x: Var<'t>) -> autodiff::Result<Var<'t>> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let z = l.w.matmul(&h)?.add(&l.b)?;
        if i + 1 == layers.len() {
            return Ok(z);
        }
        h = apply_tape(l.activation, z);
    }
    Ok(h)
}

/// Runs a tape-recorded stack including the final activation.
pub fn forward_tape<'t>(layers: &[LayerVars<'t>], x: Var<'t>) -> autodiff::Result<Var<'t>> {
    match layers.last() {
        Some(last) => Ok(apply_tape(last.activation, forward_pre_tape(layers, x)?)),
        None => Ok(x),
    }
}

fn apply_tape(act: Activation, z: Var<'_>) -> Var<'_> {
    match act {
        Activation::Relu => z.relu(),
        Activation::Identity => z,
        Activation::Sigmoid => z.sigmoid(),
    }
}

/// Clamps continuous dimensions to `[0, 1]` and snaps each one-hot group
/// to its argmax (ties to the lowest index).
pub fn project_features(raw: &[f64], schema: &FeatureSchema) -> Result<Vec<f64>> {
    if raw.len() != schema.width() {
        return Err(ModelError::Dimension {
            expected: schema.width(),
            got: raw.len(),
        });
    }
    let mut out = raw.to_vec();
    for g in schema.groups() {
        match g {
            FeatureGroup::Continuous(i) => out[i] = raw[i].clamp(0.0, 1.0),
            FeatureGroup::OneHot { start, len } => {
                let group = &raw[start..start + len];
                let mut best = 0;
                for (k, &v) in group.iter().enumerate() {
                    if v > group[best] {
                        best = k;
                    }
                }
                for k in 0..len {
                    out[start + k] = if k == best { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(out)
}

/// Hidden-layer widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub encoder: Vec<usize>,
    pub cf_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder: vec![16, 16],
            cf_hidden: vec![16],
        }
    }
}

/// Classifier `f` (encoder + predictor) and generator head `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub schema: FeatureSchema,
    /// Encoder layers followed by the single-unit predictor.
    pub classifier: MlpParams,
    /// Number of leading classifier layers that form the shared encoder.
    pub encoder_depth: usize,
    /// Maps the encoding to `Δx`.
    pub cf_head: MlpParams,
    /// Hash of the run configuration that produced the model, if any.
    pub config_hash: Option<String>,
}

impl JointModel {
    pub fn init(schema: FeatureSchema, arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = schema.width();
        let mut dims = vec![d];
        dims.extend(&arch.encoder);
        dims.push(1);
        let classifier = MlpParams::init(&dims, Activation::Sigmoid, &mut rng);
        let enc_out = *dims[..=arch.encoder.len()].last().expect("non-empty");
        let mut g_dims = vec![enc_out];
        g_dims.extend(&arch.cf_hidden);
        g_dims.push(d);
        let mut cf_head = MlpParams::init(&g_dims, Activation::Identity, &mut rng);
        // A small output layer keeps early counterfactuals near x.
        if let Some(last) = cf_head.layers.last_mut() {
            last.weight = last.weight.map(|v| 0.1 * v);
        }
        Self {
            schema,
            classifier,
            encoder_depth: arch.encoder.len(),
            cf_head,
            config_hash: None,
        }
    }

    /// Builds a model with an explicit classifier and an all-zero
    /// generator head of the given hidden widths.
    pub fn with_classifier(schema: FeatureSchema, classifier: MlpParams, encoder_depth: usize, cf_hidden: &[usize]) -> Result<Self> {
        if classifier.input_dim() != schema.width() {
            return Err(ModelError::Dimension {
                expected: schema.width(),
                got: classifier.input_dim(),
            });
        }
        let enc_out = if encoder_depth == 0 {
            schema.width()
        } else {
            classifier.layers[encoder_depth - 1].outputs()
        };
        let mut dims = vec![enc_out];
        dims.extend(cf_hidden);
        dims.push(schema.width());
        let mut cf_head = MlpParams::init(&dims, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0));
        for l in &mut cf_head.layers {
            l.weight = Tensor::zeros(l.outputs(), l.inputs());
        }
        Ok(Self {
            schema,
            classifier,
            encoder_depth,
            cf_head,
            config_hash: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.schema.width()
    }

    pub fn encoder_layers(&self) -> &[Layer] {
        &self.classifier.layers[..self.encoder_depth]
    }

    /// Shared encoding of `x`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.classifier.check_input(x)?;
        let mut h = x.to_vec();
        for l in self.encoder_layers() {
            h = l.affine(&h).into_iter().map(|v| l.activation.apply(v)).collect();
        }
        Ok(h)
    }

    pub fn predict_soft(&self, x: &[f64]) -> Result<f64> {
        self.classifier.predict_soft(x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        self.classifier.predict(x)
    }

    /// `x + Δx` before projection.
    pub fn raw_cf(&self, x: &[f64]) -> Result<Vec<f64>> {
        let delta = self.cf_head.forward(&self.encode(x)?)?;
        Ok(x.iter().zip(&delta).map(|(a, d)| a + d).collect())
    }

    /// `x′ = project(x + Δx)`.
    pub fn generate_cf(&self, x: &[f64]) -> Result<Vec<f64>> {
        project_features(&self.raw_cf(x)?, &self.schema)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            format_version: FORMAT_VERSION,
            feature_schema: self.schema.clone(),
            encoder_depth: self.encoder_depth,
            classifier: self.classifier.layers.iter().map(LayerDoc::from).collect(),
            cf_head: self.cf_head.layers.iter().map(LayerDoc::from).collect(),
            config_hash: self.config_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        let layers = |docs: &[LayerDoc]| -> Result<MlpParams> {
            MlpParams::new(docs.iter().map(Layer::try_from).collect::<Result<_>>()?)
        };
        let classifier = layers(&doc.classifier)?;
        let cf_head = layers(&doc.cf_head)?;
        if doc.encoder_depth >= classifier.layers.len().max(1) {
            return Err(ModelError::Format("encoder depth leaves no predictor layer".into()));
        }
        if classifier.input_dim() != doc.feature_schema.width() || classifier.output_dim() != 1 {
            return Err(ModelError::Format("classifier shape does not match schema".into()));
        }
        Ok(Self {
            schema: doc.feature_schema,
            classifier,
            encoder_depth: doc.encoder_depth,
            cf_head,
            config_hash: doc.config_hash,
        })
    }

    /// SHA-256 (hex) of the serialized model.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    feature_schema: FeatureSchema,
    encoder_depth: usize,
    classifier: Vec<LayerDoc>,
    cf_head: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    activation: Activation,
    weight: Vec<String>,
    bias: Vec<String>,
}

impl From<&Layer> for LayerDoc {
    fn from(l: &Layer) -> Self {
        let fmt = |t: &Tensor| t.data().iter().map(|v| format!("{v:?}")).collect();
        Self {
            rows: l.outputs(),
            cols: l.inputs(),
            activation: l.activation,
            weight: fmt(&l.weight),
            bias: fmt(&l.bias),
        }
    }
}

impl TryFrom<&LayerDoc> for Layer {
    type Error = ModelError;

    fn try_from(d: &LayerDoc) -> Result<Self> {
        let parse = |v: &[String]| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| ModelError::Format(format!("bad number {s:?}")))
                })
                .collect()
        };
        let w = parse(&d.weight)?;
        let b = parse(&d.bias)?;
        if w.len() != d.rows * d.cols || b.len() != d.rows {
            return Err(ModelError::Format(format!(
                "layer {}x{} has {} weights and {} biases",
                d.rows,
                d.cols,
                w.len(),
                b.len()
            )));
        }
        Ok(Layer::new(
            Tensor::new(d.rows, d.cols, w),
            Tensor::new(d.rows, 1, b),
            d.activation,
        ))
    }
}
