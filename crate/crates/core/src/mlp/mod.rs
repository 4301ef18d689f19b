//! Two-layer dense discriminator: `dense -> batch-norm -> dense -> sigmoid`.
//!
//! Inputs are raw ADC codes; the batch-norm layer absorbs their scale and
//! offset. Weights may be fake-quantized during training (see [`train`]) and
//! the frozen network folds into a single affine hidden stage for the
//! fixed-point engine (see [`fold`]).

pub mod fold;
pub mod quant;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::ReadoutWindow;

pub use fold::{fold_batchnorm, FoldedModel};
pub use quant::{fake_quantize, quantize_weights, QuantScheme, QuantizedTensor};
pub use train::{
    decide, evaluate, init_model, loss_and_gradients, rows_fidelity, train, train_qat,
    train_rows, BnMode, BnStats, EpochRecord, Gradients, TrainConfig, TrainHistory,
};

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("invalid quantization: {0}")]
    BadScheme(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("labels unbalanced beyond 10%: {ground} ground vs {excited} excited")]
    Unbalanced { ground: usize, excited: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Window(#[from] crate::baseline::BaselineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    /// Insert a ReLU after batch-norm. Off for the reference network.
    #[serde(default)]
    pub hidden_relu: bool,
}

impl MlpArch {
    pub fn new(n_in: usize, n_hidden: usize) -> Self {
        MlpArch {
            n_in,
            n_hidden,
            n_out: 1,
            hidden_relu: false,
        }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.n_in < 2 || self.n_hidden < 1 || self.n_out != 1 {
            return Err(MlpError::BadArch(format!(
                "need n_in >= 2, n_hidden >= 1, n_out == 1; got {}x{}x{}",
                self.n_in, self.n_hidden, self.n_out
            )));
        }
        Ok(())
    }

    /// Parameter count, batch-norm statistics included.
    pub fn parameter_count(&self) -> usize {
        let h = self.n_hidden;
        self.n_in * h + h + 4 * h + h * self.n_out + self.n_out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn identity(n: usize, epsilon: f64) -> Self {
        BatchNorm {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            mean: vec![0.0; n],
            var: vec![1.0; n],
            epsilon,
        }
    }
}

/// Keras' default batch-norm epsilon.
pub const BN_EPSILON: f64 = 1e-3;

/// Network parameters. `w1` is `n_hidden x n_in`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub arch: MlpArch,
    /// Readout window the model was trained on, if any.
    pub window: Option<ReadoutWindow>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub bn: BatchNorm,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub quant: QuantScheme,
}

impl MlpModel {
    /// All-zero weights with an identity batch-norm.
    pub fn zeros(arch: MlpArch) -> Self {
        MlpModel {
            arch,
            window: None,
            w1: vec![0.0; arch.n_hidden * arch.n_in],
            b1: vec![0.0; arch.n_hidden],
            bn: BatchNorm::identity(arch.n_hidden, BN_EPSILON),
            w2: vec![0.0; arch.n_hidden],
            b2: 0.0,
            quant: QuantScheme::Float32,
        }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        self.arch.validate()?;
        self.quant.validate()?;
        let h = self.arch.n_hidden;
        let checks = [
            ("w1", self.w1.len(), h * self.arch.n_in),
            ("b1", self.b1.len(), h),
            ("bn.gamma", self.bn.gamma.len(), h),
            ("bn.beta", self.bn.beta.len(), h),
            ("bn.mean", self.bn.mean.len(), h),
            ("bn.var", self.bn.var.len(), h),
            ("w2", self.w2.len(), h),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(MlpError::ShapeMismatch(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if self.bn.var.iter().any(|&v| !(v >= 0.0)) || !(self.bn.epsilon > 0.0) {
            return Err(MlpError::BadArch("batch-norm needs var >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }

    /// First-layer weights as seen by the forward pass.
    pub fn effective_w1(&self) -> Vec<f64> {
        fake_quantize(&self.w1, self.quant)
    }

    pub fn effective_w2(&self) -> Vec<f64> {
        fake_quantize(&self.w2, self.quant)
    }

    /// Replace latent weights by their quantized values.
    pub fn snap_to_grid(&mut self) {
        self.w1 = self.effective_w1();
        self.w2 = self.effective_w2();
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    /// Output logit with frozen batch-norm statistics.
    pub fn logit<T: Copy + Into<f64>>(&self, features: &[T]) -> Result<f64, MlpError> {
        if features.len() != self.arch.n_in {
            return Err(MlpError::ShapeMismatch(format!(
                "{} features for a {}-input network",
                features.len(),
                self.arch.n_in
            )));
        }
        Ok(Evaluator::new(self).logit(features))
    }

    pub fn to_json(&self) -> Result<String, MlpError> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self)?)?)
    }

    pub fn from_json(s: &str) -> Result<Self, MlpError> {
        serde_json::from_str::<ModelFile>(s)?.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MlpError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MlpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Probability of the excited state.
pub fn forward_float<T: Copy + Into<f64>>(model: &MlpModel, features: &[T]) -> Result<f64, MlpError> {
    Ok(sigmoid(model.logit(features)?))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inference-mode view with the fake-quantized weights and frozen
/// batch-norm folded into per-unit affine terms.
pub(crate) struct Evaluator<'a> {
    model: &'a MlpModel,
    w1: Vec<f64>,
    w2: Vec<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub(crate) fn new(model: &'a MlpModel) -> Self {
        let bn = &model.bn;
        let scale: Vec<f64> = (0..model.arch.n_hidden)
            .map(|i| bn.gamma[i] / (bn.var[i] + bn.epsilon).sqrt())
            .collect();
        let shift = (0..model.arch.n_hidden)
            .map(|i| bn.beta[i] - scale[i] * bn.mean[i])
            .collect();
        Evaluator {
            model,
            w1: model.effective_w1(),
            w2: model.effective_w2(),
            scale,
            shift,
        }
    }

    pub(crate) fn logit<T: Copy + Into<f64>>(&self, x: &[T]) -> f64 {
        let n_in = self.model.arch.n_in;
        let mut out = self.model.b2;
        for i in 0..self.model.arch.n_hidden {
            let z = dot(&self.w1[i * n_in..(i + 1) * n_in], x) + self.model.b1[i];
            let mut h = self.scale[i] * z + self.shift[i];
            if self.model.arch.hidden_relu {
                h = h.max(0.0);
            }
            out += self.w2[i] * h;
        }
        out
    }
}

pub(crate) fn dot<T: Copy + Into<f64>>(w: &[f64], x: &[T]) -> f64 {
    w.iter().zip(x).map(|(a, &b)| a * b.into()).sum()
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TensorFile {
    Quantized { codes: Vec<i32>, scale: f64 },
    Real { values: Vec<f64> },
}

impl TensorFile {
    fn from_weights(w: &[f64], scheme: QuantScheme) -> Result<Self, MlpError> {
        Ok(match scheme {
            QuantScheme::Float32 => TensorFile::Real { values: w.to_vec() },
            _ => {
                let q = quantize_weights(w, scheme)?;
                TensorFile::Quantized {
                    codes: q.codes,
                    scale: q.scale,
                }
            }
        })
    }

    fn into_weights(self) -> Vec<f64> {
        match self {
            TensorFile::Real { values } => values,
            TensorFile::Quantized { codes, scale } => QuantizedTensor { codes, scale }.dequantize(),
        }
    }
}

const MODEL_FORMAT: &str = "qread-mlp";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    arch: MlpArch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<ReadoutWindow>,
    quant: QuantScheme,
    w1: TensorFile,
    b1: Vec<f64>,
    bn: BatchNorm,
    w2: TensorFile,
    b2: f64,
}

impl ModelFile {
    fn from_model(m: &MlpModel) -> Result<Self, MlpError> {
        m.validate()?;
        Ok(ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            arch: m.arch,
            window: m.window,
            quant: m.quant,
            w1: TensorFile::from_weights(&m.w1, m.quant)?,
            b1: m.b1.clone(),
            bn: m.bn.clone(),
            w2: TensorFile::from_weights(&m.w2, m.quant)?,
            b2: m.b2,
        })
    }

    fn into_model(self) -> Result<MlpModel, MlpError> {
        if self.format != MODEL_FORMAT {
            return Err(MlpError::Format(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(MlpError::Format(format!("unsupported version {}", self.version)));
        }
        let m = MlpModel {
            arch: self.arch,
            window: self.window,
            w1: self.w1.into_weights(),
            b1: self.b1,
            bn: self.bn,
            w2: self.w2.into_weights(),
            b2: self.b2,
            quant: self.quant,
        };
        m.validate()?;
        Ok(m)
    }
}
