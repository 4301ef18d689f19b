//! Fold inference-mode batch-norm into the first layer.
//!
//! Each hidden unit becomes `h_i = unit_scale_i * (w1_i . x) + unit_bias_i`
//! and the output `logit = out_scale * (w2 . h) + b2`. For quantized models
//! `w1` and `w2` hold the integer codes (stored exactly as f64) and the
//! scales carry everything else, which is what the fixed-point engine wants.

use serde::{Deserialize, Serialize};

use super::{dot, quantize_weights, MlpArch, MlpError, MlpModel, QuantScheme};
use crate::baseline::ReadoutWindow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldedModel {
    pub arch: MlpArch,
    pub window: Option<ReadoutWindow>,
    pub quant: QuantScheme,
    pub w1: Vec<f64>,
    pub unit_scale: Vec<f64>,
    pub unit_bias: Vec<f64>,
    pub w2: Vec<f64>,
    pub out_scale: f64,
    pub b2: f64,
}

pub fn fold_batchnorm(model: &MlpModel) -> Result<FoldedModel, MlpError> {
    model.validate()?;
    let h = model.arch.n_hidden;
    let n = model.arch.n_in;
    let bn = &model.bn;
    let a: Vec<f64> = (0..h)
        .map(|i| bn.gamma[i] / (bn.var[i] + bn.epsilon).sqrt())
        .collect();
    let unit_bias = (0..h)
        .map(|i| a[i] * (model.b1[i] - bn.mean[i]) + bn.beta[i])
        .collect();

    let folded = if model.quant.is_quantized() {
        let q1 = quantize_weights(&model.w1, model.quant)?;
        let q2 = quantize_weights(&model.w2, model.quant)?;
        FoldedModel {
            arch: model.arch,
            window: model.window,
            quant: model.quant,
            w1: q1.codes.iter().map(|&c| f64::from(c)).collect(),
            unit_scale: a.iter().map(|ai| ai * q1.scale).collect(),
            unit_bias,
            w2: q2.codes.iter().map(|&c| f64::from(c)).collect(),
            out_scale: q2.scale,
            b2: model.b2,
        }
    } else {
        let mut w1 = model.w1.clone();
        for (i, row) in w1.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|w| *w *= a[i]);
        }
        FoldedModel {
            arch: model.arch,
            window: model.window,
            quant: model.quant,
            w1,
            unit_scale: vec![1.0; h],
            unit_bias,
            w2: model.w2.clone(),
            out_scale: 1.0,
            b2: model.b2,
        }
    };
    Ok(folded)
}

impl FoldedModel {
    /// Hidden activations after the folded affine stage (and ReLU).
    pub fn hidden<T: Copy + Into<f64>>(&self, x: &[T]) -> Vec<f64> {
        let n = self.arch.n_in;
        (0..self.arch.n_hidden)
            .map(|i| {
                let v = self.unit_scale[i] * dot(&self.w1[i * n..(i + 1) * n], x) + self.unit_bias[i];
                if self.arch.hidden_relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn logit<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<f64, MlpError> {
        if x.len() != self.arch.n_in {
            return Err(MlpError::ShapeMismatch(format!(
                "{} features for a {}-input network",
                x.len(),
                self.arch.n_in
            )));
        }
        let h = self.hidden(x);
        Ok(self.out_scale * dot(&self.w2, &h) + self.b2)
    }

    /// Integer codes of the first layer, if the model is quantized.
    pub fn w1_codes(&self) -> Option<Vec<i64>> {
        self.quant
            .is_quantized()
            .then(|| self.w1.iter().map(|&c| c as i64).collect())
    }

    pub fn w2_codes(&self) -> Option<Vec<i64>> {
        self.quant
            .is_quantized()
            .then(|| self.w2.iter().map(|&c| c as i64).collect())
    }

    /// Largest relative logit difference against the unfolded model over
    /// `rows`, relative to `max(1, |logit|)`.
    pub fn max_relative_error<T: Copy + Into<f64>>(
        &self,
        model: &MlpModel,
        rows: &[&[T]],
    ) -> Result<f64, MlpError> {
        let mut worst = 0.0f64;
        for x in rows {
            let a = model.logit(x)?;
            let b = self.logit(x)?;
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
        Ok(worst)
    }
}
