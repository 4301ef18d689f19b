use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MlpError;

/// Default ternary cut, as a fraction of the largest weight magnitude.
pub const TERNARY_THRESHOLD: f64 = 0.33;

/// Per-tensor weight quantization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantScheme {
    /// Full precision (identity quantizer).
    Float32,
    /// Uniform symmetric, `bits` wide including sign.
    FixedUniform { bits: u32 },
    /// Weights in {-1, 0, +1} times a shared scale.
    Ternary { threshold: f64 },
}

impl Default for QuantScheme {
    fn default() -> Self {
        QuantScheme::Float32
    }
}

impl QuantScheme {
    pub fn ternary() -> Self {
        QuantScheme::Ternary {
            threshold: TERNARY_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        match *self {
            QuantScheme::Float32 => Ok(()),
            QuantScheme::FixedUniform { bits } if (2..=32).contains(&bits) => Ok(()),
            QuantScheme::FixedUniform { bits } => Err(MlpError::BadScheme(format!(
                "fixed-point width {bits} outside [2, 32]"
            ))),
            QuantScheme::Ternary { threshold } if (0.0..1.0).contains(&threshold) => Ok(()),
            QuantScheme::Ternary { threshold } => Err(MlpError::BadScheme(format!(
                "ternary threshold {threshold} outside [0, 1)"
            ))),
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, QuantScheme::Float32)
    }

    /// Largest code magnitude the scheme can emit.
    pub fn max_code(&self) -> Option<i32> {
        match *self {
            QuantScheme::Float32 => None,
            QuantScheme::FixedUniform { bits } => Some(((1i64 << (bits - 1)) - 1) as i32),
            QuantScheme::Ternary { .. } => Some(1),
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            QuantScheme::Float32 => f.write_str("float32"),
            QuantScheme::FixedUniform { bits } => write!(f, "fix{bits}"),
            QuantScheme::Ternary { .. } => f.write_str("ternary"),
        }
    }
}

impl FromStr for QuantScheme {
    type Err = MlpError;

    /// Accepts `float32`, `fix<bits>` and `ternary`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let scheme = match s {
            "float32" => QuantScheme::Float32,
            "ternary" => QuantScheme::ternary(),
            _ => match s.strip_prefix("fix").and_then(|b| b.parse().ok()) {
                Some(bits) => QuantScheme::FixedUniform { bits },
                None => return Err(MlpError::BadScheme(format!("unknown quantization {s:?}"))),
            },
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Integer codes plus the per-tensor scale: `w ~= code * scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub scale: f64,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&q| f64::from(q) * self.scale).collect()
    }
}

fn max_abs(w: &[f64]) -> f64 {
    w.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Quantize `w` under a non-float scheme. An all-zero tensor yields scale 1
/// and all-zero codes.
pub fn quantize_weights(w: &[f64], scheme: QuantScheme) -> Result<QuantizedTensor, MlpError> {
    scheme.validate()?;
    let m = max_abs(w);
    match scheme {
        QuantScheme::Float32 => Err(MlpError::BadScheme(
            "float32 weights have no integer codes".into(),
        )),
        _ if m == 0.0 => Ok(QuantizedTensor {
            codes: vec![0; w.len()],
            scale: 1.0,
        }),
        QuantScheme::FixedUniform { bits } => {
            let qmax = ((1i64 << (bits - 1)) - 1) as f64;
            let scale = m / qmax;
            // f64::round rounds half away from zero.
            let codes = w
                .iter()
                .map(|&x| (x / scale).round().clamp(-qmax, qmax) as i32)
                .collect();
            Ok(QuantizedTensor { codes, scale })
        }
        QuantScheme::Ternary { threshold } => {
            let cut = threshold * m;
            let codes: Vec<i32> = w
                .iter()
                .map(|&x| if x.abs() > cut { x.signum() as i32 } else { 0 })
                .collect();
            let kept: Vec<f64> = w
                .iter()
                .zip(&codes)
                .filter(|(_, &q)| q != 0)
                .map(|(x, _)| x.abs())
                .collect();
            // Exact when the magnitudes already agree, so re-quantizing a
            // ternary tensor reproduces its scale bit-for-bit.
            let scale = if kept.iter().all(|&k| k == kept[0]) {
                kept[0]
            } else {
                kept.iter().sum::<f64>() / kept.len() as f64
            };
            Ok(QuantizedTensor { codes, scale })
        }
    }
}

/// Quantize-dequantize; the identity for `Float32`.
pub fn fake_quantize(w: &[f64], scheme: QuantScheme) -> Vec<f64> {
    match scheme {
        QuantScheme::Float32 => w.to_vec(),
        _ => quantize_weights(w, scheme)
            .expect("scheme validated by caller")
            .dequantize(),
    }
}
