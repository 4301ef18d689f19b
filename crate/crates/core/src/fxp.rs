//! Bit-exact fixed-point execution of a folded network.
//!
//! Datapath per readout, every step exact until an explicit cast:
//!
//! 1. `x_j = code_j >> scaling_factor`
//! 2. `acc_i = sum_j q1_ij * x_j`, cast to the accumulator format
//! 3. `h_i = mult_i * acc_i + bias_i`, cast to the hidden format (ReLU optional)
//! 4. `logit = out_mult * sum_i q2_i * h_i + out_bias`, cast to the logit format
//!
//! Values are dyadic rationals held as `(raw, frac_bits)` in `i128`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::ReadoutWindow;
use crate::mlp::{fold_batchnorm, FoldedModel, MlpError, MlpModel, QuantScheme};
use crate::physics::State;

#[derive(Debug, Error)]
pub enum FxpError {
    #[error("invalid fixed-point format: {0}")]
    BadFormat(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input {index} = {value} does not fit in {bits} bits")]
    InputTooWide { index: usize, value: u32, bits: u32 },
    #[error("invalid network: {0}")]
    BadNet(String),
    #[error("compute_cycles must be >= 1")]
    BadLatency,
    #[error("clock period must be positive, got {0}")]
    BadClock(f64),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    TruncateTowardNegInf,
    RoundHalfEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overflow {
    Saturate,
    /// Two's-complement modular wrap.
    Wrap,
}

/// `<total_bits, int_bits>`: the LSB weighs `2^-(total_bits - int_bits)`.
/// `int_bits` counts the sign bit and may be negative, which suits small
/// multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    pub total_bits: u32,
    pub int_bits: i32,
    pub signed: bool,
    pub rounding: Rounding,
    pub overflow: Overflow,
}

impl FxpFormat {
    pub fn signed(total_bits: u32, int_bits: i32) -> Self {
        FxpFormat {
            total_bits,
            int_bits,
            signed: true,
            rounding: Rounding::RoundHalfEven,
            overflow: Overflow::Saturate,
        }
    }

    pub fn unsigned(total_bits: u32, int_bits: i32) -> Self {
        FxpFormat {
            signed: false,
            ..Self::signed(total_bits, int_bits)
        }
    }

    pub fn with_rounding(self, rounding: Rounding) -> Self {
        FxpFormat { rounding, ..self }
    }

    pub fn with_overflow(self, overflow: Overflow) -> Self {
        FxpFormat { overflow, ..self }
    }

    pub fn validate(&self) -> Result<(), FxpError> {
        if !(1..=64).contains(&self.total_bits) {
            return Err(FxpError::BadFormat(format!(
                "total_bits {} outside [1, 64]",
                self.total_bits
            )));
        }
        if self.int_bits > self.total_bits as i32 {
            return Err(FxpError::BadFormat(format!(
                "int_bits {} exceeds total_bits {}",
                self.int_bits, self.total_bits
            )));
        }
        if self.frac_bits() > 126 {
            return Err(FxpError::BadFormat(format!(
                "{} fractional bits is beyond the supported range",
                self.frac_bits()
            )));
        }
        Ok(())
    }

    pub fn frac_bits(&self) -> i32 {
        self.total_bits as i32 - self.int_bits
    }

    pub fn raw_min(&self) -> i128 {
        if self.signed {
            -(1i128 << (self.total_bits - 1))
        } else {
            0
        }
    }

    pub fn raw_max(&self) -> i128 {
        if self.signed {
            (1i128 << (self.total_bits - 1)) - 1
        } else {
            (1i128 << self.total_bits) - 1
        }
    }

    pub fn lsb(&self) -> f64 {
        (-(self.frac_bits() as f64)).exp2()
    }

    pub fn to_f64(&self, raw: i64) -> f64 {
        raw as f64 * self.lsb()
    }

    /// Cast the exact dyadic `raw * 2^-frac` into this format.
    pub fn cast(&self, raw: i128, frac: i32) -> i64 {
        let d = frac - self.frac_bits();
        let v = if d >= 0 {
            Some(shift_round(raw, d as u32, self.rounding))
        } else if self.overflow == Overflow::Wrap {
            // Modulo 2^128 keeps the low 64 bits intact.
            Some(if -d >= 128 { 0 } else { raw.wrapping_shl((-d) as u32) })
        } else {
            shift_left(raw, (-d) as u32)
        };
        self.apply_overflow(v, raw.signum())
    }

    /// `None` means the value is out of any range (it overflowed `i128` or
    /// is infinite); `sign` then picks the saturation end, and wrap gives 0.
    fn apply_overflow(&self, v: Option<i128>, sign: i128) -> i64 {
        let (lo, hi) = (self.raw_min(), self.raw_max());
        let r = match (v, self.overflow) {
            (Some(v), Overflow::Saturate) => v.clamp(lo, hi),
            (None, Overflow::Saturate) => {
                if sign < 0 {
                    lo
                } else {
                    hi
                }
            }
            (Some(v), Overflow::Wrap) => {
                let m = 1i128 << self.total_bits;
                let r = v.rem_euclid(m);
                if self.signed && r > hi {
                    r - m
                } else {
                    r
                }
            }
            (None, Overflow::Wrap) => 0,
        };
        r as i64
    }
}

fn shift_left(v: i128, d: u32) -> Option<i128> {
    if v == 0 {
        return Some(0);
    }
    if d >= 127 {
        return None;
    }
    v.checked_mul(1i128 << d)
}

/// `v / 2^d` rounded by `mode`.
fn shift_round(v: i128, d: u32, mode: Rounding) -> i128 {
    if d == 0 {
        return v;
    }
    if d >= 126 {
        // |v| < 2^125 for every value this engine produces, so the
        // quotient lies strictly inside (-1/2, 1/2).
        return match mode {
            Rounding::TruncateTowardNegInf if v < 0 => -1,
            _ => 0,
        };
    }
    let floor = v >> d;
    match mode {
        Rounding::TruncateTowardNegInf => floor,
        Rounding::RoundHalfEven => {
            let rem = v - (floor << d);
            let half = 1i128 << (d - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        }
    }
}

/// Exact dyadic decomposition of a finite `f64`: `x = raw * 2^-frac`.
fn dyadic(x: f64) -> (i128, i32) {
    if x == 0.0 {
        return (0, 0);
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let man = bits & ((1u64 << 52) - 1);
    let (m, e) = if exp == 0 {
        (man, -1074)
    } else {
        (man | (1u64 << 52), exp - 1075)
    };
    (sign * m as i128, -e)
}

/// A value together with its format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fxp {
    pub raw: i64,
    pub format: FxpFormat,
}

impl Fxp {
    pub fn to_f64(&self) -> f64 {
        self.format.to_f64(self.raw)
    }
}

/// Nearest representable value under the format's rounding and overflow
/// rules. Infinities saturate (or wrap to 0); NaN maps to 0.
pub fn fxp_quantize(x: f64, format: FxpFormat) -> Fxp {
    let raw = if x.is_nan() {
        0
    } else if x.is_infinite() {
        format.apply_overflow(None, if x < 0.0 { -1 } else { 1 })
    } else {
        let (r, f) = dyadic(x);
        format.cast(r, f)
    };
    Fxp { raw, format }
}

/// Fractional bits allowed on the network datapath; keeps every
/// intermediate comfortably inside `i128`.
pub const MAX_NET_FRAC_BITS: i32 = 64;

/// Smallest signed `total_bits` format whose range covers `max_abs`.
pub fn auto_format(max_abs: f64, total_bits: u32) -> FxpFormat {
    let int_bits = if max_abs > 0.0 {
        max_abs.log2().floor() as i32 + 2
    } else {
        1
    };
    FxpFormat::signed(total_bits, int_bits.max(total_bits as i32 - MAX_NET_FRAC_BITS))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub compute_cycles: u32,
    pub store_cycles: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            compute_cycles: 8,
            store_cycles: 2,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), FxpError> {
        if self.compute_cycles < 1 {
            return Err(FxpError::BadLatency);
        }
        Ok(())
    }

    pub fn total_cycles(&self) -> u32 {
        self.compute_cycles + self.store_cycles
    }
}

/// Default fabric clock period in ns.
pub const DEFAULT_CLOCK_NS: f64 = 3.25;

pub fn latency_ns(lm: &LatencyModel, clock_period_ns: f64) -> Result<f64, FxpError> {
    lm.validate()?;
    if !(clock_period_ns > 0.0) || !clock_period_ns.is_finite() {
        return Err(FxpError::BadClock(clock_period_ns));
    }
    Ok(f64::from(lm.total_cycles()) * clock_period_ns)
}

/// Width of a raw ADC code.
pub const INPUT_BITS: u32 = 14;

/// Formats of every signal on the datapath.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetFormats {
    pub input: FxpFormat,
    pub accumulator: FxpFormat,
    pub multiplier: FxpFormat,
    pub hidden: FxpFormat,
    pub out_multiplier: FxpFormat,
    pub logit: FxpFormat,
}

/// Knobs for [`FoldedNet::from_folded`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FxpOptions {
    /// Lower bound on the accumulator width; widened when the worst case
    /// needs more.
    pub accumulator_bits: u32,
    pub hidden: FxpFormat,
    pub logit: FxpFormat,
    /// Width of the per-unit and output multipliers; their integer bits are
    /// fitted to the largest magnitude.
    pub multiplier_bits: u32,
    /// Weight width used when a float model has to be quantized first.
    pub float_weight_bits: u32,
    pub latency: LatencyModel,
}

impl Default for FxpOptions {
    fn default() -> Self {
        FxpOptions {
            accumulator_bits: 24,
            hidden: FxpFormat::signed(24, 8),
            logit: FxpFormat::signed(32, 16),
            multiplier_bits: 24,
            float_weight_bits: 16,
            latency: LatencyModel::default(),
        }
    }
}

/// Integer-only accumulator wide enough for any input when every weight
/// code is at most `max_code` in magnitude.
pub fn accumulator_format(n_in: usize, max_code: u64, min_bits: u32) -> FxpFormat {
    let worst = n_in as u128 * ((1u128 << INPUT_BITS) - 1) * u128::from(max_code.max(1));
    // ceil(log2(worst + 1)) magnitude bits plus sign.
    let need = 128 - worst.leading_zeros() + 1;
    let bits = need.max(min_bits).min(64);
    FxpFormat::signed(bits, bits as i32)
}

/// Network ready for the fixed-point datapath.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldedNet {
    pub n_in: usize,
    pub n_hidden: usize,
    pub hidden_relu: bool,
    pub window: Option<ReadoutWindow>,
    pub quant: QuantScheme,
    /// First-layer codes, `n_hidden x n_in` row-major.
    pub w1: Vec<i64>,
    /// Per-unit multipliers, raw in `formats.multiplier`.
    pub mult: Vec<i64>,
    /// Per-unit biases, raw in `formats.hidden`.
    pub bias: Vec<i64>,
    pub w2: Vec<i64>,
    /// Raw in `formats.out_multiplier`.
    pub out_mult: i64,
    /// Raw in `formats.logit`.
    pub out_bias: i64,
    pub formats: NetFormats,
    pub latency: LatencyModel,
}

/// Result of one fixed-point inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxpOutput {
    /// Raw in the logit format.
    pub logit: i64,
    /// Saturating negation of `logit`, the second stored word.
    pub neg_logit: i64,
    pub decision: State,
    pub cycles: u32,
}

pub fn decide_raw(logit: i64) -> State {
    if logit >= 0 {
        State::Excited
    } else {
        State::Ground
    }
}

impl FoldedNet {
    /// Fold and quantize a trained model with default options.
    pub fn from_model(model: &MlpModel) -> Result<Self, FxpError> {
        Self::from_model_with(model, &FxpOptions::default())
    }

    /// Float models are first quantized to `float_weight_bits`-bit uniform
    /// codes; the engine only multiplies by integers.
    pub fn from_model_with(model: &MlpModel, opts: &FxpOptions) -> Result<Self, FxpError> {
        let folded = if model.quant.is_quantized() {
            fold_batchnorm(model)?
        } else {
            let mut m = model.clone();
            m.quant = QuantScheme::FixedUniform {
                bits: opts.float_weight_bits,
            };
            fold_batchnorm(&m)?
        };
        Self::from_folded(&folded, opts)
    }

    pub fn from_folded(f: &FoldedModel, opts: &FxpOptions) -> Result<Self, FxpError> {
        opts.hidden.validate()?;
        opts.logit.validate()?;
        opts.latency.validate()?;
        let (w1, w2) = match (f.w1_codes(), f.w2_codes()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(FxpError::BadNet(
                    "fixed-point conversion needs integer weight codes".into(),
                ))
            }
        };
        let max_code = f.quant.max_code().unwrap_or(1) as u64;
        let max_mult = f.unit_scale.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let multiplier = auto_format(max_mult, opts.multiplier_bits);
        let out_multiplier = auto_format(f.out_scale.abs(), opts.multiplier_bits);
        let formats = NetFormats {
            input: FxpFormat::unsigned(INPUT_BITS, INPUT_BITS as i32),
            accumulator: accumulator_format(f.arch.n_in, max_code, opts.accumulator_bits),
            multiplier,
            hidden: opts.hidden,
            out_multiplier,
            logit: opts.logit,
        };
        let net = FoldedNet {
            n_in: f.arch.n_in,
            n_hidden: f.arch.n_hidden,
            hidden_relu: f.arch.hidden_relu,
            window: f.window,
            quant: f.quant,
            w1,
            mult: f.unit_scale.iter().map(|&m| fxp_quantize(m, multiplier).raw).collect(),
            bias: f.unit_bias.iter().map(|&b| fxp_quantize(b, opts.hidden).raw).collect(),
            w2,
            out_mult: fxp_quantize(f.out_scale, out_multiplier).raw,
            out_bias: fxp_quantize(f.b2, opts.logit).raw,
            formats,
            latency: opts.latency,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), FxpError> {
        let f = &self.formats;
        for fmt in [f.input, f.accumulator, f.multiplier, f.hidden, f.out_multiplier, f.logit] {
            fmt.validate()?;
        }
        if [f.multiplier, f.hidden, f.out_multiplier, f.logit]
            .iter()
            .any(|x| !(0..=MAX_NET_FRAC_BITS).contains(&x.frac_bits()))
        {
            return Err(FxpError::BadFormat(format!(
                "datapath formats need 0..={MAX_NET_FRAC_BITS} fractional bits"
            )));
        }
        if f.input.frac_bits() != 0 || f.accumulator.frac_bits() != 0 {
            return Err(FxpError::BadFormat(
                "input and accumulator formats must be integer".into(),
            ));
        }
        self.latency.validate()?;
        let h = self.n_hidden;
        if self.n_in < 1 || h < 1 {
            return Err(FxpError::BadNet("need n_in >= 1 and n_hidden >= 1".into()));
        }
        let shapes = [
            ("w1", self.w1.len(), h * self.n_in),
            ("mult", self.mult.len(), h),
            ("bias", self.bias.len(), h),
            ("w2", self.w2.len(), h),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(FxpError::ShapeMismatch(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        if let Some(q) = self.quant.max_code() {
            let q = i64::from(q);
            if self.w1.iter().chain(&self.w2).any(|c| c.abs() > q) {
                return Err(FxpError::BadNet(format!(
                    "weight code outside [-{q}, {q}] for {}",
                    self.quant
                )));
            }
        }
        self.check_headroom()?;
        let in_range = |fmt: &FxpFormat, v: i64| (fmt.raw_min()..=fmt.raw_max()).contains(&(v as i128));
        if !self.mult.iter().all(|&m| in_range(&f.multiplier, m))
            || !self.bias.iter().all(|&b| in_range(&f.hidden, b))
            || !in_range(&f.out_multiplier, self.out_mult)
            || !in_range(&f.logit, self.out_bias)
        {
            return Err(FxpError::BadNet("constant outside its format".into()));
        }
        Ok(())
    }

    /// Worst-case width of the exact intermediates must fit an `i128`.
    fn check_headroom(&self) -> Result<(), FxpError> {
        let f = &self.formats;
        let bits = |v: u64| 64 - v.leading_zeros() + 1;
        let (fm, fh, fo, fl) = (
            f.multiplier.frac_bits(),
            f.hidden.frac_bits(),
            f.out_multiplier.frac_bits(),
            f.logit.frac_bits(),
        );
        let fp = fo + fh;
        let w2_bits = bits(self.w2.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0));
        let sum_bits = 64 - (self.n_hidden as u64).leading_zeros();
        let need = [
            (f.accumulator.total_bits + f.multiplier.total_bits) as i32 + (fh - fm).max(0) + 1,
            f.hidden.total_bits as i32 + (fm - fh).max(0) + 1,
            (f.out_multiplier.total_bits + f.hidden.total_bits + w2_bits + sum_bits) as i32 + (fl - fp).max(0) + 1,
            f.logit.total_bits as i32 + (fp - fl).max(0) + 1,
        ];
        match need.iter().max() {
            Some(&n) if n > 127 => Err(FxpError::BadFormat(format!(
                "datapath needs {n}-bit intermediates; 127 is the limit"
            ))),
            _ => Ok(()),
        }
    }

    pub fn logit_value(&self, out: &FxpOutput) -> f64 {
        self.formats.logit.to_f64(out.logit)
    }

    pub fn to_json(&self) -> Result<String, FxpError> {
        Ok(serde_json::to_string_pretty(&NetFile {
            format: NET_FORMAT.into(),
            version: NET_VERSION,
            net: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self, FxpError> {
        let file: NetFile = serde_json::from_str(s)?;
        if file.format != NET_FORMAT || file.version != NET_VERSION {
            return Err(FxpError::BadNet(format!(
                "unsupported net file {:?} v{}",
                file.format, file.version
            )));
        }
        file.net.validate()?;
        Ok(file.net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FxpError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FxpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const NET_FORMAT: &str = "qread-fxp";
const NET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetFile {
    format: String,
    version: u32,
    net: FoldedNet,
}

/// Run one readout through the datapath. `features` are raw 14-bit codes
/// in interleaved I/Q order.
pub fn infer_fxp(net: &FoldedNet, features: &[u16], scaling_factor: u32) -> Result<FxpOutput, FxpError> {
    if features.len() != net.n_in {
        return Err(FxpError::ShapeMismatch(format!(
            "{} features for a {}-input network",
            features.len(),
            net.n_in
        )));
    }
    if let Some(index) = features.iter().position(|&c| u32::from(c) >> INPUT_BITS != 0) {
        return Err(FxpError::InputTooWide {
            index,
            value: u32::from(features[index]),
            bits: INPUT_BITS,
        });
    }
    let f = &net.formats;
    let shift = scaling_factor.min(INPUT_BITS);
    let fm = f.multiplier.frac_bits();
    let fh = f.hidden.frac_bits();
    let fo = f.out_multiplier.frac_bits();
    let fl = f.logit.frac_bits();

    let mut out_sum: i128 = 0;
    for i in 0..net.n_hidden {
        let row = &net.w1[i * net.n_in..(i + 1) * net.n_in];
        let acc: i128 = row
            .iter()
            .zip(features)
            .map(|(&q, &c)| i128::from(q) * i128::from(c >> shift))
            .sum();
        let acc = f.accumulator.cast(acc, 0);
        // mult * acc lives at fm fractional bits, bias at fh.
        let common = fm.max(fh);
        let prod = i128::from(net.mult[i]) * i128::from(acc);
        let sum = align(prod, fm, common) + align(i128::from(net.bias[i]), fh, common);
        let mut h = f.hidden.cast(sum, common);
        if net.hidden_relu {
            h = h.max(0);
        }
        out_sum += i128::from(net.w2[i]) * i128::from(h);
    }
    // out_mult * out_sum at fo + fh fractional bits, bias at fl.
    let fp = fo + fh;
    let common = fp.max(fl);
    let prod = i128::from(net.out_mult) * out_sum;
    let sum = align(prod, fp, common) + align(i128::from(net.out_bias), fl, common);
    let logit = f.logit.cast(sum, common);
    let neg_logit = f.logit.cast(-i128::from(logit), fl);
    Ok(FxpOutput {
        logit,
        neg_logit,
        decision: decide_raw(logit),
        cycles: net.latency.compute_cycles,
    })
}

fn align(v: i128, from: i32, to: i32) -> i128 {
    v << (to - from)
}

/// [`infer_fxp`] over many readouts in parallel.
pub fn infer_batch(
    net: &FoldedNet,
    rows: &[&[u16]],
    scaling_factor: u32,
) -> Result<Vec<FxpOutput>, FxpError> {
    rows.par_iter()
        .map(|x| infer_fxp(net, x, scaling_factor))
        .collect()
}
