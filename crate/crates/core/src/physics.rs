//! Synthetic dispersive-readout traces.
//!
//! The resonator is modeled as a driven first-order cavity whose detuning
//! from the probe is `+chi` when the qubit is excited and `-chi` when it is in
//! the ground state (the probe sits midway between the dressed resonances).
//! An excited qubit may relax once during the readout, after which the field
//! rings over to the ground steady state at the cavity rate. Every shot is a
//! pure function of the device, the noise seed and the shot index.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{self, ReadoutWindow};
use crate::rng;

/// Prepared (or latent) qubit state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum State {
    Ground,
    Excited,
}

impl State {
    pub const BOTH: [State; 2] = [State::Ground, State::Excited];

    pub fn bit(self) -> u8 {
        match self {
            State::Ground => 0,
            State::Excited => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<State> {
        match bit {
            0 => Some(State::Ground),
            1 => Some(State::Excited),
            _ => None,
        }
    }

    pub fn flipped(self) -> State {
        match self {
            State::Ground => State::Excited,
            State::Excited => State::Ground,
        }
    }
}

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
    #[error("adc_full_scale must be non-zero")]
    ZeroFullScale,
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("dataset of {requested} bytes exceeds the {cap}-byte memory cap")]
    ResourceLimit { requested: u64, cap: u64 },
    #[error(
        "noise calibration did not converge after {steps} steps \
         (zero-noise ceiling {ceiling:.5}, closest sigma {best_sigma:.4e} gave {best_fidelity:.5})"
    )]
    NoConvergence {
        steps: usize,
        ceiling: f64,
        best_sigma: f64,
        best_fidelity: f64,
    },
    #[error("calibration target {0} must lie in (0.5, 1)")]
    BadTarget(f64),
    #[error(transparent)]
    Discriminator(#[from] baseline::BaselineError),
}

/// Physical constants of the simulated qubit/resonator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    /// Resonator linewidth, rad/s.
    pub kappa: f64,
    /// Dispersive half-shift, rad/s.
    pub chi: f64,
    /// Qubit relaxation time, s. `f64::INFINITY` disables relaxation.
    pub t1: f64,
    /// Recorded for completeness; the amplitude model does not use it.
    pub t2_star: f64,
    /// Seconds per ADC clock cycle.
    pub sample_period: f64,
    pub n_samples: usize,
    /// Steady-state drive scale.
    pub drive_amplitude: f64,
    /// Probability that a ground-prepared qubit is thermally excited.
    pub p_thermal: f64,
    /// Probability that the pi pulse fails.
    pub p_pi_error: f64,
    pub adc_bits: u32,
    /// Analog amplitude mapped to the top ADC code.
    pub adc_full_scale: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        let two_pi = 2.0 * std::f64::consts::PI;
        DeviceParams {
            kappa: two_pi * 1.5e6,
            chi: two_pi * 0.2e6,
            t1: 32e-6,
            t2_star: 1.7e-6,
            sample_period: 3.25e-9,
            n_samples: 770,
            drive_amplitude: 1.0,
            p_thermal: 0.016,
            p_pi_error: 0.004,
            adc_bits: 14,
            adc_full_scale: 2.5e-6,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |m: &str| Err(PhysicsError::InvalidParams(m.to_string()));
        if !(self.kappa > 0.0) {
            return bad("kappa must be > 0");
        }
        if !self.chi.is_finite() {
            return bad("chi must be finite");
        }
        if !(self.t1 > 0.0) {
            return bad("t1 must be > 0");
        }
        if !(self.sample_period > 0.0) || !self.sample_period.is_finite() {
            return bad("sample_period must be a positive finite number");
        }
        if self.n_samples < 1 {
            return bad("n_samples must be >= 1");
        }
        if !(0.0..0.5).contains(&self.p_thermal) {
            return bad("p_thermal must lie in [0, 0.5)");
        }
        if !(0.0..0.5).contains(&self.p_pi_error) {
            return bad("p_pi_error must lie in [0, 0.5)");
        }
        if !(2..=16).contains(&self.adc_bits) {
            return bad("adc_bits must lie in [2, 16]");
        }
        if !self.drive_amplitude.is_finite() {
            return bad("drive_amplitude must be finite");
        }
        if self.adc_full_scale == 0.0 {
            return Err(PhysicsError::ZeroFullScale);
        }
        if !self.adc_full_scale.is_finite() {
            return bad("adc_full_scale must be finite");
        }
        Ok(())
    }

    /// Probability that an excited-prepared shot actually starts in the
    /// ground state. A thermally excited qubit is flipped down by the pi
    /// pulse, so residual thermal population adds to the pi-pulse error.
    pub fn p_excited_prep_error(&self) -> f64 {
        self.p_thermal * (1.0 - self.p_pi_error) + (1.0 - self.p_thermal) * self.p_pi_error
    }

    pub fn max_code(&self) -> u16 {
        ((1u32 << self.adc_bits) - 1) as u16
    }

    fn detuning(&self, state: State) -> f64 {
        match state {
            State::Ground => -self.chi,
            State::Excited => self.chi,
        }
    }

    fn pole(&self, state: State) -> Complex64 {
        Complex64::new(self.kappa / 2.0, self.detuning(state))
    }

    fn raw_steady_state(&self, state: State) -> Complex64 {
        Complex64::new(self.drive_amplitude, 0.0) / self.pole(state)
    }

    /// Global phase that puts the steady-state separation along +Q.
    pub fn readout_rotation(&self) -> Complex64 {
        let d = self.raw_steady_state(State::Excited) - self.raw_steady_state(State::Ground);
        if d.norm() == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::i() * d.conj() / d.norm()
        }
    }

    /// Rotated steady-state field for `state`.
    pub fn steady_state(&self, state: State) -> Complex64 {
        self.readout_rotation() * self.raw_steady_state(state)
    }

    pub fn sample_time(&self, n: usize) -> f64 {
        n as f64 * self.sample_period
    }
}

/// Additive white Gaussian noise on each quadrature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Self {
        NoiseModel { sigma, seed }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(PhysicsError::InvalidNoise(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Hidden history of one shot: the state the qubit actually started in and,
/// if it started excited, when it relaxed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub initial: State,
    /// Relaxation time in seconds; `None` for a ground start or infinite T1.
    pub decay_time: Option<f64>,
}

impl Latent {
    pub fn state_at(&self, t: f64) -> State {
        match (self.initial, self.decay_time) {
            (State::Ground, _) => State::Ground,
            (State::Excited, Some(tr)) if t >= tr => State::Ground,
            (State::Excited, _) => State::Excited,
        }
    }
}

/// One labeled single-shot record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub label: State,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Latent>,
    /// `(I, Q)` ADC codes per clock cycle.
    pub iq: Vec<[u16; 2]>,
}

impl Shot {
    pub fn n_samples(&self) -> usize {
        self.iq.len()
    }

    /// Interleaved `[I0, Q0, I1, Q1, ...]` view of the whole trace.
    pub fn interleaved(&self) -> &[u16] {
        self.iq.as_flattened()
    }

    /// Per-sample latent state (0 ground, 1 excited), when known.
    pub fn true_state_trace(&self, dev: &DeviceParams) -> Option<Vec<u8>> {
        let latent = self.latent.as_ref()?;
        Some(
            (0..self.iq.len())
                .map(|n| latent.state_at(dev.sample_time(n)).bit())
                .collect(),
        )
    }

    /// First sample whose code needs more than `adc_bits` bits.
    pub fn first_out_of_range(&self, adc_bits: u32) -> Option<usize> {
        let max = (1u32 << adc_bits) - 1;
        self.iq
            .iter()
            .position(|[i, q]| u32::from(*i) > max || u32::from(*q) > max)
    }
}

/// A collection of shots sharing one device and noise configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotSet {
    pub device: DeviceParams,
    pub noise: NoiseModel,
    pub shots: Vec<Shot>,
}

impl ShotSet {
    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.shots
            .first()
            .map_or(self.device.n_samples, Shot::n_samples)
    }

    pub fn count(&self, label: State) -> usize {
        self.shots.iter().filter(|s| s.label == label).count()
    }

    pub fn labels(&self) -> Vec<State> {
        self.shots.iter().map(|s| s.label).collect()
    }

    /// Fraction of I/Q codes pinned at either ADC rail.
    pub fn saturation_rate(&self) -> f64 {
        let max = self.device.max_code();
        let total: usize = self.shots.iter().map(|s| 2 * s.iq.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let railed: usize = self
            .shots
            .iter()
            .flat_map(|s| s.interleaved())
            .filter(|&&c| c == 0 || c == max)
            .count();
        railed as f64 / total as f64
    }

    /// Copy with diagnostics stripped, as persisted on disk.
    pub fn without_latent(&self) -> ShotSet {
        ShotSet {
            device: self.device.clone(),
            noise: self.noise.clone(),
            shots: self
                .shots
                .iter()
                .map(|s| Shot {
                    label: s.label,
                    latent: None,
                    iq: s.iq.clone(),
                })
                .collect(),
        }
    }
}

/// Noise-free field `alpha(t_n)` for a qubit that stays in `state`.
pub fn mean_trajectory(state: State, dev: &DeviceParams) -> Vec<Complex64> {
    let rot = dev.readout_rotation();
    let pole = dev.pole(state);
    let ss = dev.raw_steady_state(state);
    (0..dev.n_samples)
        .map(|n| rot * ss * (1.0 - (-pole * dev.sample_time(n)).exp()))
        .collect()
}

/// Field of an excited qubit that relaxes at `decay_time`.
pub fn relaxed_trajectory(dev: &DeviceParams, decay_time: f64) -> Vec<Complex64> {
    let excited = mean_trajectory(State::Excited, dev);
    let mut out = excited;
    fill_relaxed_tail(dev, decay_time, &mut out);
    out
}

fn fill_relaxed_tail(dev: &DeviceParams, decay_time: f64, out: &mut [Complex64]) {
    let rot = dev.readout_rotation();
    let pe = dev.pole(State::Excited);
    let pg = dev.pole(State::Ground);
    let ss_e = dev.raw_steady_state(State::Excited);
    let ss_g = dev.raw_steady_state(State::Ground);
    let at_decay = ss_e * (1.0 - (-pe * decay_time).exp());
    let first = (decay_time / dev.sample_period).ceil().max(0.0);
    if first >= out.len() as f64 {
        return;
    }
    for n in first as usize..out.len() {
        let dt = dev.sample_time(n) - decay_time;
        out[n] = rot * (ss_g + (at_decay - ss_g) * (-pg * dt).exp());
    }
}

/// Offset-binary ADC mapping; returns the code and whether it clipped.
pub fn adc_code(value: f64, dev: &DeviceParams) -> (u16, bool) {
    let half = f64::from(1u32 << (dev.adc_bits - 1));
    let max = f64::from(dev.max_code());
    let code = (value / dev.adc_full_scale * half).round() + half;
    if code < 0.0 {
        (0, true)
    } else if code > max {
        (max as u16, true)
    } else {
        (code as u16, false)
    }
}

/// Precomputed noise-free trajectories shared by every shot of a set.
struct Trajectories {
    ground: Vec<Complex64>,
    excited: Vec<Complex64>,
}

impl Trajectories {
    fn new(dev: &DeviceParams) -> Self {
        Trajectories {
            ground: mean_trajectory(State::Ground, dev),
            excited: mean_trajectory(State::Excited, dev),
        }
    }

    fn mean_for(&self, latent: &Latent, dev: &DeviceParams) -> std::borrow::Cow<'_, [Complex64]> {
        use std::borrow::Cow;
        match (latent.initial, latent.decay_time) {
            (State::Ground, _) => Cow::Borrowed(&self.ground),
            (State::Excited, Some(tr)) if tr < dev.sample_time(dev.n_samples) => {
                let mut v = self.excited.clone();
                fill_relaxed_tail(dev, tr, &mut v);
                Cow::Owned(v)
            }
            (State::Excited, _) => Cow::Borrowed(&self.excited),
        }
    }
}

const LATENT_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// Draw the hidden history of shot `index` prepared in `label`.
pub fn draw_latent(label: State, dev: &DeviceParams, seed: u64, index: u64) -> Latent {
    let mut r = rng::stream(seed, &[u64::from(label.bit()), index, LATENT_STREAM]);
    let u: f64 = r.random();
    let e: f64 = r.sample(Exp1);
    let p_flip = match label {
        State::Ground => dev.p_thermal,
        State::Excited => dev.p_excited_prep_error(),
    };
    let initial = if u < p_flip { label.flipped() } else { label };
    let decay_time = match initial {
        State::Excited if dev.t1.is_finite() => Some(dev.t1 * e),
        _ => None,
    };
    Latent {
        initial,
        decay_time,
    }
}

fn render(
    label: State,
    latent: Latent,
    dev: &DeviceParams,
    noise: &NoiseModel,
    index: u64,
    traj: &Trajectories,
) -> Shot {
    let mean = traj.mean_for(&latent, dev);
    let mut r = rng::stream(noise.seed, &[u64::from(label.bit()), index, NOISE_STREAM]);
    let iq = mean
        .iter()
        .map(|a| {
            let zi: f64 = r.sample(StandardNormal);
            let zq: f64 = r.sample(StandardNormal);
            let (i, _) = adc_code(a.re + noise.sigma * zi, dev);
            let (q, _) = adc_code(a.im + noise.sigma * zq, dev);
            [i, q]
        })
        .collect();
    Shot {
        label,
        latent: Some(latent),
        iq,
    }
}

/// Render shot `index` with a caller-chosen latent history. Noise is drawn
/// from the same per-shot stream [`synth_shot`] uses.
pub fn synth_shot_with_latent(
    label: State,
    latent: Latent,
    dev: &DeviceParams,
    noise: &NoiseModel,
    index: u64,
) -> Result<Shot, PhysicsError> {
    dev.validate()?;
    noise.validate()?;
    Ok(render(label, latent, dev, noise, index, &Trajectories::new(dev)))
}

pub fn synth_shot(
    label: State,
    dev: &DeviceParams,
    noise: &NoiseModel,
    index: u64,
) -> Result<Shot, PhysicsError> {
    let latent = draw_latent(label, dev, noise.seed, index);
    synth_shot_with_latent(label, latent, dev, noise, index)
}

/// Default cap on the in-memory size of a synthesized set (4 GiB).
pub const DEFAULT_MEMORY_CAP: u64 = 4 << 30;

pub fn synth_dataset(
    n_per_class: usize,
    dev: &DeviceParams,
    noise: &NoiseModel,
) -> Result<ShotSet, PhysicsError> {
    synth_dataset_capped(n_per_class, dev, noise, DEFAULT_MEMORY_CAP)
}

/// Generate `2 * n_per_class` shots, interleaved ground/excited.
pub fn synth_dataset_capped(
    n_per_class: usize,
    dev: &DeviceParams,
    noise: &NoiseModel,
    cap_bytes: u64,
) -> Result<ShotSet, PhysicsError> {
    dev.validate()?;
    noise.validate()?;
    if n_per_class < 1 {
        return Err(PhysicsError::InvalidParams("n_per_class must be >= 1".into()));
    }
    let per_shot = (4 * dev.n_samples + std::mem::size_of::<Shot>()) as u64;
    let requested = per_shot.saturating_mul(2 * n_per_class as u64);
    if requested > cap_bytes {
        return Err(PhysicsError::ResourceLimit {
            requested,
            cap: cap_bytes,
        });
    }
    let traj = Trajectories::new(dev);
    let shots = (0..2 * n_per_class)
        .into_par_iter()
        .map(|k| {
            let label = if k % 2 == 0 { State::Ground } else { State::Excited };
            let index = (k / 2) as u64;
            let latent = draw_latent(label, dev, noise.seed, index);
            render(label, latent, dev, noise, index, &traj)
        })
        .collect();
    Ok(ShotSet {
        device: dev.clone(),
        noise: noise.clone(),
        shots,
    })
}

/// Outcome of [`calibrate_noise`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma: f64,
    /// Threshold-method fidelity reached at `sigma`.
    pub fidelity: f64,
    /// Fidelity with the noise switched off.
    pub ceiling: f64,
    pub steps: usize,
}

/// Accepted distance between achieved and target fidelity.
pub const CALIBRATION_TOLERANCE: f64 = 0.003;
const MAX_BISECTION_STEPS: usize = 40;

/// Training fidelity of the threshold method on a fresh calibration set.
pub fn th_fidelity_at(
    sigma: f64,
    window: ReadoutWindow,
    dev: &DeviceParams,
    n_cal: usize,
    seed: u64,
) -> Result<f64, PhysicsError> {
    let set = synth_dataset(n_cal, dev, &NoiseModel::new(sigma, seed))?;
    let model = baseline::fit_threshold(&set, window)?;
    Ok(baseline::evaluate(&model, &set)?.fidelity)
}

/// Bisect the per-sample noise so that threshold readout on `window`
/// reaches `target` fidelity.
pub fn calibrate_noise(
    target: f64,
    window: ReadoutWindow,
    dev: &DeviceParams,
    n_cal: usize,
    seed: u64,
) -> Result<Calibration, PhysicsError> {
    if !(target > 0.5 && target < 1.0) {
        return Err(PhysicsError::BadTarget(target));
    }
    let fid = |s: f64| th_fidelity_at(s, window, dev, n_cal, seed);
    let ceiling = fid(0.0)?;
    let mut steps = 0;
    if (ceiling - target).abs() <= CALIBRATION_TOLERANCE {
        return Ok(Calibration {
            sigma: 0.0,
            fidelity: ceiling,
            ceiling,
            steps,
        });
    }
    if ceiling < target {
        return Err(PhysicsError::NoConvergence {
            steps,
            ceiling,
            best_sigma: 0.0,
            best_fidelity: ceiling,
        });
    }

    // Bracket: start near the steady-state separation and double.
    let sep = (dev.steady_state(State::Excited) - dev.steady_state(State::Ground)).norm();
    let mut lo = 0.0;
    let mut hi = sep.max(f64::MIN_POSITIVE);
    let mut best = (0.0, ceiling);
    loop {
        let f = fid(hi)?;
        steps += 1;
        if (f - target).abs() < (best.1 - target).abs() {
            best = (hi, f);
        }
        if (f - target).abs() <= CALIBRATION_TOLERANCE {
            return Ok(Calibration {
                sigma: hi,
                fidelity: f,
                ceiling,
                steps,
            });
        }
        if f < target {
            break;
        }
        if steps >= MAX_BISECTION_STEPS {
            return Err(PhysicsError::NoConvergence {
                steps,
                ceiling,
                best_sigma: best.0,
                best_fidelity: best.1,
            });
        }
        lo = hi;
        hi *= 2.0;
    }

    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let f = fid(mid)?;
        steps += 1;
        if (f - target).abs() < (best.1 - target).abs() {
            best = (mid, f);
        }
        if (f - target).abs() <= CALIBRATION_TOLERANCE {
            return Ok(Calibration {
                sigma: mid,
                fidelity: f,
                ceiling,
                steps,
            });
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(PhysicsError::NoConvergence {
        steps,
        ceiling,
        best_sigma: best.0,
        best_fidelity: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_device() -> DeviceParams {
        DeviceParams {
            p_thermal: 0.0,
            p_pi_error: 0.0,
            t1: f64::INFINITY,
            ..DeviceParams::default()
        }
    }

    #[test]
    fn trajectory_starts_empty() {
        let dev = DeviceParams::default();
        for s in State::BOTH {
            assert_eq!(mean_trajectory(s, &dev)[0], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn steady_state_separation_lies_along_q() {
        let dev = DeviceParams::default();
        let d = dev.steady_state(State::Excited) - dev.steady_state(State::Ground);
        assert!(d.re.abs() < 1e-12 * d.norm());
        assert!(d.im > 0.0);
    }

    #[test]
    fn ring_up_reaches_95_percent_near_284_cycles() {
        // The field relaxes at kappa/2, so separation is only about half
        // built after 100 cycles.
        let dev = DeviceParams::default();
        let g = mean_trajectory(State::Ground, &dev);
        let e = mean_trajectory(State::Excited, &dev);
        let ss = (dev.steady_state(State::Excited) - dev.steady_state(State::Ground)).norm();
        let frac = |n: usize| (e[n] - g[n]).norm() / ss;
        assert!((frac(100) - 0.4796).abs() < 1e-3, "{}", frac(100));
        let first = (0..dev.n_samples).find(|&n| frac(n) >= 0.95).unwrap();
        assert!((283..=285).contains(&first), "{first}");
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut dev = DeviceParams::default();
        dev.adc_full_scale = 0.0;
        assert!(matches!(dev.validate(), Err(PhysicsError::ZeroFullScale)));
        let mut dev = DeviceParams::default();
        dev.p_thermal = 0.5;
        assert!(dev.validate().is_err());
        let mut dev = DeviceParams::default();
        dev.adc_bits = 17;
        assert!(dev.validate().is_err());
        let mut dev = DeviceParams::default();
        dev.n_samples = 0;
        assert!(dev.validate().is_err());
    }

    #[test]
    fn zero_full_scale_is_rejected_by_synth() {
        let dev = DeviceParams {
            adc_full_scale: 0.0,
            ..DeviceParams::default()
        };
        let err = synth_shot(State::Ground, &dev, &NoiseModel::new(0.0, 1), 0).unwrap_err();
        assert!(matches!(err, PhysicsError::ZeroFullScale));
    }

    #[test]
    fn noiseless_ground_shot_is_quantized_mean() {
        let dev = quiet_device();
        let shot = synth_shot(State::Ground, &dev, &NoiseModel::new(0.0, 3), 5).unwrap();
        let mean = mean_trajectory(State::Ground, &dev);
        for (code, a) in shot.iq.iter().zip(&mean) {
            assert_eq!(code[0], adc_code(a.re, &dev).0);
            assert_eq!(code[1], adc_code(a.im, &dev).0);
        }
    }

    #[test]
    fn forced_early_decay_converges_to_ground() {
        let dev = DeviceParams {
            p_thermal: 0.0,
            p_pi_error: 0.0,
            ..DeviceParams::default()
        };
        let latent = Latent {
            initial: State::Excited,
            decay_time: Some(0.0),
        };
        let shot =
            synth_shot_with_latent(State::Excited, latent, &dev, &NoiseModel::new(0.0, 1), 0)
                .unwrap();
        let ground = mean_trajectory(State::Ground, &dev);
        let half = f64::from(1u32 << (dev.adc_bits - 1));
        let analog = |v: f64| v / dev.adc_full_scale * half + half;
        // Residual after eight field lifetimes is well under one code.
        let settle = (8.0 / (dev.kappa / 2.0) / dev.sample_period).ceil() as usize;
        assert!(settle < dev.n_samples);
        for n in settle..dev.n_samples {
            assert!((f64::from(shot.iq[n][0]) - analog(ground[n].re)).abs() < 1.0);
            assert!((f64::from(shot.iq[n][1]) - analog(ground[n].im)).abs() < 1.0);
        }
    }

    #[test]
    fn shots_are_deterministic() {
        let dev = DeviceParams::default();
        let noise = NoiseModel::new(3e-7, 42);
        let a = synth_shot(State::Excited, &dev, &noise, 17).unwrap();
        let b = synth_shot(State::Excited, &dev, &noise, 17).unwrap();
        assert_eq!(a, b);
        let c = synth_shot(State::Excited, &dev, &noise, 18).unwrap();
        assert_ne!(a.iq, c.iq);
    }

    #[test]
    fn dataset_is_interleaved_and_counted() {
        let dev = DeviceParams {
            n_samples: 20,
            ..DeviceParams::default()
        };
        let noise = NoiseModel::new(1e-7, 9);
        let set = synth_dataset(3, &dev, &noise).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.count(State::Ground), 3);
        assert_eq!(set.count(State::Excited), 3);
        assert_eq!(set.shots[0].label, State::Ground);
        assert_eq!(set.shots[1].label, State::Excited);
        assert_eq!(set, synth_dataset(3, &dev, &noise).unwrap());
        // Shot k of the set is shot k/2 of its class.
        let lone = synth_shot(State::Excited, &dev, &noise, 2).unwrap();
        assert_eq!(set.shots[5], lone);
    }

    #[test]
    fn dataset_refuses_oversized_requests() {
        let dev = DeviceParams::default();
        let err = synth_dataset_capped(1000, &dev, &NoiseModel::new(0.0, 0), 1024).unwrap_err();
        assert!(matches!(err, PhysicsError::ResourceLimit { .. }));
        assert!(synth_dataset(0, &dev, &NoiseModel::new(0.0, 0)).is_err());
    }

    #[test]
    fn adc_codes_clamp() {
        let dev = DeviceParams::default();
        assert_eq!(adc_code(0.0, &dev), (8192, false));
        assert_eq!(adc_code(10.0 * dev.adc_full_scale, &dev), (16383, true));
        assert_eq!(adc_code(-10.0 * dev.adc_full_scale, &dev), (0, true));
        assert_eq!(adc_code(-dev.adc_full_scale, &dev), (0, false));
    }

    #[test]
    fn latent_trace_marks_decay() {
        let dev = DeviceParams {
            n_samples: 10,
            ..DeviceParams::default()
        };
        let shot = Shot {
            label: State::Excited,
            latent: Some(Latent {
                initial: State::Excited,
                decay_time: Some(4.5 * dev.sample_period),
            }),
            iq: vec![[0, 0]; 10],
        };
        assert_eq!(
            shot.true_state_trace(&dev).unwrap(),
            vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn calibration_rejects_unreachable_target() {
        let dev = DeviceParams {
            n_samples: 200,
            ..DeviceParams::default()
        };
        let w = ReadoutWindow::new(50, 100);
        let err = calibrate_noise(0.9999, w, &dev, 500, 1).unwrap_err();
        match err {
            PhysicsError::NoConvergence { ceiling, .. } => assert!(ceiling < 0.9999 - 0.003),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            calibrate_noise(0.4, w, &dev, 10, 1),
            Err(PhysicsError::BadTarget(_))
        ));
    }
}
