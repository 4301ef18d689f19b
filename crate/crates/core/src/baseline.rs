//! Threshold and matched-filter discriminators.
//!
//! Both reduce a windowed trace to one score and compare it with a threshold
//! picked by an exhaustive scan of the midpoints between adjacent sorted
//! training scores. A score exactly on the threshold reads as excited.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ConfusionCounts, FidelityReport, MetricsError};
use crate::physics::{Shot, ShotSet, State};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("window {start}:{size} does not fit a {n_samples}-sample trace")]
    WindowOutOfRange {
        start: usize,
        size: usize,
        n_samples: usize,
    },
    #[error("window size must be >= 1")]
    EmptyWindow,
    #[error("class means coincide; no discriminating axis")]
    DegenerateClasses,
    #[error("need at least {need} shots per class, got {ground} ground / {excited} excited")]
    TooFewShots {
        need: usize,
        ground: usize,
        excited: usize,
    },
    #[error("model was fit on window {expected}, asked to predict on {got}")]
    WindowMismatch {
        expected: ReadoutWindow,
        got: ReadoutWindow,
    },
    #[error("bad window syntax {0:?}, expected start:size")]
    BadWindowSyntax(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Slice `[start, start + size)` of the trace, in clock cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReadoutWindow {
    pub start: usize,
    pub size: usize,
}

impl ReadoutWindow {
    pub const fn new(start: usize, size: usize) -> Self {
        ReadoutWindow { start, size }
    }

    pub fn end(&self) -> usize {
        self.start + self.size
    }

    pub fn n_features(&self) -> usize {
        2 * self.size
    }

    pub fn check(&self, n_samples: usize) -> Result<(), BaselineError> {
        if self.size == 0 {
            return Err(BaselineError::EmptyWindow);
        }
        if self.end() > n_samples {
            return Err(BaselineError::WindowOutOfRange {
                start: self.start,
                size: self.size,
                n_samples,
            });
        }
        Ok(())
    }
}

impl fmt::Display for ReadoutWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.size)
    }
}

impl FromStr for ReadoutWindow {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BaselineError::BadWindowSyntax(s.to_string());
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let start = a.trim().parse().map_err(|_| bad())?;
        let size: usize = b.trim().parse().map_err(|_| bad())?;
        if size == 0 {
            return Err(BaselineError::EmptyWindow);
        }
        Ok(ReadoutWindow { start, size })
    }
}

/// Interleaved `[I_s, Q_s, I_s+1, Q_s+1, ...]` codes of the window.
pub fn window_slice(shot: &Shot, w: ReadoutWindow) -> Result<&[u16], BaselineError> {
    w.check(shot.n_samples())?;
    Ok(shot.iq[w.start..w.end()].as_flattened())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    /// Scores at or above the threshold read as excited.
    ExcitedAbove,
    /// Scores at or below the threshold read as excited.
    ExcitedBelow,
}

impl Polarity {
    pub fn decide(self, score: f64, threshold: f64) -> State {
        let excited = match self {
            Polarity::ExcitedAbove => score >= threshold,
            Polarity::ExcitedBelow => score <= threshold,
        };
        if excited {
            State::Excited
        } else {
            State::Ground
        }
    }
}

/// Threshold on the time-averaged I/Q point projected onto the axis
/// joining the two class means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub window: ReadoutWindow,
    pub axis: [f64; 2],
    pub threshold: f64,
    pub polarity: Polarity,
}

/// Per-sample weighted sum of the windowed trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedFilterModel {
    pub window: ReadoutWindow,
    /// Interleaved I/Q weights, `2 * window.size` long.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub polarity: Polarity,
}

/// Anything that maps a windowed trace to a score compared with a threshold.
pub trait Discriminator {
    fn window(&self) -> ReadoutWindow;
    fn score_features(&self, features: &[u16]) -> f64;
    fn threshold(&self) -> f64;
    fn polarity(&self) -> Polarity;

    fn score(&self, shot: &Shot) -> Result<f64, BaselineError> {
        Ok(self.score_features(window_slice(shot, self.window())?))
    }

    fn predict(&self, shot: &Shot) -> Result<State, BaselineError> {
        Ok(self.polarity().decide(self.score(shot)?, self.threshold()))
    }

    /// Predict with an explicit window, which must match the fitted one.
    fn predict_on(&self, shot: &Shot, w: ReadoutWindow) -> Result<State, BaselineError> {
        if w != self.window() {
            return Err(BaselineError::WindowMismatch {
                expected: self.window(),
                got: w,
            });
        }
        self.predict(shot)
    }
}

fn time_average(features: &[u16]) -> [f64; 2] {
    let mut acc = [0u64; 2];
    for pair in features.chunks_exact(2) {
        acc[0] += u64::from(pair[0]);
        acc[1] += u64::from(pair[1]);
    }
    let n = (features.len() / 2) as f64;
    [acc[0] as f64 / n, acc[1] as f64 / n]
}

impl Discriminator for ThresholdModel {
    fn window(&self) -> ReadoutWindow {
        self.window
    }

    fn score_features(&self, features: &[u16]) -> f64 {
        let [i, q] = time_average(features);
        self.axis[0] * i + self.axis[1] * q
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn polarity(&self) -> Polarity {
        self.polarity
    }
}

impl Discriminator for MatchedFilterModel {
    fn window(&self) -> ReadoutWindow {
        self.window
    }

    fn score_features(&self, features: &[u16]) -> f64 {
        self.weights
            .iter()
            .zip(features)
            .map(|(w, &x)| w * f64::from(x))
            .sum()
    }

    fn threshold(&self) -> f64 {
        self.bias
    }

    fn polarity(&self) -> Polarity {
        self.polarity
    }
}

/// Result of the exhaustive midpoint scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdFit {
    pub threshold: f64,
    pub fidelity: f64,
}

/// Pick the midpoint between adjacent distinct sorted scores that maximizes
/// training fidelity (excited above). Ties go to the candidate closest to
/// the midpoint of the two class means.
pub fn best_threshold(ground: &[f64], excited: &[f64]) -> Result<ThresholdFit, BaselineError> {
    if ground.is_empty() || excited.is_empty() {
        return Err(BaselineError::TooFewShots {
            need: 1,
            ground: ground.len(),
            excited: excited.len(),
        });
    }
    let n0 = ground.len() as u64;
    let n1 = excited.len() as u64;
    let mut all: Vec<(f64, bool)> = ground
        .iter()
        .map(|&s| (s, false))
        .chain(excited.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let centre = 0.5 * (mean(ground) + mean(excited));

    // Sweep boundaries between distinct values. Below the boundary reads
    // ground: cost = m10 * n1 + m01 * n0 (scaled infidelity, exact in u128).
    let mut ground_below = 0u64;
    let mut excited_below = 0u64;
    let mut best: Option<(u128, f64, f64)> = None;
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                excited_below += 1;
            } else {
                ground_below += 1;
            }
            i += 1;
        }
        if i == all.len() {
            break;
        }
        let t = 0.5 * (v + all[i].0);
        let m10 = n0 - ground_below;
        let m01 = excited_below;
        let cost = u128::from(m10) * u128::from(n1) + u128::from(m01) * u128::from(n0);
        let dist = (t - centre).abs();
        let better = match best {
            None => true,
            Some((c, _, d)) => cost < c || (cost == c && dist < d),
        };
        if better {
            best = Some((cost, t, dist));
        }
    }
    let (cost, threshold, _) = best.ok_or(BaselineError::DegenerateClasses)?;
    let fidelity = 1.0 - cost as f64 / (2.0 * n0 as f64 * n1 as f64);
    Ok(ThresholdFit {
        threshold,
        fidelity,
    })
}

fn split_by_label<'a>(set: &'a ShotSet) -> (Vec<&'a Shot>, Vec<&'a Shot>) {
    set.shots.iter().partition(|s| s.label == State::Ground)
}

pub fn fit_threshold(train: &ShotSet, w: ReadoutWindow) -> Result<ThresholdModel, BaselineError> {
    w.check(train.n_samples())?;
    let (g, e) = split_by_label(train);
    if g.is_empty() || e.is_empty() {
        return Err(BaselineError::TooFewShots {
            need: 1,
            ground: g.len(),
            excited: e.len(),
        });
    }
    let avg = |shots: &[&Shot]| -> Result<Vec<[f64; 2]>, BaselineError> {
        shots
            .iter()
            .map(|s| Ok(time_average(window_slice(s, w)?)))
            .collect()
    };
    let ag = avg(&g)?;
    let ae = avg(&e)?;
    let centroid = |pts: &[[f64; 2]]| {
        let n = pts.len() as f64;
        let s = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let mg = centroid(&ag);
    let me = centroid(&ae);
    let d = [me[0] - mg[0], me[1] - mg[1]];
    let norm = d[0].hypot(d[1]);
    if norm == 0.0 {
        return Err(BaselineError::DegenerateClasses);
    }
    let axis = [d[0] / norm, d[1] / norm];
    let proj = |p: &[f64; 2]| axis[0] * p[0] + axis[1] * p[1];
    let pg: Vec<f64> = ag.iter().map(proj).collect();
    let pe: Vec<f64> = ae.iter().map(proj).collect();
    let fit = best_threshold(&pg, &pe)?;
    Ok(ThresholdModel {
        window: w,
        axis,
        threshold: fit.threshold,
        polarity: Polarity::ExcitedAbove,
    })
}

/// Pooled per-feature variances are floored at this fraction of the largest.
pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Matched-filter weights `(mu1 - mu0) / pooled variance` for each feature.
pub fn matched_filter_weights(ground: &[&[u16]], excited: &[&[u16]]) -> Result<Vec<f64>, BaselineError> {
    if ground.len() < 2 || excited.len() < 2 {
        return Err(BaselineError::TooFewShots {
            need: 2,
            ground: ground.len(),
            excited: excited.len(),
        });
    }
    let k = ground[0].len();
    let moments = |rows: &[&[u16]]| {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; k];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(r.iter()) {
                *m += f64::from(x);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut ss = vec![0.0; k];
        for r in rows {
            for ((s, &x), m) in ss.iter_mut().zip(r.iter()).zip(&mean) {
                let d = f64::from(x) - m;
                *s += d * d;
            }
        }
        (mean, ss)
    };
    let (m0, ss0) = moments(ground);
    let (m1, ss1) = moments(excited);
    let dof = (ground.len() + excited.len() - 2) as f64;
    let mut var: Vec<f64> = ss0.iter().zip(&ss1).map(|(a, b)| (a + b) / dof).collect();
    let vmax = var.iter().cloned().fold(0.0, f64::max);
    if vmax == 0.0 {
        // Noise-free data: fall back to the plain mean difference.
        var.iter_mut().for_each(|v| *v = 1.0);
    } else {
        let floor = VARIANCE_FLOOR * vmax;
        var.iter_mut().for_each(|v| *v = v.max(floor));
    }
    let weights: Vec<f64> = m1
        .iter()
        .zip(&m0)
        .zip(&var)
        .map(|((a, b), v)| (a - b) / v)
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(BaselineError::DegenerateClasses);
    }
    Ok(weights)
}

pub fn fit_matched_filter(
    train: &ShotSet,
    w: ReadoutWindow,
) -> Result<MatchedFilterModel, BaselineError> {
    w.check(train.n_samples())?;
    let (g, e) = split_by_label(train);
    let gr = g.iter().map(|s| window_slice(s, w)).collect::<Result<Vec<_>, _>>()?;
    let er = e.iter().map(|s| window_slice(s, w)).collect::<Result<Vec<_>, _>>()?;
    let weights = matched_filter_weights(&gr, &er)?;
    let mut model = MatchedFilterModel {
        window: w,
        weights,
        bias: 0.0,
        polarity: Polarity::ExcitedAbove,
    };
    let sg: Vec<f64> = gr.iter().map(|r| model.score_features(r)).collect();
    let se: Vec<f64> = er.iter().map(|r| model.score_features(r)).collect();
    model.bias = best_threshold(&sg, &se)?.threshold;
    Ok(model)
}

/// Predict every shot of `set` and score the predictions.
pub fn evaluate<D: Discriminator + ?Sized>(
    model: &D,
    set: &ShotSet,
) -> Result<FidelityReport, BaselineError> {
    let preds = set
        .shots
        .iter()
        .map(|s| model.predict(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ConfusionCounts::from_predictions(&set.labels(), &preds)?.report())
}
