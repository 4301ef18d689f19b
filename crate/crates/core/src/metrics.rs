//! Readout fidelity and confusion rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::State;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("confusion counts need at least one shot per class (n0={n0}, n1={n1})")]
    EmptyClass { n0: u64, n1: u64 },
    #[error("misclassified count exceeds class size")]
    CountOverflow,
    #[error("prediction and label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Two-class confusion counts.
///
/// `m10` counts ground-prepared shots called excited, `m01` the reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n0: u64,
    pub n1: u64,
    pub m10: u64,
    pub m01: u64,
}

impl ConfusionCounts {
    pub fn new(n0: u64, n1: u64, m10: u64, m01: u64) -> Result<Self, MetricsError> {
        if n0 == 0 || n1 == 0 {
            return Err(MetricsError::EmptyClass { n0, n1 });
        }
        if m10 > n0 || m01 > n1 {
            return Err(MetricsError::CountOverflow);
        }
        Ok(ConfusionCounts { n0, n1, m10, m01 })
    }

    pub fn from_predictions(labels: &[State], predicted: &[State]) -> Result<Self, MetricsError> {
        if labels.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch(labels.len(), predicted.len()));
        }
        let (mut n0, mut n1, mut m10, mut m01) = (0, 0, 0, 0);
        for (&l, &p) in labels.iter().zip(predicted) {
            match l {
                State::Ground => {
                    n0 += 1;
                    m10 += u64::from(p == State::Excited);
                }
                State::Excited => {
                    n1 += 1;
                    m01 += u64::from(p == State::Ground);
                }
            }
        }
        ConfusionCounts::new(n0, n1, m10, m01)
    }

    /// Swap the roles of the two classes.
    pub fn swapped(self) -> Self {
        ConfusionCounts {
            n0: self.n1,
            n1: self.n0,
            m10: self.m01,
            m01: self.m10,
        }
    }

    pub fn report(&self) -> FidelityReport {
        fidelity_report(self)
    }
}

/// Fidelity `1 - (P(0|1) + P(1|0)) / 2` with binomial standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity: f64,
    pub p01: f64,
    pub p10: f64,
    pub sem_fidelity: f64,
    pub sem_p01: f64,
    pub sem_p10: f64,
}

pub fn fidelity_report(c: &ConfusionCounts) -> FidelityReport {
    let p01 = c.m01 as f64 / c.n1 as f64;
    let p10 = c.m10 as f64 / c.n0 as f64;
    let sem_p01 = (p01 * (1.0 - p01) / c.n1 as f64).sqrt();
    let sem_p10 = (p10 * (1.0 - p10) / c.n0 as f64).sqrt();
    FidelityReport {
        fidelity: fidelity_from_rates(p01, p10),
        p01,
        p10,
        sem_fidelity: 0.5 * sem_p01.hypot(sem_p10),
        sem_p01,
        sem_p10,
    }
}

pub fn fidelity_from_rates(p01: f64, p10: f64) -> f64 {
    1.0 - 0.5 * (p01 + p10)
}

impl FidelityReport {
    pub const CSV_HEADER: &'static str = "fidelity,p01,p10,sem_fidelity,sem_p01,sem_p10";

    pub fn to_csv_record(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.fidelity, self.p01, self.p10, self.sem_fidelity, self.sem_p01, self.sem_p10
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn reported_fidelity_from_rates() {
        // 6.05% and 2.34% error rates.
        assert!((fidelity_from_rates(0.0605, 0.0234) - 0.95805).abs() < 1e-12);
    }

    #[test]
    fn perfect_readout() {
        let r = ConfusionCounts::new(10, 12, 0, 0).unwrap().report();
        assert_eq!(r.fidelity, 1.0);
        assert_eq!(r.sem_fidelity, 0.0);
        assert_eq!(r.sem_p01, 0.0);
        assert_eq!(r.sem_p10, 0.0);
    }

    #[test]
    fn coin_flip_is_one_half() {
        let r = ConfusionCounts::new(100, 100, 50, 50).unwrap().report();
        assert_eq!(r.fidelity, 0.5);
    }

    #[test]
    fn rejects_invalid_counts() {
        assert!(ConfusionCounts::new(0, 5, 0, 0).is_err());
        assert_eq!(
            ConfusionCounts::new(5, 5, 6, 0),
            Err(MetricsError::CountOverflow)
        );
    }

    #[test]
    fn from_predictions_counts_errors() {
        use State::*;
        let labels = [Ground, Ground, Excited, Excited, Excited];
        let preds = [Ground, Excited, Excited, Ground, Ground];
        let c = ConfusionCounts::from_predictions(&labels, &preds).unwrap();
        assert_eq!(c, ConfusionCounts::new(2, 3, 1, 2).unwrap());
    }

    #[test]
    fn sem_matches_bootstrap() {
        let (n, p01, p10) = (500_000u64, 0.0605, 0.0234);
        let c = ConfusionCounts::new(n, n, (p10 * n as f64) as u64, (p01 * n as f64) as u64)
            .unwrap();
        let r = c.report();
        assert!((r.sem_fidelity - 2.0e-4).abs() < 0.05e-4, "{}", r.sem_fidelity);

        // Parametric bootstrap: resample each class as Bernoulli draws.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let reps = 1000;
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: u64, p: f64| {
            // Normal approximation to the binomial count is too close to
            // the formula under test, so draw the counts exactly.
            let mut k = 0u64;
            for _ in 0..n {
                k += u64::from(rng.random::<f64>() < p);
            }
            k as f64 / n as f64
        };
        let small = 20_000u64;
        let fids: Vec<f64> = (0..reps)
            .map(|_| fidelity_from_rates(draw(&mut rng, small, r.p01), draw(&mut rng, small, r.p10)))
            .collect();
        let mean = fids.iter().sum::<f64>() / reps as f64;
        let sd = (fids.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        // Bootstrap at a smaller n, rescaled by sqrt(n) to the full size.
        let boot = sd * (small as f64 / n as f64).sqrt();
        assert!(
            ((boot - r.sem_fidelity) / r.sem_fidelity).abs() < 0.10,
            "bootstrap {boot} vs formula {}",
            r.sem_fidelity
        );
    }

    #[test]
    fn csv_record_has_six_fields() {
        let r = ConfusionCounts::new(10, 10, 1, 2).unwrap().report();
        assert_eq!(r.to_csv_record().split(',').count(), 6);
        let back: FidelityReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
