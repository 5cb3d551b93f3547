//! Synthetic coupled epidemic-like series for smoke tests and benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::EpidemicSeries;
use crate::error::{Error, Result};

/// Region `i` observes the shared driver `s` delayed by `i·lag` steps, plus
/// independent Gaussian noise. The driver is a sinusoid plus an AR(1) drift,
/// so part of its future is only visible in the leading regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoupledSinusoids {
    pub regions: usize,
    pub len: usize,
    pub period: f64,
    pub amplitude: f64,
    pub offset: f64,
    /// Delay added per region index.
    pub lag: usize,
    pub drift_phi: f64,
    pub drift_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CoupledSinusoids {
    fn default() -> Self {
        Self {
            regions: 5,
            len: 500,
            period: 20.0,
            amplitude: 1.0,
            offset: 3.0,
            lag: 1,
            drift_phi: 0.9,
            drift_sigma: 0.15,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl CoupledSinusoids {
    pub fn generate(&self) -> Result<EpidemicSeries> {
        if self.regions == 0 || self.len == 0 {
            return Err(Error::config("synthetic series needs regions and length"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::config(e.to_string()));
        let drift_noise = normal(self.drift_sigma)?;
        let obs_noise = normal(self.noise_sigma)?;
        let delay = self.lag * (self.regions - 1);
        let total = self.len + delay;
        let mut drift = 0.0;
        let driver: Vec<f64> = (0..total)
            .map(|k| {
                drift = self.drift_phi * drift + drift_noise.sample(&mut rng);
                let t = k as f64 - delay as f64;
                self.amplitude * (2.0 * std::f64::consts::PI * t / self.period).sin() + drift
            })
            .collect();
        let rows = (0..self.regions)
            .map(|i| {
                (0..self.len)
                    .map(|t| (self.offset + driver[t + delay - i * self.lag] + obs_noise.sample(&mut rng)).max(0.0))
                    .collect()
            })
            .collect();
        EpidemicSeries::from_rows(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_lag_the_leader() {
        let spec = CoupledSinusoids {
            noise_sigma: 1e-12,
            ..Default::default()
        };
        let s = spec.generate().unwrap();
        assert_eq!((s.num_regions(), s.len()), (5, 500));
        for i in 1..5 {
            for t in i..500 {
                assert!((s.get(i, t) - s.get(0, t - i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn seeded() {
        let a = CoupledSinusoids::default().generate().unwrap();
        let b = CoupledSinusoids::default().generate().unwrap();
        assert_eq!(a, b);
        assert!(a.min_value() >= 0.0);
    }
}
