//! Failure injection, independent of the serving strategy so every strategy
//! faces the same failures.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SimError, TraceRequest};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureInjectorConfig {
    /// Fraction of requests that experience one failure.
    pub rate: f64,
    pub seed: u64,
    pub workers_per_failure: usize,
}

impl Default for FailureInjectorConfig {
    fn default() -> Self {
        FailureInjectorConfig { rate: 0.1, seed: 0, workers_per_failure: 1 }
    }
}

impl FailureInjectorConfig {
    pub fn validate(&self, workers: usize) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(SimError::Config(format!("failure rate must be in [0, 1], got {}", self.rate)));
        }
        if self.workers_per_failure == 0 || self.workers_per_failure > workers {
            return Err(SimError::Config(format!(
                "workers_per_failure must be in [1, {workers}], got {}",
                self.workers_per_failure
            )));
        }
        Ok(())
    }
}

/// Where a request fails. `point` is uniform in `[0, 1)` over the request's
/// work units (prefill chunks followed by decode tokens); the simulator maps
/// it onto a unit index and a fraction into that unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedFailure {
    pub request_id: u64,
    pub workers: Vec<usize>,
    pub point: f64,
}

impl InjectedFailure {
    /// `(unit index, fraction of that unit done)` for a request with
    /// `units` work units.
    pub fn locate(&self, units: usize) -> (usize, f64) {
        let x = self.point * units as f64;
        let unit = (x.floor() as usize).min(units.saturating_sub(1));
        (unit, (x - unit as f64).clamp(0.0, 1.0))
    }
}

pub fn inject_failures(trace: &[TraceRequest], workers: usize, config: &FailureInjectorConfig) -> Result<Vec<InjectedFailure>, SimError> {
    config.validate(workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for req in trace {
        // Draw every variate for every request so the failure set at one
        // rate does not shift the draws of later requests.
        let hit = rng.random::<f64>() < config.rate;
        let point = rng.random::<f64>();
        let mut chosen = sample(&mut rng, workers, config.workers_per_failure).into_vec();
        chosen.sort_unstable();
        if hit {
            out.push(InjectedFailure { request_id: req.id, workers: chosen, point });
        }
    }
    Ok(out)
}
