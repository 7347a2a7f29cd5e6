//! Synthetic request traces: Poisson arrivals over a two-class length mix.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestClass {
    LongInShortOut,
    ShortInLongOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub id: u64,
    /// Arrival time in seconds.
    pub arrival: f64,
    /// Prompt length in tokens.
    pub input_len: usize,
    pub output_len: usize,
    pub class: RequestClass,
}

/// Inclusive token-length range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl LengthRange {
    pub const fn new(min: usize, max: usize) -> Self {
        LengthRange { min, max }
    }

    fn range(self) -> RangeInclusive<usize> {
        self.min..=self.max
    }

    fn check(self, name: &str) -> Result<(), SimError> {
        if self.min == 0 || self.min > self.max {
            return Err(SimError::Config(format!("{name} range [{}, {}] is empty or starts at 0", self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub count: usize,
    /// Arrivals per second.
    pub rate: f64,
    /// Fraction of long-input requests.
    pub long_fraction: f64,
    pub long_input: LengthRange,
    pub long_output: LengthRange,
    pub short_input: LengthRange,
    pub short_output: LengthRange,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            count: 200,
            rate: 0.05,
            long_fraction: 0.5,
            long_input: LengthRange::new(16 * 1024, 64 * 1024),
            long_output: LengthRange::new(128, 512),
            short_input: LengthRange::new(128, 1024),
            short_output: LengthRange::new(2 * 1024, 8 * 1024),
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.count == 0 {
            return Err(SimError::Config("trace count must be at least 1".into()));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(SimError::Config(format!("arrival rate must be positive, got {}", self.rate)));
        }
        if !(0.0..=1.0).contains(&self.long_fraction) {
            return Err(SimError::Config(format!("long_fraction must be in [0, 1], got {}", self.long_fraction)));
        }
        self.long_input.check("long_input")?;
        self.long_output.check("long_output")?;
        self.short_input.check("short_input")?;
        self.short_output.check("short_output")
    }
}

pub fn generate_trace(seed: u64, config: &TraceConfig) -> Result<Vec<TraceRequest>, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = Exp::new(config.rate).map_err(|e| SimError::Config(e.to_string()))?;
    let mut clock = 0.0;
    let mut out = Vec::with_capacity(config.count);
    for id in 0..config.count as u64 {
        clock += gaps.sample(&mut rng);
        let long = rng.random_bool(config.long_fraction);
        let (class, input, output) = if long {
            (RequestClass::LongInShortOut, config.long_input, config.long_output)
        } else {
            (RequestClass::ShortInLongOut, config.short_input, config.short_output)
        };
        out.push(TraceRequest {
            id,
            arrival: clock,
            input_len: rng.random_range(input.range()),
            output_len: rng.random_range(output.range()),
            class,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = TraceConfig { count: 50, ..TraceConfig::default() };
        assert_eq!(generate_trace(7, &c).unwrap(), generate_trace(7, &c).unwrap());
        assert_ne!(generate_trace(7, &c).unwrap(), generate_trace(8, &c).unwrap());
    }

    #[test]
    fn all_long() {
        let c = TraceConfig { count: 100, long_fraction: 1.0, ..TraceConfig::default() };
        let t = generate_trace(1, &c).unwrap();
        assert!(t.iter().all(|r| r.class == RequestClass::LongInShortOut));
        assert!(t.iter().all(|r| (16384..=65536).contains(&r.input_len) && (128..=512).contains(&r.output_len)));
    }

    #[test]
    fn mean_gap_close_to_inverse_rate() {
        let c = TraceConfig { count: 10_000, rate: 4.0, ..TraceConfig::default() };
        let t = generate_trace(3, &c).unwrap();
        let mean = t.last().unwrap().arrival / t.len() as f64;
        assert!((mean - 0.25).abs() / 0.25 < 0.05, "mean gap {mean}");
        assert!(t.windows(2).all(|w| w[0].arrival <= w[1].arrival));
    }

    #[test]
    fn bad_configs() {
        let d = TraceConfig::default();
        assert!(generate_trace(0, &TraceConfig { count: 0, ..d.clone() }).is_err());
        assert!(generate_trace(0, &TraceConfig { rate: 0.0, ..d.clone() }).is_err());
        assert!(generate_trace(0, &TraceConfig { short_input: LengthRange::new(10, 5), ..d.clone() }).is_err());
        assert!(generate_trace(0, &TraceConfig { long_output: LengthRange::new(0, 5), ..d }).is_err());
    }
}
