use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::BackendError;

/// Exponential back-off for transient failures.
///
/// The n-th retry (n = 1 for the wait between attempts 1 and 2) sleeps
/// `base_delay * multiplier^(n-1)`, scaled by a uniform factor in
/// `[1 - jitter_fraction, 1 + jitter_fraction]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(with = "duration_secs")]
    pub base_delay: Duration,
    pub multiplier: f64,
    pub max_attempts: u32,
    pub jitter_fraction: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_secs(1),
            multiplier: 2.0,
            max_attempts: 6,
            jitter_fraction: 0.1,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.multiplier.is_finite() || self.multiplier <= 1.0 {
            return Err(BackendError::InvalidPolicy(format!(
                "multiplier {} must be > 1",
                self.multiplier
            )));
        }
        if self.max_attempts == 0 {
            return Err(BackendError::InvalidPolicy("max_attempts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(BackendError::InvalidPolicy(format!(
                "jitter_fraction {} outside [0, 1)",
                self.jitter_fraction
            )));
        }
        Ok(())
    }

    /// Un-jittered delay before the `retry`-th retry (1-based).
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        let exp = retry.saturating_sub(1).min(i32::MAX as u32) as i32;
        scale(self.base_delay, self.multiplier.powi(exp))
    }

    /// Delay with jitter applied; `unit` is a sample from [-1, 1].
    pub fn jittered_delay(&self, retry: u32, unit: f64) -> Duration {
        let nominal = self.nominal_delay(retry);
        if self.jitter_fraction == 0.0 {
            return nominal;
        }
        scale(nominal, (1.0 + self.jitter_fraction * unit.clamp(-1.0, 1.0)).max(0.0))
    }
}

// Works in nanoseconds so integral products come out exact; going through
// f64 seconds would not.
fn scale(d: Duration, factor: f64) -> Duration {
    let nanos = (d.as_nanos() as f64 * factor).round();
    if nanos >= u64::MAX as f64 {
        Duration::from_nanos(u64::MAX)
    } else {
        Duration::from_nanos(nanos as u64)
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays instead of sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    delays: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.delays.lock().unwrap().push(d);
    }
}
