use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BackendError;

/// Exponential backoff with optional jitter and server-hint override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_delay_ms: u64,
    pub max_delay_ms: u64,
    pub multiplier: f64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_delay_ms: 500,
            max_delay_ms: 30_000,
            multiplier: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    /// Delay before attempt `attempt + 1` (attempts count from 0).
    pub fn delay_for(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        let cap = Duration::from_millis(self.max_delay_ms);
        if let Some(h) = hint {
            return h.min(cap);
        }
        let base = self.initial_delay_ms as f64 * self.multiplier.powi(attempt as i32);
        let base = base.min(self.max_delay_ms as f64);
        let ms = if self.jitter {
            base * rand::rng().random_range(0.5..=1.0)
        } else {
            base
        };
        Duration::from_millis(ms as u64).min(cap)
    }

    /// Run `op` until it succeeds, fails permanently, or attempts run out.
    ///
    /// `op` is handed the attempt number; the request it sends must be
    /// identical on every attempt.
    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, BackendError>,
        sleep: &mut dyn FnMut(Duration),
    ) -> Result<T, BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    let hint = match &e {
                        BackendError::RateLimited { retry_after } => *retry_after,
                        _ => None,
                    };
                    let d = self.delay_for(attempt, hint);
                    log::debug!("attempt {} failed ({e}); retrying in {:?}", attempt + 1, d);
                    sleep(d);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
