use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LlmError;

/// Exponential backoff with jitter for retryable service errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 1000,
            factor: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            factor: 1.0,
            jitter: false,
        }
    }

    /// Delay before attempt `attempt + 1`, where `attempt` starts at 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let raw = self.base_delay_ms as f64 * self.factor.powi(attempt.saturating_sub(1) as i32);
        let scaled = if self.jitter {
            raw * rand::rng().random_range(0.5..=1.0)
        } else {
            raw
        };
        Duration::from_millis(scaled.round() as u64)
    }

    /// Run `op` until it succeeds, fails terminally, or attempts run out.
    /// Returns the value and the number of attempts used.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, LlmError>) -> Result<(T, u32), LlmError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if e.is_retryable() && attempt < max => {
                    log::debug!("attempt {attempt} failed ({e}); retrying");
                    std::thread::sleep(self.delay_after(attempt));
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(LlmError::RetriesExhausted {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flaky(fail: u32) -> impl FnMut(u32) -> Result<&'static str, LlmError> {
        move |attempt| {
            if attempt <= fail {
                Err(LlmError::Status {
                    status: 429,
                    body: "slow down".into(),
                })
            } else {
                Ok("ok")
            }
        }
    }

    #[test]
    fn succeeds_within_limit() {
        let (v, attempts) = RetryPolicy::immediate(3).run(flaky(2)).unwrap();
        assert_eq!((v, attempts), ("ok", 3));
    }

    #[test]
    fn exhausts() {
        let err = RetryPolicy::immediate(3).run(flaky(5)).unwrap_err();
        assert!(matches!(err, LlmError::RetriesExhausted { attempts: 3, .. }));
    }

    #[test]
    fn terminal_error_not_retried() {
        let mut calls = 0;
        let err = RetryPolicy::immediate(3)
            .run(|_| -> Result<(), LlmError> {
                calls += 1;
                Err(LlmError::Status {
                    status: 401,
                    body: "nope".into(),
                })
            })
            .unwrap_err();
        assert_eq!(calls, 1);
        assert!(matches!(err, LlmError::Status { status: 401, .. }));
    }

    #[test]
    fn backoff_grows() {
        let p = RetryPolicy {
            jitter: false,
            ..RetryPolicy::default()
        };
        assert_eq!(p.delay_after(1), Duration::from_secs(1));
        assert_eq!(p.delay_after(2), Duration::from_secs(2));
        let j = RetryPolicy::default().delay_after(2);
        assert!(j >= Duration::from_secs(1) && j <= Duration::from_secs(2));
    }
}
