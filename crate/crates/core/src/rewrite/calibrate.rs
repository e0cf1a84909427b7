use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::ClipBounds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least 2 logit samples, got {0}")]
    TooFewSamples(u64),
    #[error("sample {0} is not finite")]
    NonFinite(u64),
    #[error("samples have zero spread; bounds would be degenerate")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub sample_count: u64,
}

/// Clip bounds `[mu, mu + 4 sigma]` from recorded logits, streaming
/// (Welford) so arbitrarily long logit dumps fit in constant memory.
pub fn calibrate_bounds(
    samples: impl IntoIterator<Item = f64>,
) -> Result<(ClipBounds, CalibrationStats), CalibrationError> {
    let mut n = 0u64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in samples {
        if !x.is_finite() {
            return Err(CalibrationError::NonFinite(n));
        }
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    if n < 2 {
        return Err(CalibrationError::TooFewSamples(n));
    }
    let std = (m2 / n as f64).sqrt();
    let bounds = ClipBounds::new(mean, mean + 4.0 * std).map_err(|_| CalibrationError::Degenerate)?;
    Ok((
        bounds,
        CalibrationStats {
            mean,
            std,
            sample_count: n,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_samples_degenerate() {
        assert_eq!(calibrate_bounds(vec![5.0; 10]), Err(CalibrationError::Degenerate));
    }

    #[test]
    fn too_few() {
        assert_eq!(calibrate_bounds(vec![1.0]), Err(CalibrationError::TooFewSamples(1)));
        assert_eq!(calibrate_bounds(vec![]), Err(CalibrationError::TooFewSamples(0)));
        assert_eq!(calibrate_bounds(vec![1.0, f64::NAN]), Err(CalibrationError::NonFinite(1)));
    }

    #[test]
    fn zero_two_gives_one_five() {
        let (b, s) = calibrate_bounds(vec![0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        assert_eq!((b.b_min(), b.b_max()), (1.0, 5.0));
    }

    #[test]
    fn standard_normal_near_zero_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (b, _) = calibrate_bounds(xs).unwrap();
        assert!(b.b_min().abs() < 0.05, "{}", b.b_min());
        assert!((b.b_max() - 4.0).abs() < 0.05, "{}", b.b_max());
    }
}
