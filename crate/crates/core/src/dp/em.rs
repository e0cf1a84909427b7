use rand::Rng;

use super::{check_temperature, ClipBounds, DpError, LogitVector};

/// Saturate every logit into `bounds`. Idempotent.
pub fn clip_logits(u: &LogitVector, bounds: &ClipBounds) -> LogitVector {
    LogitVector(u.values().iter().map(|&x| bounds.clamp(x)).collect())
}

/// Temperature softmax, computed with max-subtraction.
pub fn softmax(values: &[f64], temperature: f64) -> Result<Vec<f64>, DpError> {
    check_temperature(temperature)?;
    let weights = unnormalized(values, temperature)?;
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

fn unnormalized(values: &[f64], temperature: f64) -> Result<Vec<f64>, DpError> {
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(DpError::NonFiniteLogit(i));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(values
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect())
}

/// Precomputed exponential-mechanism sampler for one logit vector.
///
/// Index `v` is drawn with probability `exp(u_v / T) / sum_w exp(u_w / T)`.
#[derive(Debug, Clone)]
pub struct EmSampler {
    cumulative: Vec<f64>,
}

impl EmSampler {
    pub fn new(u: &LogitVector, temperature: f64) -> Result<Self, DpError> {
        check_temperature(temperature)?;
        let weights = unnormalized(u.values(), temperature)?;
        let mut acc = 0.0;
        let cumulative = weights
            .into_iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total();
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = (c - prev) / total;
                prev = c;
                p
            })
            .collect()
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().expect("vocab size >= 2")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let target = rng.random::<f64>() * self.total();
        self.cumulative
            .iter()
            .position(|&c| target < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

/// One exponential-mechanism draw over already clipped logits.
pub fn em_sample<R: Rng + ?Sized>(
    u_clipped: &LogitVector,
    temperature: f64,
    rng: &mut R,
) -> Result<usize, DpError> {
    Ok(EmSampler::new(u_clipped, temperature)?.sample(rng))
}
