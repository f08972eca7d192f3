//! Streaming mean/variance accumulation.

use serde::{Deserialize, Serialize};

/// Welford accumulator with Chan's pairwise merge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        let weight = other.count as f64 / total as f64;
        self.mean += delta * weight;
        self.m2 += other.m2 + delta * delta * self.count as f64 * weight;
        self.count = total;
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::new();
        for v in iter {
            m.push(v);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn streaming_matches_batch() {
        let values: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 * 0.37 - 5.0).collect();
        let m: Moments = values.iter().copied().collect();
        let (mean, var) = batch(&values);
        assert!((m.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((m.variance() - var).abs() <= 1e-10 * var);
    }

    #[test]
    fn merge_matches_single_pass() {
        let values: Vec<f64> = (0..50).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
        let whole: Moments = values.iter().copied().collect();
        let mut left: Moments = values[..13].iter().copied().collect();
        let right: Moments = values[13..].iter().copied().collect();
        left.merge(&right);
        assert_eq!(left.count, whole.count);
        assert!((left.mean - whole.mean).abs() < 1e-12);
        assert!((left.variance() - whole.variance()).abs() < 1e-10 * whole.variance());

        let mut empty = Moments::new();
        empty.merge(&whole);
        assert_eq!(empty, whole);
    }

    #[test]
    fn degenerate_counts() {
        let m = Moments::new();
        assert_eq!(m.variance(), 0.0);
        assert_eq!(m.std_error(), 0.0);
        let one: Moments = [4.0].into_iter().collect();
        assert_eq!(one.mean, 4.0);
        assert_eq!(one.variance(), 0.0);
    }
}
