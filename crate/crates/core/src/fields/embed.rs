use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Fourier features `[sin(2π f_i t)…, cos(2π f_i t)…]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    frequencies: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(frequencies: Vec<f64>) -> Self {
        Self { frequencies }
    }

    /// Dyadic frequencies `f_i = 2^(i-1) / period`, `i = 1..=k`.
    pub fn dyadic(k: usize, period: f64) -> Self {
        Self::new((0..k).map(|i| 2f64.powi(i as i32) / period).collect())
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let sines = self.frequencies.iter().map(|f| (TAU * f * t).sin());
        let cosines = self.frequencies.iter().map(|f| (TAU * f * t).cos());
        sines.chain(cosines).collect()
    }

    /// `[2K, batch]` matrix with one embedded time per column.
    pub fn embed_batch(&self, ts: &[f64]) -> Tensor {
        let rows = self.dim();
        let mut data = vec![0.0; rows * ts.len()];
        for (j, &t) in ts.iter().enumerate() {
            for (i, v) in self.embed(t).into_iter().enumerate() {
                data[i * ts.len() + j] = v;
            }
        }
        Tensor::matrix(rows, ts.len(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_time() {
        let e = TimeEmbedding::dyadic(3, 1.0);
        assert_eq!(e.embed(0.0), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_time_single_frequency() {
        let e = TimeEmbedding::new(vec![1.0]);
        let v = e.embed(0.5);
        assert!(v[0].abs() < 1e-15);
        assert_eq!(v[1], -1.0);
    }

    #[test]
    fn batch_matches_pointwise() {
        let e = TimeEmbedding::dyadic(4, 1.0);
        let ts = [0.1, 0.7, 0.33];
        let m = e.embed_batch(&ts);
        for (j, &t) in ts.iter().enumerate() {
            assert_eq!(m.column(j), e.embed(t));
        }
    }

    proptest! {
        #[test]
        fn squared_norm_equals_k(t in 0.0f64..1.0) {
            let e = TimeEmbedding::dyadic(4, 1.0);
            let v = e.embed(t);
            prop_assert_eq!(v.len(), 8);
            let n2: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!((n2 - 4.0).abs() < 1e-12);
        }
    }
}
