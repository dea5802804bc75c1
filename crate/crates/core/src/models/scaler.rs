//! Per-feature z-scoring fitted on observed (unmasked) training entries.

use serde::{Deserialize, Serialize};

use crate::fusion::SequenceSet;
use crate::s2::TIMESTEPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    /// Population mean and σ per feature; σ = 0 is replaced by 1.
    pub fn fit(set: &SequenceSet) -> Self {
        let nf = set.n_features;
        let mut sum = vec![0.0; nf];
        let mut count = 0usize;
        for i in 0..set.len() {
            let (v, m) = set.sample(i);
            for t in (0..TIMESTEPS).filter(|t| m[*t]) {
                for (s, x) in sum.iter_mut().zip(&v[t * nf..(t + 1) * nf]) {
                    *s += *x as f64;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut ss = vec![0.0; nf];
        for i in 0..set.len() {
            let (v, m) = set.sample(i);
            for t in (0..TIMESTEPS).filter(|t| m[*t]) {
                for f in 0..nf {
                    let d = v[t * nf + f] as f64 - mean[f];
                    ss[f] += d * d;
                }
            }
        }
        let std = ss
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        FeatureScaler { mean, std }
    }

    pub fn identity(nf: usize) -> Self {
        FeatureScaler {
            mean: vec![0.0; nf],
            std: vec![1.0; nf],
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Standardized `[t][f]` block; masked timesteps become zero vectors.
    pub fn transform_into(&self, values: &[f32], mask: &[bool], out: &mut [f64]) {
        let nf = self.n_features();
        for t in 0..mask.len() {
            let dst = &mut out[t * nf..(t + 1) * nf];
            if mask[t] {
                for f in 0..nf {
                    dst[f] = (values[t * nf + f] as f64 - self.mean[f]) / self.std[f];
                }
            } else {
                dst.fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: Vec<f32>, mask: Vec<bool>) -> SequenceSet {
        let n = mask.len() / TIMESTEPS;
        SequenceSet {
            n_features: 2,
            values,
            mask,
            target: vec![1.0; n],
        }
    }

    #[test]
    fn masked_entries_are_ignored() {
        let mut values = vec![100.0f32; 2 * TIMESTEPS * 2];
        let mut mask = vec![false; 2 * TIMESTEPS];
        // observed: sample 0 t=3 (1, 10), sample 1 t=5 (3, 10)
        values[3 * 2] = 1.0;
        values[3 * 2 + 1] = 10.0;
        values[(TIMESTEPS + 5) * 2] = 3.0;
        values[(TIMESTEPS + 5) * 2 + 1] = 10.0;
        mask[3] = true;
        mask[TIMESTEPS + 5] = true;
        let s = FeatureScaler::fit(&set(values.clone(), mask.clone()));
        assert_eq!(s.mean, vec![2.0, 10.0]);
        assert_eq!(s.std, vec![1.0, 1.0]); // second is constant
        let mut out = vec![9.0; TIMESTEPS * 2];
        s.transform_into(&values[..TIMESTEPS * 2], &mask[..TIMESTEPS], &mut out);
        assert_eq!(&out[6..8], &[-1.0, 0.0]);
        assert!(out[..6].iter().all(|v| *v == 0.0));
    }
}
