//! Entropy-based sample selection and weighting.
//!
//! Adaptation only learns from samples whose prediction entropy is below a
//! threshold `e0`, and scales each survivor by `exp(ew - entropy)` so that
//! more confident predictions push harder. Both the mask and the weights are
//! data-dependent coefficients: they are computed from detached probability
//! values and never carry gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LOG_CLAMP;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Entropy threshold; a sample is selected iff `entropy < e0` (strict).
    pub e0: f64,
    /// Weighting pivot; weight is `exp(ew - entropy)`.
    pub ew: f64,
}

impl SelectionConfig {
    /// The usual setting: `e0 = 0.5 ln C`, `ew = 0.4 ln C`.
    pub fn for_classes(num_classes: usize) -> Self {
        let ln_c = (num_classes as f64).ln();
        SelectionConfig { e0: 0.5 * ln_c, ew: 0.4 * ln_c }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e0 > 0.0) || !(self.ew > 0.0) {
            return Err(Error::Config(format!(
                "selection thresholds must be positive: e0={} ew={}",
                self.e0, self.ew
            )));
        }
        Ok(())
    }
}

/// Shannon entropy (natural log) of each row of a `[B, C]` probability
/// matrix, with `p ln p -> 0` as `p -> 0`.
pub fn entropy_rows(p: &[f64], cols: usize) -> Vec<f64> {
    debug_assert!(cols > 0 && p.len() % cols == 0);
    p.chunks_exact(cols)
        .map(|row| -row.iter().map(|&v| v * v.max(LOG_CLAMP).ln()).sum::<f64>())
        .collect()
}

/// `entropy < e0`, strict at the boundary.
pub fn select(entropy: &[f64], e0: f64) -> Vec<bool> {
    entropy.iter().map(|&e| e < e0).collect()
}

/// `exp(ew - entropy)`; positive, monotone decreasing in entropy.
pub fn weights(entropy: &[f64], ew: f64) -> Vec<f64> {
    entropy.iter().map(|&e| (ew - e).exp()).collect()
}

/// Entropy, mask and weights for one batch of detached probabilities.
#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub entropy: Vec<f64>,
    pub mask: Vec<bool>,
    pub weight: Vec<f64>,
}

impl SelectionOutcome {
    pub fn evaluate(p: &[f64], cols: usize, cfg: &SelectionConfig) -> Self {
        let entropy = entropy_rows(p, cols);
        let mask = select(&entropy, cfg.e0);
        let weight = weights(&entropy, cfg.ew);
        SelectionOutcome { entropy, mask, weight }
    }

    pub fn num_selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Per-sample loss coefficient: `weight * mask` (or bare mask).
    pub fn coefficients(&self, weighted: bool) -> Vec<f64> {
        self.mask
            .iter()
            .zip(self.weight.iter())
            .map(|(&m, &w)| if m { if weighted { w } else { 1.0 } } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_reference_points() {
        let uniform10: Vec<f64> = vec![0.1; 10];
        let e = entropy_rows(&uniform10, 10);
        assert!((e[0] - 10f64.ln()).abs() < 1e-12, "uniform entropy {e:?}");

        let onehot = vec![0.0, 1.0, 0.0];
        assert!(entropy_rows(&onehot, 3)[0].abs() < 1e-10, "one-hot entropy");

        let half = vec![0.5, 0.5];
        assert!((entropy_rows(&half, 2)[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounds() {
        // nonnegative, at most ln C
        let p = vec![0.2, 0.3, 0.5, 0.05, 0.9, 0.05];
        for (i, e) in entropy_rows(&p, 3).iter().enumerate() {
            assert!(*e >= 0.0 && *e <= 3f64.ln() + 1e-12, "row {i}: {e}");
        }
    }

    #[test]
    fn selection_threshold_strict() {
        let c = 10usize;
        let ln_c = (c as f64).ln();
        let cfg = SelectionConfig::for_classes(c);
        let ents = vec![0.4 * ln_c, 0.6 * ln_c, cfg.e0];
        let mask = select(&ents, cfg.e0);
        assert_eq!(mask, vec![true, false, false], "boundary must be rejected");
    }

    #[test]
    fn weight_reference_points() {
        let ew = 1.3;
        let w = weights(&[ew, ew + 1.0, ew - 2f64.ln()], ew);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - (-1f64).exp()).abs() < 1e-12);
        assert!((w[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn selection_rate_monotone_in_threshold() {
        let ents: Vec<f64> = (0..50).map(|i| (i as f64) * 0.05).collect();
        let mut prev = 0usize;
        for k in 0..20 {
            let e0 = 0.125 * (k + 1) as f64;
            let n = select(&ents, e0).iter().filter(|&&m| m).count();
            assert!(n >= prev, "selection not monotone at e0={e0}");
            prev = n;
        }
    }

    #[test]
    fn selected_weight_range() {
        // with e0 = 0.5 ln C and ew = 0.4 ln C, any selected sample has
        // weight in (exp(-0.1 ln C), exp(0.4 ln C)]
        let c = 16usize;
        let ln_c = (c as f64).ln();
        let cfg = SelectionConfig::for_classes(c);
        let ents: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0 * ln_c).collect();
        let mask = select(&ents, cfg.e0);
        let w = weights(&ents, cfg.ew);
        for i in 0..ents.len() {
            if mask[i] {
                assert!(w[i] > (-0.1 * ln_c).exp(), "weight too small: {}", w[i]);
                assert!(w[i] <= (0.4 * ln_c).exp() + 1e-12, "weight too large: {}", w[i]);
            }
        }
    }
}
