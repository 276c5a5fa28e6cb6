//! Adaptation objectives.
//!
//! All losses gate per-sample terms by the selection mask and (where noted)
//! scale them by the exponential sample weights; mask and weights enter as
//! constants. The default reduction divides by the full batch size so the
//! gradient scale does not depend on how many samples were selected.
//!
//! * [`entropy_min_loss`] — weighted entropy of the original branch; its
//!   gradient flows through the original branch (the baseline objective).
//! * [`fata_loss`] — weighted cross-entropy of the augmented branch against
//!   the pseudo-label; gradient flows through the augmented branch only.
//! * [`simple_aug_loss`], [`mse_aug_loss`], [`simple_ce_loss`] — ablation
//!   variants replacing the pseudo-label term.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::selection::SelectionOutcome;
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum of gated terms divided by the batch size.
    #[default]
    BatchMean,
    /// Sum of gated terms divided by the number of selected samples.
    SelectedMean,
}

/// Scalar loss components of one step. `total` is always their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_tta: f64,
    pub l_fata: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_tta: f64, l_fata: f64) -> Self {
        LossBundle { l_tta, l_fata, total: l_tta + l_fata }
    }
}

fn reduce_gated(
    tape: &mut Tape,
    per_sample: TensorId,
    coeffs: &[f64],
    num_selected: usize,
    reduction: Reduction,
) -> Result<TensorId> {
    let c = tape.constant(coeffs.to_vec(), &[coeffs.len()])?;
    let gated = tape.mul(per_sample, c)?;
    let sum = tape.sum_all(gated)?;
    let denom = match reduction {
        Reduction::BatchMean => coeffs.len().max(1),
        Reduction::SelectedMean => num_selected.max(1),
    };
    Ok(tape.mul_scalar(sum, 1.0 / denom as f64))
}

/// Per-row Shannon entropy of a `[B, C]` probability tensor, on the tape.
pub fn entropy_on_tape(tape: &mut Tape, p: TensorId) -> Result<TensorId> {
    let lp = tape.log_clamped(p);
    let plp = tape.mul(p, lp)?;
    let s = tape.sum_axes(plp, &[1], false)?;
    Ok(tape.neg(s))
}

/// Baseline objective: mean over the batch of `mask * weight * Ent(p_orig)`.
/// The entropy keeps its gradient; mask and weight are detached.
pub fn entropy_min_loss(
    tape: &mut Tape,
    p_orig: TensorId,
    sel: &SelectionOutcome,
    reduction: Reduction,
) -> Result<TensorId> {
    let ent = entropy_on_tape(tape, p_orig)?;
    reduce_gated(tape, ent, &sel.coefficients(true), sel.num_selected(), reduction)
}

/// Pseudo-label objective: mean of `mask * weight * (-log p_aug[y_hat])`.
pub fn fata_loss(
    tape: &mut Tape,
    p_aug: TensorId,
    y_hat: &[usize],
    sel: &SelectionOutcome,
    reduction: Reduction,
) -> Result<TensorId> {
    let picked = tape.gather_rows(p_aug, y_hat)?;
    let lp = tape.log_clamped(picked);
    let nll = tape.neg(lp);
    reduce_gated(tape, nll, &sel.coefficients(true), sel.num_selected(), reduction)
}

/// `L = l_tta + l_fata`.
pub fn total_loss(tape: &mut Tape, l_tta: TensorId, l_fata: TensorId) -> Result<TensorId> {
    tape.add(l_tta, l_fata)
}

/// Ablation: weighted entropy of the augmented branch instead of the
/// pseudo-label cross-entropy.
pub fn simple_aug_loss(
    tape: &mut Tape,
    p_aug: TensorId,
    sel: &SelectionOutcome,
    reduction: Reduction,
) -> Result<TensorId> {
    let ent = entropy_on_tape(tape, p_aug)?;
    reduce_gated(tape, ent, &sel.coefficients(true), sel.num_selected(), reduction)
}

/// Ablation: mean squared difference between the two probability rows over
/// selected samples (unweighted). By default the original branch is
/// detached, mirroring the pseudo-label convention; `both_grad` lets the
/// gradient flow into both branches.
pub fn mse_aug_loss(
    tape: &mut Tape,
    p_aug: TensorId,
    p_orig: TensorId,
    sel: &SelectionOutcome,
    reduction: Reduction,
    both_grad: bool,
) -> Result<TensorId> {
    let target = if both_grad { p_orig } else { tape.stop_gradient(p_orig) };
    let diff = tape.sub(p_aug, target)?;
    let sq = tape.mul(diff, diff)?;
    let per = tape.mean_axes(sq, &[1], false)?;
    reduce_gated(tape, per, &sel.coefficients(false), sel.num_selected(), reduction)
}

/// Ablation: weighted soft-target cross-entropy
/// `-sum_c p_orig[c] log p_aug[c]` with the original branch detached.
pub fn simple_ce_loss(
    tape: &mut Tape,
    p_aug: TensorId,
    p_orig: TensorId,
    sel: &SelectionOutcome,
    reduction: Reduction,
) -> Result<TensorId> {
    let target = tape.stop_gradient(p_orig);
    let lp = tape.log_clamped(p_aug);
    let prod = tape.mul(target, lp)?;
    let s = tape.sum_axes(prod, &[1], false)?;
    let per = tape.neg(s);
    reduce_gated(tape, per, &sel.coefficients(true), sel.num_selected(), reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{entropy_rows, SelectionConfig};

    const TOL: f64 = 1e-9;

    fn outcome(p: &[f64], cols: usize, cfg: &SelectionConfig) -> SelectionOutcome {
        SelectionOutcome::evaluate(p, cols, cfg)
    }

    /// Two-point distribution `[a, 1-a]` with entropy `target` (a > 0.5).
    fn two_point_with_entropy(target: f64) -> Vec<f64> {
        let (mut lo, mut hi) = (0.5, 1.0 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let e = entropy_rows(&[mid, 1.0 - mid], 2)[0];
            if e > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        vec![lo, 1.0 - lo]
    }

    #[test]
    fn tape_entropy_matches_direct_summation() {
        let p = vec![0.2, 0.3, 0.5, 0.05, 0.9, 0.05, 1.0, 0.0, 0.0];
        let mut t = Tape::new();
        let pid = t.constant(p.clone(), &[3, 3]).unwrap();
        let e = entropy_on_tape(&mut t, pid).unwrap();
        let direct = entropy_rows(&p, 3);
        for (a, b) in t.data(e).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn entropy_min_loss_trivial_cases() {
        let cfg = SelectionConfig::for_classes(2);
        // all one-hot: entropy ~ 0 -> loss ~ 0
        let p = vec![1.0, 0.0, 0.0, 1.0];
        let sel = outcome(&p, 2, &cfg);
        let mut t = Tape::new();
        let pid = t.constant(p, &[2, 2]).unwrap();
        let l = entropy_min_loss(&mut t, pid, &sel, Reduction::BatchMean).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-8);

        // all above threshold: nothing selected -> loss 0
        let p = vec![0.5, 0.5, 0.55, 0.45];
        let sel = outcome(&p, 2, &cfg);
        assert_eq!(sel.num_selected(), 0);
        let mut t = Tape::new();
        let pid = t.constant(p, &[2, 2]).unwrap();
        let l = entropy_min_loss(&mut t, pid, &sel, Reduction::BatchMean).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn entropy_min_loss_hand_batch_of_two() {
        // Ent = [0.3 ln C, 0.9 ln C] with C = 2: only the first is selected,
        // loss = w1 * 0.3 ln C / 2 with w1 = exp(0.4 ln C - 0.3 ln C)
        let ln_c = 2f64.ln();
        let cfg = SelectionConfig::for_classes(2);
        let mut p = two_point_with_entropy(0.3 * ln_c);
        p.extend(two_point_with_entropy(0.9 * ln_c));
        let sel = outcome(&p, 2, &cfg);
        assert_eq!(sel.mask, vec![true, false]);

        let mut t = Tape::new();
        let pid = t.constant(p.clone(), &[2, 2]).unwrap();
        let l = entropy_min_loss(&mut t, pid, &sel, Reduction::BatchMean).unwrap();

        let e1 = entropy_rows(&p, 2)[0];
        let w1 = (cfg.ew - e1).exp();
        let want = w1 * e1 / 2.0;
        assert!((t.scalar_value(l) - want).abs() < TOL, "{} vs {want}", t.scalar_value(l));
        assert!((e1 - 0.3 * ln_c).abs() < 1e-9, "bisection entropy target");
    }

    #[test]
    fn fata_loss_trivial_cases() {
        let cfg = SelectionConfig::for_classes(2);
        // p_aug puts probability 1 on the pseudo-label -> loss 0
        let p_orig = vec![0.9, 0.1];
        let sel = outcome(&p_orig, 2, &cfg);
        assert_eq!(sel.num_selected(), 1);
        let mut t = Tape::new();
        let p_aug = t.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
        let l = fata_loss(&mut t, p_aug, &[0], &sel, Reduction::BatchMean).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-8);

        // nothing selected -> 0
        let p_orig = vec![0.5, 0.5];
        let sel = outcome(&p_orig, 2, &cfg);
        let mut t = Tape::new();
        let p_aug = t.constant(vec![0.1, 0.9], &[1, 2]).unwrap();
        let l = fata_loss(&mut t, p_aug, &[1], &sel, Reduction::BatchMean).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn fata_loss_quarter_probability_is_ln4() {
        // single selected sample with Ent = E_w (weight exactly 1) and
        // p_aug[y_hat] = 0.25 -> loss = ln 4
        let cfg = SelectionConfig::for_classes(2);
        let p_orig = two_point_with_entropy(cfg.ew);
        let sel = outcome(&p_orig, 2, &cfg);
        assert!(sel.mask[0], "E_w < E_0 so the sample is selected");
        assert!((sel.weight[0] - 1.0).abs() < 1e-9);

        let mut t = Tape::new();
        let p_aug = t.constant(vec![0.25, 0.75], &[1, 2]).unwrap();
        let l = fata_loss(&mut t, p_aug, &[0], &sel, Reduction::BatchMean).unwrap();
        assert!((t.scalar_value(l) - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_sum() {
        let mut t = Tape::new();
        for (a, b, want) in [(0.0, 2.5, 2.5), (1.25, 0.0, 1.25), (1.5, 2.5, 4.0)] {
            let ta = t.scalar(a);
            let tb = t.scalar(b);
            let s = total_loss(&mut t, ta, tb).unwrap();
            assert_eq!(t.scalar_value(s), want);
            let bundle = LossBundle::new(a, b);
            assert!((bundle.total - (a + b)).abs() < 1e-6);
        }
    }

    #[test]
    fn simple_aug_trivial_cases() {
        let cfg = SelectionConfig::for_classes(4);
        // one-hot p_aug -> 0
        let p_orig = vec![0.97, 0.01, 0.01, 0.01];
        let sel = outcome(&p_orig, 4, &cfg);
        let mut t = Tape::new();
        let p_aug = t.constant(vec![1.0, 0.0, 0.0, 0.0], &[1, 4]).unwrap();
        let l = simple_aug_loss(&mut t, p_aug, &sel, Reduction::BatchMean).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-8);

        // uniform p_aug, selected sample with weight forced to 1 -> ln C
        let mut sel = outcome(&p_orig, 4, &cfg);
        sel.weight[0] = 1.0;
        let mut t = Tape::new();
        let p_aug = t.constant(vec![0.25; 4], &[1, 4]).unwrap();
        let l = simple_aug_loss(&mut t, p_aug, &sel, Reduction::BatchMean).unwrap();
        assert!((t.scalar_value(l) - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn simple_aug_hand_batch_of_two() {
        let cfg = SelectionConfig::for_classes(2);
        let row1 = two_point_with_entropy(0.2 * 2f64.ln());
        let row2 = two_point_with_entropy(0.8 * 2f64.ln()); // rejected
        let p_orig = [row1.clone(), row2.clone()].concat();
        let sel = outcome(&p_orig, 2, &cfg);
        assert_eq!(sel.mask, vec![true, false]);

        let p_aug_vals = vec![0.7, 0.3, 0.4, 0.6];
        let mut t = Tape::new();
        let p_aug = t.constant(p_aug_vals.clone(), &[2, 2]).unwrap();
        let l = simple_aug_loss(&mut t, p_aug, &sel, Reduction::BatchMean).unwrap();
        let want = sel.weight[0] * entropy_rows(&p_aug_vals[..2], 2)[0] / 2.0;
        assert!((t.scalar_value(l) - want).abs() < TOL);
    }

    #[test]
    fn mse_trivial_and_oracle() {
        let cfg = SelectionConfig::for_classes(2);
        let p_orig = vec![1.0, 0.0];
        let sel = outcome(&p_orig, 2, &cfg);

        // identical rows -> 0
        let mut t = Tape::new();
        let po = t.constant(p_orig.clone(), &[1, 2]).unwrap();
        let pa = t.constant(p_orig.clone(), &[1, 2]).unwrap();
        let l = mse_aug_loss(&mut t, pa, po, &sel, Reduction::BatchMean, false).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);

        // orthogonal one-hots in C=2 -> mean of [1, 1] = 1.0
        let mut t = Tape::new();
        let po = t.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
        let pa = t.constant(vec![0.0, 1.0], &[1, 2]).unwrap();
        let l = mse_aug_loss(&mut t, pa, po, &sel, Reduction::BatchMean, false).unwrap();
        assert!((t.scalar_value(l) - 1.0).abs() < 1e-12);

        // random pair against direct recomputation
        let p1 = vec![0.6, 0.3, 0.1];
        let p2 = vec![0.2, 0.5, 0.3];
        let cfg3 = SelectionConfig::for_classes(3);
        let sel3 = outcome(&p1, 3, &cfg3);
        let mut t = Tape::new();
        let po = t.constant(p1.clone(), &[1, 3]).unwrap();
        let pa = t.constant(p2.clone(), &[1, 3]).unwrap();
        let l = mse_aug_loss(&mut t, pa, po, &sel3, Reduction::BatchMean, false).unwrap();
        let mask0 = if sel3.mask[0] { 1.0 } else { 0.0 };
        let direct: f64 = p1
            .iter()
            .zip(p2.iter())
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            / 3.0
            * mask0;
        assert!((t.scalar_value(l) - direct).abs() < TOL);
    }

    #[test]
    fn simple_ce_trivial_and_oracle() {
        let cfg = SelectionConfig::for_classes(3);
        // one-hot target at k reduces to -log p_aug[k]
        let p_orig = vec![0.0, 1.0, 0.0];
        let mut sel = outcome(&p_orig, 3, &cfg);
        sel.weight[0] = 1.0;
        let p_aug_vals = vec![0.2, 0.5, 0.3];
        let mut t = Tape::new();
        let po = t.constant(p_orig, &[1, 3]).unwrap();
        let pa = t.constant(p_aug_vals.clone(), &[1, 3]).unwrap();
        let l = simple_ce_loss(&mut t, pa, po, &sel, Reduction::BatchMean).unwrap();
        assert!((t.scalar_value(l) + 0.5f64.ln()).abs() < 1e-9);

        // p_aug == p_orig -> CE equals the entropy of p_orig
        let p = vec![0.7, 0.2, 0.1];
        let mut sel = outcome(&p, 3, &cfg);
        sel.weight[0] = 1.0;
        sel.mask[0] = true;
        let mut t = Tape::new();
        let po = t.constant(p.clone(), &[1, 3]).unwrap();
        let pa = t.constant(p.clone(), &[1, 3]).unwrap();
        let l = simple_ce_loss(&mut t, pa, po, &sel, Reduction::BatchMean).unwrap();
        assert!((t.scalar_value(l) - entropy_rows(&p, 3)[0]).abs() < 1e-9);

        // random pair against direct summation
        let p1 = vec![0.5, 0.25, 0.25];
        let p2 = vec![0.1, 0.6, 0.3];
        let sel = outcome(&p1, 3, &cfg);
        let mut t = Tape::new();
        let po = t.constant(p1.clone(), &[1, 3]).unwrap();
        let pa = t.constant(p2.clone(), &[1, 3]).unwrap();
        let l = simple_ce_loss(&mut t, pa, po, &sel, Reduction::BatchMean).unwrap();
        let coeff = sel.coefficients(true)[0];
        let direct: f64 = -p1.iter().zip(p2.iter()).map(|(a, b)| a * b.ln()).sum::<f64>() * coeff;
        assert!((t.scalar_value(l) - direct).abs() < TOL);
    }

    #[test]
    fn losses_nonnegative_and_zero_on_empty_selection() {
        let cfg = SelectionConfig::for_classes(2);
        let p_orig = vec![0.5, 0.5, 0.52, 0.48]; // all high entropy, none selected
        let sel = outcome(&p_orig, 2, &cfg);
        assert_eq!(sel.num_selected(), 0);
        let mut t = Tape::new();
        let po = t.constant(p_orig.clone(), &[2, 2]).unwrap();
        let pa = t.constant(vec![0.3, 0.7, 0.8, 0.2], &[2, 2]).unwrap();
        for l in [
            entropy_min_loss(&mut t, po, &sel, Reduction::BatchMean).unwrap(),
            fata_loss(&mut t, pa, &[1, 0], &sel, Reduction::BatchMean).unwrap(),
            simple_aug_loss(&mut t, pa, &sel, Reduction::BatchMean).unwrap(),
            mse_aug_loss(&mut t, pa, po, &sel, Reduction::BatchMean, false).unwrap(),
            simple_ce_loss(&mut t, pa, po, &sel, Reduction::BatchMean).unwrap(),
        ] {
            assert_eq!(t.scalar_value(l), 0.0);
        }
    }

    #[test]
    fn selected_mean_reduction_divides_by_count() {
        let cfg = SelectionConfig::for_classes(2);
        let p_orig = vec![0.95, 0.05, 0.9, 0.1, 0.5, 0.5];
        let sel = outcome(&p_orig, 2, &cfg);
        assert_eq!(sel.num_selected(), 2);
        let mut t = Tape::new();
        let pa = t.constant(vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5], &[3, 2]).unwrap();
        let lb = fata_loss(&mut t, pa, &[0, 0, 0], &sel, Reduction::BatchMean).unwrap();
        let ls = fata_loss(&mut t, pa, &[0, 0, 0], &sel, Reduction::SelectedMean).unwrap();
        let ratio = t.scalar_value(ls) / t.scalar_value(lb);
        assert!((ratio - 3.0 / 2.0).abs() < 1e-9, "B/selected = 3/2, got {ratio}");
    }

    #[test]
    fn fata_loss_gradient_only_through_p_aug() {
        // build p_aug from a live leaf; p_orig influence enters only via
        // detached mask/weights/pseudo-label
        let cfg = SelectionConfig::for_classes(2);
        let p_orig = vec![0.9, 0.1];
        let sel = outcome(&p_orig, 2, &cfg);

        let mut t = Tape::new();
        let logits = t.leaf(vec![0.3, -0.2], &[1, 2], true).unwrap();
        let pa = t.softmax_last(logits).unwrap();
        let l = fata_loss(&mut t, pa, &[0], &sel, Reduction::BatchMean).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(logits).unwrap().to_vec();
        assert!(g.iter().any(|v| v.abs() > 1e-6), "gradient must reach p_aug");

        // same loss with pseudo-label replaced by an equal constant: grads equal
        let mut t2 = Tape::new();
        let logits2 = t2.leaf(vec![0.3, -0.2], &[1, 2], true).unwrap();
        let pa2 = t2.softmax_last(logits2).unwrap();
        let l2 = fata_loss(&mut t2, pa2, &[0], &sel, Reduction::BatchMean).unwrap();
        t2.backward(l2).unwrap();
        for (a, b) in g.iter().zip(t2.grad(logits2).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
