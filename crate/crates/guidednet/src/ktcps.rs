//! Knowledge-transfer cross pseudo supervision: per-class difficulty
//! weights from labeled-batch prediction/ground-truth agreement, EMA
//! smoothing, and the weighted cross-supervision loss.
//!
//! Two weight readings are provided. `Literal` follows
//! w_k = max{log R} / log R_k, which assigns weight 1 to the
//! best-matched class. `Hardness` inverts the emphasis
//! (w_k = -log R_k normalized, floored) so poorly-matched classes get
//! the large weights; the ratio clamp makes both formulas total.

use crate::error::{Error, Result};
use crate::tensor::loss::dice_ce_pooled_weighted;
use crate::tensor::{argmax_axis1, Tape, Var};

pub const RATIO_EPS: f64 = 1e-6;
pub const RATIO_DELTA: f64 = 1e-3;
pub const HARDNESS_FLOOR: f64 = 0.1;
pub const EMA_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Literal,
    Hardness,
}

impl WeightMode {
    pub fn parse(s: &str) -> Option<WeightMode> {
        match s {
            "literal" => Some(WeightMode::Literal),
            "hardness" => Some(WeightMode::Hardness),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightMode::Literal => "literal",
            WeightMode::Hardness => "hardness",
        }
    }
}

/// Difficulty-weight bookkeeping for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub matched: Vec<u64>,
    pub ratios: Vec<f64>,
    pub raw: Vec<f64>,
    pub omega: Vec<f64>,
}

impl ModelWeights {
    fn new(k: usize) -> Self {
        ModelWeights {
            matched: vec![0; k],
            ratios: vec![RATIO_EPS; k],
            raw: vec![1.0; k],
            omega: vec![1.0; k],
        }
    }
}

/// Both models' weight state plus the shared hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeightState {
    pub num_classes: usize,
    pub momentum: f64,
    pub mode: WeightMode,
    pub model_a: ModelWeights,
    pub model_b: ModelWeights,
}

impl ClassWeightState {
    pub fn new(num_classes: usize, mode: WeightMode) -> Self {
        ClassWeightState {
            num_classes,
            momentum: EMA_MOMENTUM,
            mode,
            model_a: ModelWeights::new(num_classes),
            model_b: ModelWeights::new(num_classes),
        }
    }
}

/// Per-voxel argmax over the class axis, lowest index on ties; carries
/// no gradient.
pub fn pseudo_labels(tape: &Tape, probs: Var) -> Vec<usize> {
    argmax_axis1(tape.shape(probs), tape.values(probs))
}

/// Matched counts and clamped ratios: N_k counts voxels where the
/// prediction and ground truth agree on class k, R_k = N_k / max N
/// clamped into [eps, 1 - delta]. Returns (counts, ratios, all_zero).
pub fn matched_ratios(
    pred_labels: &[usize],
    gt_labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<u64>, Vec<f64>, bool)> {
    if pred_labels.len() != gt_labels.len() {
        return Err(Error::BadArgument {
            op: "matched_ratios",
            msg: format!(
                "{} predictions vs {} labels",
                pred_labels.len(),
                gt_labels.len()
            ),
        });
    }
    let mut counts = vec![0u64; num_classes];
    for (&p, &g) in pred_labels.iter().zip(gt_labels) {
        if g >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: g,
                num_classes,
            });
        }
        if p == g {
            counts[g] += 1;
        }
    }
    let max = *counts.iter().max().expect("num_classes > 0");
    if max == 0 {
        return Ok((counts, vec![RATIO_EPS; num_classes], true));
    }
    let ratios = counts
        .iter()
        .map(|&n| (n as f64 / max as f64).clamp(RATIO_EPS, 1.0 - RATIO_DELTA))
        .collect();
    Ok((counts, ratios, false))
}

/// Raw per-class weights from clamped ratios.
pub fn class_weights(ratios: &[f64], mode: WeightMode) -> Vec<f64> {
    match mode {
        WeightMode::Literal => {
            let max_log = ratios
                .iter()
                .map(|r| r.ln())
                .fold(f64::NEG_INFINITY, f64::max);
            ratios.iter().map(|r| max_log / r.ln()).collect()
        }
        WeightMode::Hardness => {
            let max_h = ratios
                .iter()
                .map(|r| -r.ln())
                .fold(f64::NEG_INFINITY, f64::max);
            ratios
                .iter()
                .map(|r| (-r.ln() / max_h).max(HARDNESS_FLOOR))
                .collect()
        }
    }
}

/// omega <- m * omega + (1 - m) * w_raw, elementwise.
pub fn ema_update(omega: &mut [f64], raw: &[f64], momentum: f64) {
    debug_assert_eq!(omega.len(), raw.len());
    for (o, &w) in omega.iter_mut().zip(raw) {
        *o = momentum * *o + (1.0 - momentum) * w;
    }
}

/// Outcome of one weight refresh for a model.
pub struct WeightUpdate {
    pub all_counts_zero: bool,
}

/// Refresh one model's counts, ratios, raw weights and EMA from this
/// step's labeled predictions.
pub fn refresh_model_weights(
    weights: &mut ModelWeights,
    mode: WeightMode,
    momentum: f64,
    pred_labels: &[usize],
    gt_labels: &[usize],
    num_classes: usize,
) -> Result<WeightUpdate> {
    let (counts, ratios, all_zero) = matched_ratios(pred_labels, gt_labels, num_classes)?;
    weights.matched = counts;
    weights.raw = class_weights(&ratios, mode);
    weights.ratios = ratios;
    let m = momentum;
    ema_update(&mut weights.omega, &weights.raw, m);
    Ok(WeightUpdate {
        all_counts_zero: all_zero,
    })
}

/// Weighted cross pseudo supervision over the combined batch:
/// omega_b weights L_s(p_A, pseudo(B)) and omega_a weights
/// L_s(p_B, pseudo(A)); targets are detached argmax labels.
pub fn loss_ktcps(
    tape: &mut Tape,
    probs_a: Var,
    probs_b: Var,
    omega_a: &[f64],
    omega_b: &[f64],
) -> Result<Var> {
    let hat_a = pseudo_labels(tape, probs_a);
    let hat_b = pseudo_labels(tape, probs_b);
    let term_a = dice_ce_pooled_weighted(tape, probs_a, &hat_b, omega_b)?;
    let term_b = dice_ce_pooled_weighted(tape, probs_b, &hat_a, omega_a)?;
    tape.add(term_a, term_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::loss::{cross_entropy_mean, soft_dice_loss};
    use crate::tensor::Tape;

    #[test]
    fn pseudo_label_cases() {
        let mut t = Tape::new();
        let p = t.constant(vec![1, 3], vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(pseudo_labels(&t, p), vec![1]);
        let tie = t.constant(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(pseudo_labels(&t, tie), vec![0]);
    }

    #[test]
    fn pseudo_label_scale_invariance() {
        let mut t = Tape::new();
        let vals = vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05];
        let p = t.constant(vec![2, 3], vals.clone()).unwrap();
        let scaled: Vec<f64> = vals.iter().map(|v| v * 7.3).collect();
        let q = t.constant(vec![2, 3], scaled).unwrap();
        assert_eq!(pseudo_labels(&t, p), pseudo_labels(&t, q));
    }

    #[test]
    fn matched_ratio_examples() {
        // N = [100, 100] -> both clamp to 1 - delta
        let pred: Vec<usize> = std::iter::repeat(0).take(100).chain(std::iter::repeat(1).take(100)).collect();
        let (_, r, flag) = matched_ratios(&pred, &pred, 2).unwrap();
        assert_eq!(r, vec![1.0 - RATIO_DELTA, 1.0 - RATIO_DELTA]);
        assert!(!flag);

        // N = [100, 50] -> [1 - delta, 0.5]
        let gt: Vec<usize> = std::iter::repeat(0).take(100).chain(std::iter::repeat(1).take(100)).collect();
        let mut pred = gt.clone();
        for p in pred.iter_mut().skip(100).take(50) {
            *p = 0; // mismatch half of class 1
        }
        let (n, r, _) = matched_ratios(&pred, &gt, 2).unwrap();
        assert_eq!(n, vec![100, 50]);
        assert_eq!(r, vec![1.0 - RATIO_DELTA, 0.5]);

        // N = [0, 10] -> [eps, 1 - delta]
        let gt: Vec<usize> = std::iter::repeat(0).take(5).chain(std::iter::repeat(1).take(10)).collect();
        let pred: Vec<usize> = std::iter::repeat(1).take(15).collect();
        let (_, r, flag) = matched_ratios(&pred, &gt, 2).unwrap();
        assert_eq!(r, vec![RATIO_EPS, 1.0 - RATIO_DELTA]);
        assert!(!flag);

        // nothing matched anywhere -> all eps, flagged
        let (_, r, flag) = matched_ratios(&[1, 0], &[0, 1], 2).unwrap();
        assert_eq!(r, vec![RATIO_EPS, RATIO_EPS]);
        assert!(flag);
    }

    #[test]
    fn literal_weights_hand_values() {
        let r = [1.0 - RATIO_DELTA, 0.5];
        let w = class_weights(&r, WeightMode::Literal);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.001_443_416_869_668_717_4).abs() < 1e-12);
        // all equal -> all ones
        let w = class_weights(&[0.4, 0.4, 0.4], WeightMode::Literal);
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn hardness_weights_hand_values() {
        let r = [1.0 - RATIO_DELTA, 0.5];
        let w = class_weights(&r, WeightMode::Hardness);
        assert_eq!(w[1], 1.0);
        assert_eq!(w[0], HARDNESS_FLOOR);
    }

    #[test]
    fn ema_fixed_point_and_step() {
        let mut omega = vec![1.0];
        ema_update(&mut omega, &[0.5], 0.99);
        assert!((omega[0] - 0.995).abs() < 1e-15);
        let mut omega = vec![0.7];
        ema_update(&mut omega, &[0.7], 0.99);
        assert_eq!(omega, vec![0.7]);
    }

    #[test]
    fn ema_geometric_decay() {
        let c = 0.25;
        let mut omega = vec![1.0];
        for _ in 0..1000 {
            ema_update(&mut omega, &[c], 0.99);
        }
        let bound = (1.0f64 - c).abs() * 0.99f64.powi(1000);
        assert!((omega[0] - c).abs() <= bound * (1.0 + 1e-9));
    }

    #[test]
    fn unit_weights_reduce_to_plain_cps_bitwise() {
        let mut t = Tape::new();
        let va = vec![0.6, 0.4, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1];
        let vb = vec![0.3, 0.7, 0.6, 0.4, 0.2, 0.8, 0.55, 0.45];
        let pa = t.leaf(vec![4, 2], va.clone(), true).unwrap();
        let pb = t.leaf(vec![4, 2], vb.clone(), true).unwrap();
        let weighted = loss_ktcps(&mut t, pa, pb, &[1.0, 1.0], &[1.0, 1.0]).unwrap();

        // plain CPS assembled from the unweighted primitives
        let pa2 = t.leaf(vec![4, 2], va, true).unwrap();
        let pb2 = t.leaf(vec![4, 2], vb, true).unwrap();
        let hat_a = pseudo_labels(&t, pa2);
        let hat_b = pseudo_labels(&t, pb2);
        let mut ls = |probs, targets: &[usize]| {
            let d = soft_dice_loss(&mut t, probs, targets, None).unwrap();
            let c = cross_entropy_mean(&mut t, probs, targets, None).unwrap();
            let s = t.add(d, c).unwrap();
            t.mul_scalar(s, 0.5).unwrap()
        };
        let t1 = ls(pa2, &hat_b);
        let t2 = ls(pb2, &hat_a);
        let plain = t.add(t1, t2).unwrap();
        assert_eq!(
            t.scalar_value(weighted).to_bits(),
            t.scalar_value(plain).to_bits()
        );
    }

    #[test]
    fn agreement_gives_small_loss() {
        let mut t = Tape::new();
        let hot = 1.0 - 1e-9;
        let mk = |t: &mut Tape| {
            let mut vals = vec![1.0 - hot; 8];
            for (r, &y) in [0usize, 1, 1, 0].iter().enumerate() {
                vals[r * 2 + y] = hot;
            }
            t.leaf(vec![4, 2], vals, true).unwrap()
        };
        let pa = mk(&mut t);
        let pb = mk(&mut t);
        let l = loss_ktcps(&mut t, pa, pb, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(t.scalar_value(l) <= 1e-4, "{}", t.scalar_value(l));
    }
}
