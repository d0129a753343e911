//! Loss kernels over voxel matrices.
//!
//! Probability inputs are [V, K] matrices (see `to_voxel_matrix`);
//! integer targets are plain slices, turned into constant one-hot
//! factors so only the predictions carry gradient.

use crate::error::{Error, Result};

use super::{Tape, Var, DICE_EPS};

fn check_targets(num_classes: usize, targets: &[usize]) -> Result<()> {
    for &y in targets {
        if y >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes,
            });
        }
    }
    Ok(())
}

fn matrix_dims(t: &Tape, op: &'static str, probs: Var) -> Result<(usize, usize)> {
    let shape = t.shape(probs);
    if shape.len() != 2 {
        return Err(Error::BadRank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1]))
}

/// Mean cross-entropy against integer targets, optionally scaled per
/// voxel: -(1/V) sum_v w_v * ln p[v, y_v].
pub fn cross_entropy_mean(
    t: &mut Tape,
    probs: Var,
    targets: &[usize],
    voxel_weights: Option<&[f64]>,
) -> Result<Var> {
    let (v, k) = matrix_dims(t, "cross_entropy_mean", probs)?;
    if targets.len() != v {
        return Err(Error::BadArgument {
            op: "cross_entropy_mean",
            msg: format!("{} targets for {v} voxels", targets.len()),
        });
    }
    check_targets(k, targets)?;
    if let Some(w) = voxel_weights {
        if w.len() != v {
            return Err(Error::BadArgument {
                op: "cross_entropy_mean",
                msg: format!("{} weights for {v} voxels", w.len()),
            });
        }
    }
    let mut mask = vec![0.0; v * k];
    for (r, &y) in targets.iter().enumerate() {
        mask[r * k + y] = voxel_weights.map_or(1.0, |w| w[r]);
    }
    let mask = t.constant(vec![v, k], mask)?;
    let lnp = t.log(probs)?;
    let picked = t.mul(lnp, mask)?;
    let total = t.reduce_sum(picked)?;
    t.mul_scalar(total, -1.0 / v as f64)
}

/// Pooled soft Dice loss over foreground classes with the usual
/// smoothing constant: mean_k w_k * (1 - (2*I_k + eps)/(P_k + T_k + eps)).
pub fn soft_dice_loss(
    t: &mut Tape,
    probs: Var,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let (v, k) = matrix_dims(t, "soft_dice_loss", probs)?;
    if targets.len() != v {
        return Err(Error::BadArgument {
            op: "soft_dice_loss",
            msg: format!("{} targets for {v} voxels", targets.len()),
        });
    }
    check_targets(k, targets)?;
    if k < 2 {
        return Err(Error::BadShape {
            op: "soft_dice_loss",
            msg: "needs at least one foreground class".into(),
            shape: t.shape(probs).to_vec(),
        });
    }
    let mut onehot = vec![0.0; v * k];
    let mut tsum = vec![0.0; k];
    for (r, &y) in targets.iter().enumerate() {
        onehot[r * k + y] = 1.0;
        tsum[y] += 1.0;
    }
    let onehot = t.constant(vec![v, k], onehot)?;
    let tsum = t.constant(vec![k], tsum)?;
    let prod = t.mul(probs, onehot)?;
    let inter = t.sum_axis0(prod)?;
    let psum = t.sum_axis0(probs)?;
    let num0 = t.mul_scalar(inter, 2.0)?;
    let num = t.add_scalar(num0, DICE_EPS)?;
    let den0 = t.add(psum, tsum)?;
    let den = t.add_scalar(den0, DICE_EPS)?;
    let dice = t.div(num, den)?;
    let fg = t.narrow(dice, 0, 1, k - 1)?;
    let neg = t.neg(fg)?;
    let loss_per_class = t.add_scalar(neg, 1.0)?;
    let weighted = match class_weights {
        Some(w) => {
            if w.len() != k {
                return Err(Error::BadArgument {
                    op: "soft_dice_loss",
                    msg: format!("{} class weights for {k} classes", w.len()),
                });
            }
            let wfg = t.constant(vec![k - 1], w[1..].to_vec())?;
            t.mul(loss_per_class, wfg)?
        }
        None => loss_per_class,
    };
    t.reduce_mean(weighted)
}

/// L_s = (Dice + CE) / 2 applied per sample and averaged over the
/// batch; `probs` rows must be grouped sample-major.
pub fn dice_ce_mean_per_sample(
    t: &mut Tape,
    probs: Var,
    targets: &[usize],
    n_samples: usize,
) -> Result<Var> {
    let (v, _k) = matrix_dims(t, "dice_ce_mean_per_sample", probs)?;
    if n_samples == 0 || v % n_samples != 0 || targets.len() != v {
        return Err(Error::BadArgument {
            op: "dice_ce_mean_per_sample",
            msg: format!("{v} voxels cannot split into {n_samples} samples"),
        });
    }
    let vox = v / n_samples;
    let mut acc: Option<Var> = None;
    for s in 0..n_samples {
        let rows = t.narrow(probs, 0, s * vox, vox)?;
        let ys = &targets[s * vox..(s + 1) * vox];
        let ls = dice_ce_single(t, rows, ys)?;
        acc = Some(match acc {
            Some(a) => t.add(a, ls)?,
            None => ls,
        });
    }
    t.mul_scalar(acc.expect("n_samples > 0"), 1.0 / n_samples as f64)
}

fn dice_ce_single(t: &mut Tape, probs: Var, targets: &[usize]) -> Result<Var> {
    let dice = soft_dice_loss(t, probs, targets, None)?;
    let ce = cross_entropy_mean(t, probs, targets, None)?;
    let sum = t.add(dice, ce)?;
    t.mul_scalar(sum, 0.5)
}

/// L_s = (Dice + CE) / 2 pooled over all rows, with per-class weights
/// applied to the Dice term and per-voxel weights w[y_v] to the CE term.
pub fn dice_ce_pooled_weighted(
    t: &mut Tape,
    probs: Var,
    targets: &[usize],
    omega: &[f64],
) -> Result<Var> {
    let (_v, k) = matrix_dims(t, "dice_ce_pooled_weighted", probs)?;
    if omega.len() != k {
        return Err(Error::BadArgument {
            op: "dice_ce_pooled_weighted",
            msg: format!("{} weights for {k} classes", omega.len()),
        });
    }
    check_targets(k, targets)?;
    let voxel_w: Vec<f64> = targets.iter().map(|&y| omega[y]).collect();
    let dice = soft_dice_loss(t, probs, targets, Some(omega))?;
    let ce = cross_entropy_mean(t, probs, targets, Some(&voxel_w))?;
    let sum = t.add(dice, ce)?;
    t.mul_scalar(sum, 0.5)
}

/// Mean squared error between same-shape nodes.
pub fn mse(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = t.sub(a, b)?;
    let sq = t.mul(d, d)?;
    t.reduce_mean(sq)
}

/// Per-entry binary cross-entropy with a soft target factor:
/// -mean[ g * ln(p) + (1 - g) * ln(1 - p) ]. Both logs floor-guarded.
pub fn soft_bce_mean(t: &mut Tape, target: Var, probs: Var) -> Result<Var> {
    if t.shape(target) != t.shape(probs) {
        return Err(Error::ShapeMismatch {
            op: "soft_bce_mean",
            lhs: t.shape(target).to_vec(),
            rhs: t.shape(probs).to_vec(),
        });
    }
    let lnp = t.log(probs)?;
    let pos = t.mul(target, lnp)?;
    let negp = t.neg(probs)?;
    let one_minus_p = t.add_scalar(negp, 1.0)?;
    let ln1mp = t.log(one_minus_p)?;
    let negg = t.neg(target)?;
    let one_minus_g = t.add_scalar(negg, 1.0)?;
    let neg_term = t.mul(one_minus_g, ln1mp)?;
    let both = t.add(pos, neg_term)?;
    let m = t.reduce_mean(both)?;
    t.neg(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn one_hot_probs(targets: &[usize], k: usize, hot: f64) -> Vec<f64> {
        let cold = (1.0 - hot) / (k - 1) as f64;
        let mut out = vec![cold; targets.len() * k];
        for (r, &y) in targets.iter().enumerate() {
            out[r * k + y] = hot;
        }
        out
    }

    #[test]
    fn perfect_match_losses_near_zero() {
        let mut t = Tape::new();
        let targets = [0usize, 1, 1, 0];
        let vals = one_hot_probs(&targets, 2, 1.0 - 1e-9);
        let p = t.leaf(vec![4, 2], vals, true).unwrap();
        let dice = soft_dice_loss(&mut t, p, &targets, None).unwrap();
        let ce = cross_entropy_mean(&mut t, p, &targets, None).unwrap();
        assert!(t.scalar_value(dice) <= 1e-4);
        assert!(t.scalar_value(ce) <= 1e-4);
    }

    #[test]
    fn dice_half_overlap_hand_value() {
        // 8 voxels; target has class 1 in 4 voxels; prediction puts
        // class-1 probability 1 in 2 of those plus 2 others.
        let mut t = Tape::new();
        let targets = [1usize, 1, 1, 1, 0, 0, 0, 0];
        let mut vals = vec![0.0; 16];
        for (r, pred) in [1usize, 1, 0, 0, 1, 1, 0, 0].iter().enumerate() {
            vals[r * 2 + pred] = 1.0;
        }
        let p = t.leaf(vec![8, 2], vals, true).unwrap();
        let dice = soft_dice_loss(&mut t, p, &targets, None).unwrap();
        // per-class (class 1): (2*2 + eps)/(4 + 4 + eps); loss = 1 - that
        let expected = 1.0 - (4.0 + DICE_EPS) / (8.0 + DICE_EPS);
        assert!((t.scalar_value(dice) - expected).abs() < 1e-12);
        assert!((t.scalar_value(dice) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn mse_identical_zero() {
        let mut t = Tape::new();
        let a = t.leaf(vec![3], vec![1.0, 2.0, 3.0], true).unwrap();
        let b = t.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = mse(&mut t, a, b).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn ce_rejects_out_of_range_class() {
        let mut t = Tape::new();
        let p = t.leaf(vec![1, 2], vec![0.5, 0.5], true).unwrap();
        assert!(matches!(
            cross_entropy_mean(&mut t, p, &[2], None),
            Err(Error::ClassOutOfRange { class: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn weighted_ce_hand_value() {
        // two voxels, omega = [1, 2]: w_v follows the target class
        let mut t = Tape::new();
        let vals = vec![0.8, 0.2, 0.3, 0.7];
        let p = t.leaf(vec![2, 2], vals, true).unwrap();
        let targets = [0usize, 1];
        let omega = [1.0, 2.0];
        let ce = dice_ce_pooled_weighted(&mut t, p, &targets, &omega).unwrap();
        // CE part: -(1*ln0.8 + 2*ln0.7)/2
        let ce_hand = -(0.8f64.ln() + 2.0 * 0.7f64.ln()) / 2.0;
        // Dice part (class 1 only): I=0.7, P=0.9, T=1
        let dice_hand = 2.0 * (1.0 - (2.0 * 0.7 + DICE_EPS) / (0.9 + 1.0 + DICE_EPS));
        let expected = 0.5 * (ce_hand + dice_hand);
        assert!((t.scalar_value(ce) - expected).abs() < 1e-9);
    }

    #[test]
    fn unit_weights_match_unweighted_bitwise() {
        let mut t = Tape::new();
        let vals = vec![0.8, 0.2, 0.3, 0.7, 0.25, 0.75];
        let targets = [0usize, 1, 1];
        let p = t.leaf(vec![3, 2], vals.clone(), true).unwrap();
        let w = dice_ce_pooled_weighted(&mut t, p, &targets, &[1.0, 1.0]).unwrap();
        let p2 = t.leaf(vec![3, 2], vals, true).unwrap();
        let dice = soft_dice_loss(&mut t, p2, &targets, None).unwrap();
        let ce = cross_entropy_mean(&mut t, p2, &targets, None).unwrap();
        let s = t.add(dice, ce).unwrap();
        let u = t.mul_scalar(s, 0.5).unwrap();
        assert_eq!(t.scalar_value(w).to_bits(), t.scalar_value(u).to_bits());
    }
}
