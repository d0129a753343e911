//! Class-conditional Gaussian mixture over per-voxel features.
//!
//! Statistics come straight from labeled voxels each step (no EM): the
//! per-class mean is the plain average of class-k features, the std the
//! prediction-score-weighted second central moment. Both stay
//! differentiable functions of the features, so the mixture adapts with
//! the networks through its own training loss. Posterior inference uses
//! per-channel diagonal Gaussians combined in log space.

use crate::error::{Error, Result};
use crate::tensor::loss::{cross_entropy_mean, mse, soft_bce_mean};
use crate::tensor::{argmax_axis1, Tape, Var};

/// Per-class stds never drop below this.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Weight-sum guard for the score-weighted variance.
const WEIGHT_SUM_FLOOR: f64 = 1e-12;

/// Persistent mixture statistics, carried across steps and serialized
/// into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmState {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// K x C row-major.
    pub means: Vec<f64>,
    /// K x C row-major, floored at [`SIGMA_FLOOR`] once seen.
    pub stds: Vec<f64>,
    /// Class prior, uniform by default.
    pub priors: Vec<f64>,
    pub seen: Vec<bool>,
}

impl GmmState {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        GmmState {
            num_classes,
            feature_dim,
            means: vec![0.0; num_classes * feature_dim],
            stds: vec![1.0; num_classes * feature_dim],
            priors: vec![1.0 / num_classes as f64; num_classes],
            seen: vec![false; num_classes],
        }
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&k| self.seen[k]).collect()
    }

    pub fn mean_of(&self, k: usize) -> &[f64] {
        &self.means[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    pub fn std_of(&self, k: usize) -> &[f64] {
        &self.stds[k * self.feature_dim..(k + 1) * self.feature_dim]
    }
}

/// Tape-resident per-class statistics for the current step. Classes
/// present in this step's labels are differentiable into the features;
/// carried classes enter as constants.
pub struct TrackedStats {
    pub class_ids: Vec<usize>,
    pub means: Vec<Var>,
    pub stds: Vec<Var>,
    pub fresh: Vec<bool>,
}

impl TrackedStats {
    fn slot(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn covers(&self, labels: &[usize]) -> bool {
        labels.iter().all(|&y| self.slot(y).is_some())
    }
}

/// One model's labeled-voxel view: feature rows and softmax rows.
#[derive(Clone, Copy)]
pub struct LabeledSource {
    /// [V, C]
    pub features: Var,
    /// [V, K]
    pub probs: Var,
}

pub struct UpdateOutcome {
    pub stats: TrackedStats,
    /// True when the labels held no foreground and the state was left
    /// untouched.
    pub skipped_all_background: bool,
    pub updated_classes: Vec<usize>,
}

fn carried_stats(tape: &mut Tape, state: &GmmState) -> TrackedStats {
    let mut stats = TrackedStats {
        class_ids: Vec::new(),
        means: Vec::new(),
        stds: Vec::new(),
        fresh: Vec::new(),
    };
    for k in state.seen_classes() {
        let c = state.feature_dim;
        let mu = tape
            .constant(vec![c], state.mean_of(k).to_vec())
            .expect("state dims are consistent");
        let sd = tape
            .constant(vec![c], state.std_of(k).to_vec())
            .expect("state dims are consistent");
        stats.class_ids.push(k);
        stats.means.push(mu);
        stats.stds.push(sd);
        stats.fresh.push(false);
    }
    stats
}

/// Refit per-class statistics from this step's labeled voxels; both
/// models' features contribute. Classes absent from `labels` keep their
/// carried values. With `detach_stats` the refreshed statistics still
/// update the persistent state but stop gradients into the features.
pub fn update_statistics(
    tape: &mut Tape,
    state: &mut GmmState,
    sources: &[LabeledSource],
    labels: &[usize],
    detach_stats: bool,
) -> Result<UpdateOutcome> {
    if sources.is_empty() {
        return Err(Error::BadArgument {
            op: "update_statistics",
            msg: "no feature sources".into(),
        });
    }
    let c = state.feature_dim;
    let k_total = state.num_classes;
    for src in sources {
        let fs = tape.shape(src.features);
        let ps = tape.shape(src.probs);
        if fs.len() != 2 || fs[0] != labels.len() || fs[1] != c {
            return Err(Error::BadShape {
                op: "update_statistics",
                msg: format!("features must be [{}, {c}]", labels.len()),
                shape: fs.to_vec(),
            });
        }
        if ps.len() != 2 || ps[0] != labels.len() || ps[1] != k_total {
            return Err(Error::BadShape {
                op: "update_statistics",
                msg: format!("probs must be [{}, {k_total}]", labels.len()),
                shape: ps.to_vec(),
            });
        }
    }
    for &y in labels {
        if y >= k_total {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes: k_total,
            });
        }
    }

    if !labels.iter().any(|&y| y != 0) {
        return Ok(UpdateOutcome {
            stats: carried_stats(tape, state),
            skipped_all_background: true,
            updated_classes: Vec::new(),
        });
    }

    let mut fresh_by_class: Vec<Option<(Var, Var)>> = vec![None; k_total];
    let mut updated = Vec::new();
    for k in 0..k_total {
        let idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == k)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let n_total = idx.len() * sources.len();

        // mu_k: unweighted mean of class-k features over all sources
        let mut sum: Option<Var> = None;
        let mut rows_per_source = Vec::with_capacity(sources.len());
        let mut scores_per_source = Vec::with_capacity(sources.len());
        for src in sources {
            let rows = tape.gather_rows(src.features, &idx)?;
            let s = tape.sum_axis0(rows)?;
            sum = Some(match sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            let prow = tape.gather_rows(src.probs, &idx)?;
            let score_col = tape.narrow(prow, 1, k, 1)?;
            let scores = tape.reshape(score_col, vec![idx.len()])?;
            rows_per_source.push(rows);
            scores_per_source.push(scores);
        }
        let mu = tape.mul_scalar(sum.expect("at least one source"), 1.0 / n_total as f64)?;
        let mu_row = tape.reshape(mu, vec![1, c])?;

        // sigma_k: sqrt of the score-weighted second central moment
        let mut wsum_acc: Option<Var> = None;
        let mut moment_acc: Option<Var> = None;
        for (rows, scores) in rows_per_source.iter().zip(&scores_per_source) {
            let mu_b = tape.broadcast_to(mu_row, vec![idx.len(), c])?;
            let resid = tape.sub(*rows, mu_b)?;
            let sq = tape.mul(resid, resid)?;
            let weighted = tape.scale_rows(sq, *scores)?;
            let m = tape.sum_axis0(weighted)?;
            moment_acc = Some(match moment_acc {
                Some(acc) => tape.add(acc, m)?,
                None => m,
            });
            let ws = tape.reduce_sum(*scores)?;
            wsum_acc = Some(match wsum_acc {
                Some(acc) => tape.add(acc, ws)?,
                None => ws,
            });
        }
        let wsum = tape.clamp(wsum_acc.expect("sources"), WEIGHT_SUM_FLOOR, f64::INFINITY)?;
        let wsum_b = tape.broadcast_to(wsum, vec![c])?;
        let var = tape.div(moment_acc.expect("sources"), wsum_b)?;
        let sd = tape.sqrt_floor(var, SIGMA_FLOOR)?;

        let (mu, sd) = if detach_stats {
            (tape.detach(mu), tape.detach(sd))
        } else {
            (mu, sd)
        };

        state.means[k * c..(k + 1) * c].copy_from_slice(tape.values(mu));
        state.stds[k * c..(k + 1) * c].copy_from_slice(tape.values(sd));
        state.seen[k] = true;
        fresh_by_class[k] = Some((mu, sd));
        updated.push(k);
    }

    let mut stats = TrackedStats {
        class_ids: Vec::new(),
        means: Vec::new(),
        stds: Vec::new(),
        fresh: Vec::new(),
    };
    for k in 0..k_total {
        if let Some((mu, sd)) = fresh_by_class[k] {
            stats.class_ids.push(k);
            stats.means.push(mu);
            stats.stds.push(sd);
            stats.fresh.push(true);
        } else if state.seen[k] {
            let mu = tape.constant(vec![c], state.mean_of(k).to_vec())?;
            let sd = tape.constant(vec![c], state.std_of(k).to_vec())?;
            stats.class_ids.push(k);
            stats.means.push(mu);
            stats.stds.push(sd);
            stats.fresh.push(false);
        }
    }
    Ok(UpdateOutcome {
        stats,
        skipped_all_background: false,
        updated_classes: updated,
    })
}

/// Per-voxel class distribution over the seen classes plus the hard
/// argmax prediction.
pub struct PosteriorMap {
    /// [V, Ks] on the tape, rows summing to one.
    pub soft: Var,
    /// Class ids behind each column, ascending.
    pub class_ids: Vec<usize>,
    /// Hard prediction per voxel (real class ids, lowest id on ties).
    pub hard: Vec<usize>,
}

impl PosteriorMap {
    /// Column index of a real class id.
    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Dense [V, K] distribution with zeros for unseen classes
    /// (values only; diagnostic/testing convenience).
    pub fn full_distribution(&self, tape: &Tape, num_classes: usize) -> Vec<f64> {
        let soft = tape.values(self.soft);
        let v = tape.shape(self.soft)[0];
        let ks = self.class_ids.len();
        let mut out = vec![0.0; v * num_classes];
        for r in 0..v {
            for (j, &cid) in self.class_ids.iter().enumerate() {
                out[r * num_classes + cid] = soft[r * ks + j];
            }
        }
        out
    }
}

/// Diagonal-Gaussian posterior over the seen classes for every feature
/// row, normalized in log space.
pub fn posterior(
    tape: &mut Tape,
    stats: &TrackedStats,
    priors: &[f64],
    features: Var,
) -> Result<PosteriorMap> {
    let ks = stats.class_ids.len();
    if ks < 2 {
        return Err(Error::PosteriorUndefined);
    }
    let fshape = tape.shape(features).to_vec();
    if fshape.len() != 2 {
        return Err(Error::BadRank {
            op: "posterior",
            expected: 2,
            shape: fshape,
        });
    }
    let (v, c) = (fshape[0], fshape[1]);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();

    let mut columns = Vec::with_capacity(ks);
    for (j, &k) in stats.class_ids.iter().enumerate() {
        let mu_row = tape.reshape(stats.means[j], vec![1, c])?;
        let mu_b = tape.broadcast_to(mu_row, vec![v, c])?;
        let resid = tape.sub(features, mu_b)?;
        let sq = tape.mul(resid, resid)?;
        let var2 = {
            let s2 = tape.mul(stats.stds[j], stats.stds[j])?;
            tape.mul_scalar(s2, 2.0)?
        };
        let var2_row = tape.reshape(var2, vec![1, c])?;
        let var2_b = tape.broadcast_to(var2_row, vec![v, c])?;
        let quad = tape.div(sq, var2_b)?;
        let quad_sum = tape.sum_axis1(quad)?;
        let neg_quad = tape.neg(quad_sum)?;

        let log_sd = tape.log(stats.stds[j])?;
        let log_det = tape.reduce_sum(log_sd)?;
        let log_det_b = tape.broadcast_to(log_det, vec![v])?;
        let centered = tape.sub(neg_quad, log_det_b)?;
        let log_dens = tape.add_scalar(centered, priors[k].ln() - c as f64 * half_log_2pi)?;
        columns.push(tape.reshape(log_dens, vec![v, 1])?);
    }
    let logits = tape.concat_axis1(&columns)?;
    let soft = tape.softmax_axis1(logits)?;
    let hard_slots = argmax_axis1(tape.shape(soft), tape.values(soft));
    let hard = hard_slots.iter().map(|&s| stats.class_ids[s]).collect();
    Ok(PosteriorMap {
        soft,
        class_ids: stats.class_ids.clone(),
        hard,
    })
}

/// Mean cross-entropy of the soft posterior against ground-truth labels.
pub fn loss_gt(tape: &mut Tape, post: &PosteriorMap, labels: &[usize]) -> Result<Var> {
    let mut targets = Vec::with_capacity(labels.len());
    for &y in labels {
        match post.column_of(y) {
            Some(j) => targets.push(j),
            None => {
                return Err(Error::BadArgument {
                    op: "loss_gt",
                    msg: format!("label class {y} not covered by the posterior"),
                })
            }
        }
    }
    cross_entropy_mean(tape, post.soft, &targets, None)
}

/// Per-voxel, per-class binary cross-entropy between the soft posterior
/// (target-side factor) and the model's softmax restricted to the seen
/// classes.
pub fn loss_self(tape: &mut Tape, post: &PosteriorMap, model_probs: Var) -> Result<Var> {
    let restricted = tape.select_axis1(model_probs, &post.class_ids)?;
    soft_bce_mean(tape, post.soft, restricted)
}

/// Centroid separation pressure:
/// 2/(K(K-1)) * sum over unordered seen pairs of exp(-||mu_k - mu_v||^2).
pub fn loss_max(tape: &mut Tape, stats: &TrackedStats, num_classes: usize) -> Result<Var> {
    let ks = stats.class_ids.len();
    if ks < 2 {
        return Err(Error::PosteriorUndefined);
    }
    let mut acc: Option<Var> = None;
    for i in 0..ks {
        for j in (i + 1)..ks {
            let d = tape.sub(stats.means[i], stats.means[j])?;
            let d2e = tape.mul(d, d)?;
            let d2 = tape.reduce_sum(d2e)?;
            let nd2 = tape.neg(d2)?;
            let e = tape.exp(nd2)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, e)?,
                None => e,
            });
        }
    }
    let k = num_classes as f64;
    tape.mul_scalar(acc.expect("ks >= 2"), 2.0 / (k * (k - 1.0)))
}

/// Mean squared difference between the two models' soft posteriors.
pub fn loss_cons(tape: &mut Tape, a: &PosteriorMap, b: &PosteriorMap) -> Result<Var> {
    if a.class_ids != b.class_ids {
        return Err(Error::BadArgument {
            op: "loss_cons",
            msg: "posterior class sets differ".into(),
        });
    }
    mse(tape, a.soft, b.soft)
}

/// Cross-entropy of each model's softmax against the hard, detached
/// mixture prediction from its own features.
pub fn loss_rectify(
    tape: &mut Tape,
    probs_a: Var,
    hard_a: &[usize],
    probs_b: Var,
    hard_b: &[usize],
) -> Result<Var> {
    let ce_a = cross_entropy_mean(tape, probs_a, hard_a, None)?;
    let ce_b = cross_entropy_mean(tape, probs_b, hard_b, None)?;
    tape.add(ce_a, ce_b)
}

/// Loss terms feeding the mixture's composite objective. Optional terms
/// are ablation toggles.
pub struct CgmmParts {
    pub gt: Var,
    pub self_supervision: Option<Var>,
    pub max_separation: Option<Var>,
    pub consistency: Option<Var>,
    pub rectify: Var,
}

/// L_train = L_self + L_gt + L_max + lambda_c * L_cons;
/// L_cgmm = L_train + L_rectify.
pub fn compose_cgmm_loss(tape: &mut Tape, parts: &CgmmParts, lambda_c: f64) -> Result<(Var, Var)> {
    let check = |tape: &Tape, v: Var, term: &'static str| -> Result<()> {
        let x = tape.scalar_value(v);
        if !x.is_finite() {
            return Err(Error::NonFiniteLoss { term, value: x });
        }
        Ok(())
    };
    check(tape, parts.gt, "L_gt")?;
    if let Some(v) = parts.self_supervision {
        check(tape, v, "L_self")?;
    }
    if let Some(v) = parts.max_separation {
        check(tape, v, "L_max")?;
    }
    if let Some(v) = parts.consistency {
        check(tape, v, "L_cons")?;
    }
    check(tape, parts.rectify, "L_rectify")?;

    let mut train = parts.gt;
    if let Some(v) = parts.self_supervision {
        train = tape.add(train, v)?;
    }
    if let Some(v) = parts.max_separation {
        train = tape.add(train, v)?;
    }
    if let Some(v) = parts.consistency {
        let scaled = tape.mul_scalar(v, lambda_c)?;
        train = tape.add(train, scaled)?;
    }
    let cgmm = tape.add(train, parts.rectify)?;
    Ok((train, cgmm))
}

/// Euclidean distance between each class's labeled feature center and
/// the center of features pseudo-labeled with that class; None when the
/// class is unseen or has no pseudo-labeled voxels.
pub fn feature_center_distance(
    state: &GmmState,
    features: &[f64],
    pseudo_labels: &[usize],
) -> Vec<Option<f64>> {
    let c = state.feature_dim;
    debug_assert_eq!(features.len(), pseudo_labels.len() * c);
    let mut sums = vec![0.0; state.num_classes * c];
    let mut counts = vec![0usize; state.num_classes];
    for (row, &y) in pseudo_labels.iter().enumerate() {
        if y < state.num_classes {
            counts[y] += 1;
            for j in 0..c {
                sums[y * c + j] += features[row * c + j];
            }
        }
    }
    (0..state.num_classes)
        .map(|k| {
            if !state.seen[k] || counts[k] == 0 {
                return None;
            }
            let mu = state.mean_of(k);
            let mut d2 = 0.0;
            for j in 0..c {
                let diff = sums[k * c + j] / counts[k] as f64 - mu[j];
                d2 += diff * diff;
            }
            Some(d2.sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn single_source(tape: &mut Tape, feats: Vec<f64>, v: usize, c: usize, probs: Vec<f64>, k: usize) -> LabeledSource {
        let features = tape.leaf(vec![v, c], feats, true).unwrap();
        let probs = tape.leaf(vec![v, k], probs, true).unwrap();
        LabeledSource { features, probs }
    }

    #[test]
    fn single_voxel_floors_sigma() {
        let mut tape = Tape::new();
        let mut state = GmmState::new(2, 3);
        let src = single_source(&mut tape, vec![0.4, -0.2, 1.0], 1, 3, vec![0.1, 0.9], 2);
        let out = update_statistics(&mut tape, &mut state, &[src], &[1], false).unwrap();
        assert_eq!(out.updated_classes, vec![1]);
        assert_eq!(state.mean_of(1), &[0.4, -0.2, 1.0]);
        assert_eq!(state.std_of(1), &[SIGMA_FLOOR; 3]);
    }

    #[test]
    fn two_voxel_weighted_variance_hand_values() {
        // features {0, 2}, scores {1, 1}: mu = 1, sigma = 1
        let mut tape = Tape::new();
        let mut state = GmmState::new(2, 1);
        let src = single_source(&mut tape, vec![0.0, 2.0], 2, 1, vec![0.0, 1.0, 0.0, 1.0], 2);
        update_statistics(&mut tape, &mut state, &[src], &[1, 1], false).unwrap();
        assert!((state.mean_of(1)[0] - 1.0).abs() < 1e-12);
        assert!((state.std_of(1)[0] - 1.0).abs() < 1e-12);

        // scores {1, 0}: mu unweighted = 1, sigma = sqrt(1*1/1) = 1
        let mut tape = Tape::new();
        let mut state = GmmState::new(2, 1);
        let src = single_source(&mut tape, vec![0.0, 2.0], 2, 1, vec![0.0, 1.0, 1.0, 0.0], 2);
        update_statistics(&mut tape, &mut state, &[src], &[1, 1], false).unwrap();
        assert!((state.mean_of(1)[0] - 1.0).abs() < 1e-12);
        assert!((state.std_of(1)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_background_leaves_state_untouched() {
        let mut tape = Tape::new();
        let mut state = GmmState::new(3, 2);
        let before = state.clone();
        let src = single_source(&mut tape, vec![1.0, 2.0, 3.0, 4.0], 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 3);
        let out = update_statistics(&mut tape, &mut state, &[src], &[0, 0], false).unwrap();
        assert!(out.skipped_all_background);
        assert_eq!(state, before);
    }

    #[test]
    fn posterior_equidistant_is_half() {
        let mut tape = Tape::new();
        let mut state = GmmState::new(2, 1);
        state.seen = vec![true, true];
        state.means = vec![-1.0, 1.0];
        state.stds = vec![0.7, 0.7];
        let stats = carried_stats(&mut tape, &state);
        let f = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        let post = posterior(&mut tape, &stats, &state.priors, f).unwrap();
        let vals = tape.values(post.soft);
        assert!((vals[0] - 0.5).abs() < 1e-12);
        assert!((vals[1] - 0.5).abs() < 1e-12);
        assert_eq!(post.hard, vec![0]);
    }

    #[test]
    fn posterior_ten_sigma_separation_saturates() {
        let mut tape = Tape::new();
        let mut state = GmmState::new(2, 1);
        state.seen = vec![true, true];
        state.means = vec![0.0, 10.0];
        state.stds = vec![1.0, 1.0];
        let stats = carried_stats(&mut tape, &state);
        let f = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        let post = posterior(&mut tape, &stats, &state.priors, f).unwrap();
        assert!(tape.values(post.soft)[0] >= 1.0 - 1e-9);
    }

    #[test]
    fn posterior_needs_two_seen_classes() {
        let mut tape = Tape::new();
        let mut state = GmmState::new(3, 1);
        state.seen = vec![false, true, false];
        let stats = carried_stats(&mut tape, &state);
        let f = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        assert!(matches!(
            posterior(&mut tape, &stats, &state.priors, f),
            Err(Error::PosteriorUndefined)
        ));
    }

    #[test]
    fn loss_max_hand_values() {
        let mut tape = Tape::new();
        // K=2, coincident centroids -> exactly 1
        let mu = tape.constant(vec![2], vec![0.3, -0.1]).unwrap();
        let sd = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let stats = TrackedStats {
            class_ids: vec![0, 1],
            means: vec![mu, mu],
            stds: vec![sd, sd],
            fresh: vec![true, true],
        };
        let l = loss_max(&mut tape, &stats, 2).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-12);

        // squared distance 100 -> ~ e^-100
        let mu2 = tape.constant(vec![2], vec![10.3, -0.1]).unwrap();
        let stats2 = TrackedStats {
            class_ids: vec![0, 1],
            means: vec![mu, mu2],
            stds: vec![sd, sd],
            fresh: vec![true, true],
        };
        let l2 = loss_max(&mut tape, &stats2, 2).unwrap();
        assert!(tape.scalar_value(l2) < 1e-40);
    }

    #[test]
    fn loss_cons_two_voxel_toy() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0], true).unwrap();
        let b = tape.leaf(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5], true).unwrap();
        let pa = PosteriorMap {
            soft: a,
            class_ids: vec![0, 1],
            hard: vec![0, 0],
        };
        let pb = PosteriorMap {
            soft: b,
            class_ids: vec![0, 1],
            hard: vec![0, 0],
        };
        let l = loss_cons(&mut tape, &pa, &pb).unwrap();
        assert!((tape.scalar_value(l) - 0.25).abs() < 1e-12);

        let ident = loss_cons(&mut tape, &pa, &pa).unwrap();
        assert_eq!(tape.scalar_value(ident), 0.0);
    }

    #[test]
    fn compose_arithmetic() {
        let mut tape = Tape::new();
        let one = |t: &mut Tape| t.leaf(vec![], vec![1.0], true).unwrap();
        let parts = CgmmParts {
            gt: one(&mut tape),
            self_supervision: Some(one(&mut tape)),
            max_separation: Some(one(&mut tape)),
            consistency: Some(one(&mut tape)),
            rectify: one(&mut tape),
        };
        let (train, cgmm) = compose_cgmm_loss(&mut tape, &parts, 1.0).unwrap();
        assert_eq!(tape.scalar_value(train), 4.0);
        assert_eq!(tape.scalar_value(cgmm), 5.0);

        // lambda_c = 0 drops the consistency term exactly
        let (train0, _) = compose_cgmm_loss(&mut tape, &parts, 0.0).unwrap();
        assert_eq!(tape.scalar_value(train0), 3.0);
    }

    #[test]
    fn compose_rejects_non_finite() {
        let mut tape = Tape::new();
        let bad = tape.leaf(vec![], vec![f64::NAN], true).unwrap();
        let ok = tape.leaf(vec![], vec![1.0], true).unwrap();
        let parts = CgmmParts {
            gt: ok,
            self_supervision: None,
            max_separation: Some(bad),
            consistency: None,
            rectify: ok,
        };
        match compose_cgmm_loss(&mut tape, &parts, 1.0) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "L_max"),
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn center_distance_trivial_cases() {
        let mut state = GmmState::new(3, 1);
        state.seen = vec![false, true, true];
        state.means = vec![0.0, 1.0, 5.0];
        // voxels pseudo-labeled 1 center at 4 -> distance 3
        let features = vec![3.0, 5.0, 5.0];
        let pseudo = vec![1, 1, 2];
        let d = feature_center_distance(&state, &features, &pseudo);
        assert_eq!(d[0], None);
        assert!((d[1].unwrap() - 3.0).abs() < 1e-12);
        assert!((d[2].unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_flows_from_train_loss_into_features() {
        let mut tape = Tape::new();
        let mut state = GmmState::new(2, 2);
        let feats = vec![0.2, 0.4, 1.0, -0.3, 0.8, 0.1];
        let probs = vec![0.7, 0.3, 0.2, 0.8, 0.4, 0.6];
        let features = tape.leaf(vec![3, 2], feats, true).unwrap();
        let probs = tape.leaf(vec![3, 2], probs, true).unwrap();
        let src = LabeledSource { features, probs };
        let labels = [0usize, 1, 1];
        let out = update_statistics(&mut tape, &mut state, &[src], &labels, false).unwrap();
        let post = posterior(&mut tape, &out.stats, &state.priors, features).unwrap();
        let gt = loss_gt(&mut tape, &post, &labels).unwrap();
        let lmax = loss_max(&mut tape, &out.stats, 2).unwrap();
        let sum = tape.add(gt, lmax).unwrap();
        tape.backward(sum).unwrap();
        assert!(tape.grad(features).iter().any(|&g| g != 0.0));
    }
}
