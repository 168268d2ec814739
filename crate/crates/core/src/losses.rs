//! Training objectives: image-level score supervision, descriptor pair and
//! triplet losses with progressive hard-negative mining, geometric
//! consistency on scale/orientation, and the per-subnetwork compositions.
//!
//! Every loss is a mean over the contributing elements so magnitudes stay
//! batch-size independent.

use crate::config::LossWeights;
use crate::diff::{Scalar, Tape, TensorId};
use crate::{Error, Result};
use rand::Rng;

/// Ground-truth side of a correspondence batch: branch-j descriptors at the
/// warped keypoint locations plus scale/orientation targets transported into
/// the live frame. Only `valid` entries enter any loss.
#[derive(Debug, Clone)]
pub struct CorrespondenceBatch<T> {
    pub desc_dim: usize,
    /// `k * desc_dim`, row per keypoint.
    pub target_descriptors: Vec<T>,
    pub target_log_scales: Vec<T>,
    pub target_thetas: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> CorrespondenceBatch<T> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn valid_mask_mean<T: Scalar>(
    tape: &mut Tape<T>,
    per_row: TensorId,
    valid: &[bool],
    op: &'static str,
) -> Result<TensorId> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::invalid(op, "no valid entries in batch"));
    }
    let mask: Vec<T> = valid
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    let mask_c = tape.constant(mask, &[valid.len()])?;
    let masked = tape.mul(per_row, mask_c)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, T::one() / T::of(n_valid as f64)))
}

/// Mean squared difference between the live score map and the supervision
/// target over masked-in pixels. Differentiable w.r.t. the score map only.
pub fn image_loss<T: Scalar>(
    tape: &mut Tape<T>,
    score_map: TensorId,
    target: &[T],
    mask: &[bool],
) -> Result<TensorId> {
    let len = tape.value(score_map).len();
    if target.len() != len || mask.len() != len {
        return Err(Error::Shape {
            op: "image_loss",
            dimension: "target element count",
            actual: target.len(),
            expected: len,
        });
    }
    let n_valid = mask.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::invalid("image_loss", "empty supervision mask"));
    }
    let shape = tape.shape(score_map).to_vec();
    let target_c = tape.constant(target.to_vec(), &shape)?;
    let diff = tape.sub(score_map, target_c)?;
    let sq = tape.mul(diff, diff)?;
    let mask_t: Vec<T> = mask
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    let mask_c = tape.constant(mask_t, &shape)?;
    let masked = tape.mul(sq, mask_c)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, T::one() / T::of(n_valid as f64)))
}

/// Mean squared l2 distance between live descriptors and their ground-truth
/// counterparts, over valid pairs. Unit-norm inputs bound it by 4.
pub fn pair_loss<T: Scalar>(
    tape: &mut Tape<T>,
    descriptors: TensorId,
    batch: &CorrespondenceBatch<T>,
) -> Result<TensorId> {
    let shape = tape.shape(descriptors).to_vec();
    if shape != [batch.len(), batch.desc_dim] {
        return Err(Error::Shape {
            op: "pair_loss",
            dimension: "descriptor rows",
            actual: shape[0],
            expected: batch.len(),
        });
    }
    let target = tape.constant(batch.target_descriptors.clone(), &shape)?;
    let diff = tape.sub(descriptors, target)?;
    let sq = tape.mul(diff, diff)?;
    let rows = tape.sum_rows(sq)?;
    valid_mask_mean(tape, rows, &batch.valid, "pair_loss")
}

/// Geometric-consistency loss: wrapped angular difference on orientations
/// plus log-ratio difference on scales, each squared, means weighted by
/// `lambda_ori` / `lambda_scale`.
pub fn geom_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_scales: TensorId,
    thetas: TensorId,
    batch: &CorrespondenceBatch<T>,
    weights: &LossWeights,
) -> Result<TensorId> {
    let k = batch.len();
    if tape.value(log_scales).len() != k || tape.value(thetas).len() != k {
        return Err(Error::Shape {
            op: "geom_loss",
            dimension: "keypoint count",
            actual: tape.value(log_scales).len(),
            expected: k,
        });
    }
    let theta_t = tape.constant(batch.target_thetas.clone(), &[k])?;
    let dtheta_raw = tape.sub(thetas, theta_t)?;
    let dtheta = tape.wrap_angle(dtheta_raw);
    let dtheta_sq = tape.mul(dtheta, dtheta)?;
    let ori_mean = valid_mask_mean(tape, dtheta_sq, &batch.valid, "geom_loss")?;

    let log_t = tape.constant(batch.target_log_scales.clone(), &[k])?;
    let dlog = tape.sub(log_scales, log_t)?;
    let dlog_sq = tape.mul(dlog, dlog)?;
    let scale_mean = valid_mask_mean(tape, dlog_sq, &batch.valid, "geom_loss")?;

    let ori_term = tape.scale(ori_mean, T::of(weights.lambda_ori));
    let scale_term = tape.scale(scale_mean, T::of(weights.lambda_scale));
    tape.add(ori_term, scale_term)
}

/// Progressive mining pool size at iteration `k`: starts at the ceiling and
/// decays exponentially to the floor.
pub fn mining_pool_size(iteration: usize, weights: &LossWeights) -> usize {
    let decayed =
        (weights.mining_ceiling as f64 * (-weights.mining_decay * iteration as f64 / 1000.0).exp())
            .round() as usize;
    decayed.clamp(weights.mining_floor, weights.mining_ceiling)
}

/// Pick one negative index per anchor: candidates are the valid ground-truth
/// descriptors of *other* keypoints, ranked by triplet-loss contribution
/// (hardest first), sampled uniformly from the top `mining_pool_size(k)`.
pub fn mine_negatives<T: Scalar>(
    anchors: &[T],
    batch: &CorrespondenceBatch<T>,
    iteration: usize,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let k = batch.len();
    let m = batch.desc_dim;
    let pool = mining_pool_size(iteration, weights);
    let dist_sq = |a: usize, b: usize| -> f64 {
        let ar = &anchors[a * m..(a + 1) * m];
        let br = &batch.target_descriptors[b * m..(b + 1) * m];
        ar.iter()
            .zip(br)
            .map(|(&x, &y)| {
                let d = (x - y).to64();
                d * d
            })
            .sum()
    };
    (0..k)
        .map(|a| {
            // Hinge contribution is monotone decreasing in the negative
            // distance, so ranking by ascending distance ranks hardest first.
            let mut candidates: Vec<(f64, usize)> = (0..k)
                .filter(|&c| c != a && batch.valid[c])
                .map(|c| (dist_sq(a, c), c))
                .collect();
            if candidates.is_empty() {
                // Degenerate batch; fall back to any other index.
                return (a + 1) % k.max(2);
            }
            candidates.sort_by(|x, y| {
                x.0.partial_cmp(&y.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| x.1.cmp(&y.1))
            });
            let top = pool.min(candidates.len());
            candidates[rng.random_range(0..top)].1
        })
        .collect()
}

/// Triplet hinge: mean over valid anchors of
/// `max(0, ||a - p||^2 - ||a - n||^2 + margin)`.
pub fn triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    descriptors: TensorId,
    batch: &CorrespondenceBatch<T>,
    negative_indices: &[usize],
    margin: f64,
) -> Result<TensorId> {
    let k = batch.len();
    let m = batch.desc_dim;
    if negative_indices.len() != k {
        return Err(Error::Shape {
            op: "triplet_loss",
            dimension: "negative count",
            actual: negative_indices.len(),
            expected: k,
        });
    }
    let shape = [k, m];
    let positives = tape.constant(batch.target_descriptors.clone(), &shape)?;
    let negatives: Vec<T> = negative_indices
        .iter()
        .flat_map(|&n| batch.target_descriptors[n * m..(n + 1) * m].to_vec())
        .collect();
    let negatives = tape.constant(negatives, &shape)?;
    let dpos = tape.sub(descriptors, positives)?;
    let dpos_sq = tape.mul(dpos, dpos)?;
    let pos_rows = tape.sum_rows(dpos_sq)?;
    let dneg = tape.sub(descriptors, negatives)?;
    let dneg_sq = tape.mul(dneg, dneg)?;
    let neg_rows = tape.sum_rows(dneg_sq)?;
    let gap = tape.sub(pos_rows, neg_rows)?;
    let shifted = tape.affine(gap, T::one(), T::of(margin));
    let hinge = tape.relu(shifted);
    valid_mask_mean(tape, hinge, &batch.valid, "triplet_loss")
}

/// Detector objective: `L_im + lambda_pair * L_pair + L_geom`. The geometric
/// term is absent when scale/orientation estimation is disabled.
pub fn detector_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_im: TensorId,
    l_pair: TensorId,
    l_geom: Option<TensorId>,
    weights: &LossWeights,
) -> Result<TensorId> {
    let pair_term = tape.scale(l_pair, T::of(weights.lambda_pair));
    let base = tape.add(l_im, pair_term)?;
    match l_geom {
        Some(g) => tape.add(base, g),
        None => Ok(base),
    }
}

/// Descriptor objective: the triplet loss alone.
pub fn descriptor_loss(l_tri: TensorId) -> TensorId {
    l_tri
}

#[cfg(test)]
mod tests;
