//! Loss terms on a batched forward pass.
//!
//! Per-joint losses are scaled so that they sum to the plain mean squared
//! error: for `n` samples and `J` joints the heatmap loss of joint `j` in
//! sample `s` is `mean_cells((h - h_gt)^2) / (n J)`, and likewise for the
//! 3D pose. A per-(sample, joint) coefficient of one everywhere therefore
//! recovers the unweighted loss.

use netcore::{Graph, Tensor, Var};

use crate::model::{mean_joint_distance_2d, ForwardVars};
use crate::{Error, Result};

/// Dense per-sample targets for a batch.
#[derive(Clone, Debug, Default)]
pub struct BatchTargets {
    /// `[n J C]`.
    pub heatmaps: Vec<f64>,
    /// `[n 3J]`.
    pub pose: Vec<f64>,
}

/// `sum(w * (pred - target)^2)` with constant target and weights.
pub fn weighted_squared_error(
    g: &mut Graph,
    pred: Var,
    target: Vec<f64>,
    weights: Vec<f64>,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::new(shape.clone(), target)?);
    let w = g.constant(Tensor::new(shape, weights)?);
    let d = g.sub(pred, t)?;
    let d2 = g.square(d);
    let wd = g.mul(d2, w)?;
    Ok(g.sum(wd))
}

fn expand(coef: &[f64], per: usize, norm: f64) -> Vec<f64> {
    coef.iter()
        .flat_map(|&c| std::iter::repeat_n(c / norm, per))
        .collect()
}

/// Weights of the heatmap and 3D pose parts of a supervised loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub heatmap: f64,
    pub pose: f64,
}

impl TermWeights {
    /// Plain heatmap MSE plus `pose` times the pose MSE.
    pub fn pose(pose: f64) -> Self {
        Self { heatmap: 1.0, pose }
    }
}

/// `sum_{s,j} coef[s J + j] (a L_h^{s,j} + b L_p^{s,j})` for weights `(a, b)`.
pub fn joint_losses(
    g: &mut Graph,
    v: &ForwardVars,
    targets: &BatchTargets,
    coef: &[f64],
    w: TermWeights,
) -> Result<Var> {
    let lambda_pose = w.pose;
    let n = v.batch;
    let j = coef.len() / n.max(1);
    if coef.len() != n * j || j == 0 {
        return Err(Error::Shape(format!(
            "{} joint coefficients for batch {n}",
            coef.len()
        )));
    }
    let cells = g.shape(v.heatmaps)[1];
    let nj = (n * j) as f64;
    let lh = weighted_squared_error(
        g,
        v.heatmaps,
        targets.heatmaps.clone(),
        expand(coef, cells, nj * cells as f64),
    )?;
    let lh = g.scale(lh, w.heatmap);
    if lambda_pose == 0.0 {
        return Ok(lh);
    }
    let lp = weighted_squared_error(
        g,
        v.pose_camera,
        targets.pose.clone(),
        expand(coef, 3, nj * 3.0),
    )?;
    let lp = g.scale(lp, lambda_pose);
    Ok(g.add(lh, lp)?)
}

/// Heatmap MSE + `lambda_pose` 3D pose MSE + `lambda_u` pose uncertainty.
pub fn loss_sup_source(
    g: &mut Graph,
    v: &ForwardVars,
    targets: &BatchTargets,
    joints: usize,
    w: TermWeights,
    lambda_u: f64,
) -> Result<Var> {
    let ones = vec![1.0; v.batch * joints];
    let base = joint_losses(g, v, targets, &ones, w)?;
    if lambda_u == 0.0 {
        return Ok(base);
    }
    let u = mean_joint_distance_2d(g, v.localized, v.projected)?;
    let u = g.scale(u, lambda_u);
    Ok(g.add(base, u)?)
}

/// Per-sample pose uncertainty, `[n, 1]`.
pub fn pose_uncertainty_per_sample(g: &mut Graph, v: &ForwardVars) -> Result<Var> {
    let n = v.batch;
    let cols = g.shape(v.localized)[1];
    let j = cols / 2;
    let d = g.sub(v.localized, v.projected)?;
    let d2 = g.square(d);
    let d2 = g.reshape(d2, vec![n * j, 2])?;
    let sq = g.sum_rows(d2);
    let dist = g.sqrt(sq);
    let dist = g.reshape(dist, vec![n, j])?;
    let total = g.sum_rows(dist);
    Ok(g.scale(total, 1.0 / j as f64))
}

/// Distance between localised and projected joints averaged over the
/// masked pairs of the batch; zero for an empty mask.
pub fn masked_pose_uncertainty(g: &mut Graph, v: &ForwardVars, mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    let coef: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / count.max(1) as f64 } else { 0.0 })
        .collect();
    let n = v.batch;
    let j = g.shape(v.localized)[1] / 2;
    if coef.len() != n * j {
        return Err(Error::Shape(format!(
            "mask of {} pairs for {n} x {j}",
            coef.len()
        )));
    }
    let d = g.sub(v.localized, v.projected)?;
    let d2 = g.square(d);
    let d2 = g.reshape(d2, vec![n * j, 2])?;
    let sq = g.sum_rows(d2);
    let dist = g.sqrt(sq);
    let c = g.constant(Tensor::new(vec![n * j, 1], coef)?);
    let wd = g.mul(dist, c)?;
    Ok(g.sum(wd))
}

/// Batch mean of `max(0, margin - U)`.
pub fn loss_bg_uncertainty(g: &mut Graph, v: &ForwardVars, margin: f64) -> Result<Var> {
    let u = pose_uncertainty_per_sample(g, v)?;
    let neg = g.scale(u, -1.0);
    let gap = g.add_scalar(neg, margin);
    let hinge = g.relu(gap);
    Ok(g.mean(hinge))
}

/// Batch mean of the pose uncertainty.
pub fn loss_target_uncertainty(g: &mut Graph, v: &ForwardVars) -> Result<Var> {
    let u = pose_uncertainty_per_sample(g, v)?;
    Ok(g.mean(u))
}

/// Confidence-weighted pseudo supervision. `confidences` are the raw
/// per-(sample, joint) confidences; they are normalised per sample and
/// enter as constants.
pub fn loss_psup_target(
    g: &mut Graph,
    v: &ForwardVars,
    targets: &BatchTargets,
    confidences: &[f64],
    w: TermWeights,
) -> Result<Var> {
    let j = confidences.len() / v.batch.max(1);
    let mask = vec![true; confidences.len()];
    let coef = normalized_weights(confidences, &mask, j);
    // Undo the 1/(nJ) scaling for the joint axis: weights already sum to one.
    let coef: Vec<f64> = coef.iter().map(|w| w * j as f64).collect();
    joint_losses(g, v, targets, &coef, w)
}

/// `w / sum(w)` over the masked joints of each sample; unmasked joints get 0.
pub fn normalized_weights(w: &[f64], mask: &[bool], joints: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for ((ws, ms), os) in w
        .chunks(joints)
        .zip(mask.chunks(joints))
        .zip(out.chunks_mut(joints))
    {
        let total: f64 = ws.iter().zip(ms).filter(|(_, &m)| m).map(|(x, _)| x).sum();
        if total > 0.0 {
            for ((o, &x), &m) in os.iter_mut().zip(ws).zip(ms) {
                if m {
                    *o = x / total;
                }
            }
        }
    }
    out
}

/// Entropy of every joint heatmap, `[n J, 1]`.
pub fn joint_entropies(g: &mut Graph, v: &ForwardVars) -> Var {
    let plogp = g.xlogx(v.heatmaps);
    let s = g.sum_rows(plogp);
    g.scale(s, -1.0)
}

/// `sum_{s,j} coef[s J + j] H(s, j) / n`.
pub fn weighted_entropy(g: &mut Graph, v: &ForwardVars, coef: &[f64]) -> Result<Var> {
    let h = joint_entropies(g, v);
    let c = g.constant(Tensor::new(vec![coef.len(), 1], coef.to_vec())?);
    let wh = g.mul(h, c)?;
    let s = g.sum(wh);
    Ok(g.scale(s, 1.0 / v.batch.max(1) as f64))
}

/// `sum_{s,j} mask (ln C - H(s, j)) / n`; minimising it raises the masked
/// entropies towards the uniform map.
pub fn entropy_deficit(g: &mut Graph, v: &ForwardVars, mask: &[bool]) -> Result<Var> {
    let cells = g.shape(v.heatmaps)[1];
    let coef: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let count = coef.iter().sum::<f64>() / v.batch.max(1) as f64;
    let h = weighted_entropy(g, v, &coef)?;
    let neg = g.scale(h, -1.0);
    Ok(g.add_scalar(neg, count * (cells as f64).ln()))
}

/// Entropy deficit over every joint of a background batch.
pub fn loss_bg_entropy(g: &mut Graph, v: &ForwardVars, joints: usize) -> Result<Var> {
    entropy_deficit(g, v, &vec![true; v.batch * joints])
}

/// In-view supervision minus `lambda_h` times out-view entropy.
pub fn loss_sup_occlusion_aware(
    g: &mut Graph,
    v: &ForwardVars,
    targets: &BatchTargets,
    visibility: &[bool],
    w: TermWeights,
    lambda_h: f64,
) -> Result<Var> {
    let inv: Vec<f64> = visibility
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let sup = joint_losses(g, v, targets, &inv, w)?;
    let outv: Vec<f64> = visibility
        .iter()
        .map(|&b| if b { 0.0 } else { 1.0 })
        .collect();
    if lambda_h == 0.0 || outv.iter().all(|&c| c == 0.0) {
        return Ok(sup);
    }
    let h = weighted_entropy(g, v, &outv)?;
    let h = g.scale(h, -lambda_h);
    Ok(g.add(sup, h)?)
}
