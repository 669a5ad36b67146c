//! Pose and joint uncertainty, flip consistency and pseudo-label selection.
//!
//! Distances between 2D poses are mean per-joint Euclidean distances in
//! normalised image units. Selection works on predictions of a frozen
//! snapshot for each target image and for its mirror image.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::heatmap::{entropy, flip_pose2d, render_gaussian_heatmap, GridDims, Heatmap};
use crate::model::{MrpNet, NetworkOutputs};
use crate::skeleton::{mirror_camera_pose, CameraPose3D, KinematicTree, Pose2D};
use crate::{Error, Result};

/// Mean per-joint distance between two 2D poses.
pub fn mean_distance_2d(a: &Pose2D, b: &Pose2D) -> f64 {
    a.coords
        .iter()
        .zip(&b.coords)
        .map(|(x, y)| (x - y).norm())
        .sum::<f64>()
        / a.joint_count() as f64
}

/// Disagreement between the localised and the projected 2D pose.
pub fn pose_uncertainty(out: &NetworkOutputs) -> f64 {
    mean_distance_2d(&out.localized, &out.projected)
}

/// Entropy of one joint's heatmap.
pub fn joint_uncertainty(out: &NetworkOutputs, j: usize) -> f64 {
    entropy(&out.heatmaps, j)
}

/// `d(q_proj, F(q_loc')) + d(q_loc, F(q_proj'))` where primes denote the
/// prediction on the mirrored image and `F` mirrors a pose back.
pub fn flip_consistency(
    out: &NetworkOutputs,
    flipped: &NetworkOutputs,
    tree: &KinematicTree,
) -> f64 {
    let swap = tree.lr_swap();
    mean_distance_2d(&out.projected, &flip_pose2d(&flipped.localized, swap))
        + mean_distance_2d(&out.localized, &flip_pose2d(&flipped.projected, swap))
}

/// Per-joint score `H(j) * |q_loc(j) - F(q_proj')(j)|`.
pub fn joint_scores(
    out: &NetworkOutputs,
    flipped: &NetworkOutputs,
    tree: &KinematicTree,
) -> Vec<f64> {
    let back = flip_pose2d(&flipped.projected, tree.lr_swap());
    (0..tree.joint_count())
        .map(|j| joint_uncertainty(out, j) * (out.localized.coords[j] - back.coords[j]).norm())
        .collect()
}

/// Prediction averages over the four 2D instances and the two 3D instances.
fn equivariant_means(
    out: &NetworkOutputs,
    flipped: &NetworkOutputs,
    tree: &KinematicTree,
) -> (Pose2D, CameraPose3D) {
    let swap = tree.lr_swap();
    let (a, b) = (
        flip_pose2d(&flipped.localized, swap),
        flip_pose2d(&flipped.projected, swap),
    );
    let q = Pose2D {
        coords: (0..tree.joint_count())
            .map(|j| {
                (out.localized.coords[j] + out.projected.coords[j] + a.coords[j] + b.coords[j])
                    / 4.0
            })
            .collect(),
    };
    let m = mirror_camera_pose(&flipped.pose_camera, tree);
    let p = CameraPose3D {
        coords: out
            .pose_camera
            .coords
            .iter()
            .zip(&m.coords)
            .map(|(x, y)| (x + y) / 2.0)
            .collect::<Vec<Vector3<f64>>>(),
    };
    (q, p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub heatmaps: Heatmap,
    pub pose_camera: CameraPose3D,
    pub pose_2d: Pose2D,
    /// Confidences of the original prediction, used as loss weights.
    pub confidences: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: BTreeMap<usize, PseudoLabel>,
    pub iteration: usize,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.labels.keys().copied().collect()
    }

    pub fn get(&self, id: usize) -> Result<&PseudoLabel> {
        self.labels.get(&id).ok_or(Error::NotPseudoLabelled(id))
    }

    pub fn write_audit(&self, path: &Path, all_scores: &[(usize, f64)]) -> Result<()> {
        let audit = SelectionAudit {
            kind: "pose".into(),
            iteration: self.iteration,
            thresholds: vec![self.threshold],
            selected: self.ids(),
            scores: all_scores.to_vec(),
        };
        write_json(path, &audit)
    }
}

/// Settings shared by both selection rules.
#[derive(Clone, Copy, Debug)]
pub struct TargetRendering {
    pub grid: GridDims,
    pub sigma: f64,
}

/// Keeps samples whose flip consistency is below `threshold`.
///
/// `outputs[i]` and `flipped[i]` are predictions for sample `ids[i]` and its
/// mirror image.
pub fn select_pose_pseudo_labels(
    ids: &[usize],
    outputs: &[NetworkOutputs],
    flipped: &[NetworkOutputs],
    tree: &KinematicTree,
    render: TargetRendering,
    threshold: f64,
    iteration: usize,
) -> Result<PseudoLabelSet> {
    check_lengths(ids, outputs, flipped)?;
    let mut labels = BTreeMap::new();
    for ((&id, out), fl) in ids.iter().zip(outputs).zip(flipped) {
        let score = flip_consistency(out, fl, tree);
        if score < threshold {
            let (q, p) = equivariant_means(out, fl, tree);
            labels.insert(
                id,
                PseudoLabel {
                    heatmaps: render_gaussian_heatmap(&q, render.grid, render.sigma)?,
                    pose_camera: p,
                    pose_2d: q,
                    confidences: out.confidences.w.clone(),
                    score,
                },
            );
        }
    }
    Ok(PseudoLabelSet {
        labels,
        iteration,
        threshold,
    })
}

/// Per-sample joint assignment with pseudo targets for in-view joints.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLabel {
    pub in_view: Vec<bool>,
    pub out_view: Vec<bool>,
    pub scores: Vec<f64>,
    /// Targets for every joint; only in-view entries are used.
    pub heatmaps: Heatmap,
    pub pose_camera: CameraPose3D,
    pub pose_2d: Pose2D,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JointSelection {
    pub labels: BTreeMap<usize, JointLabel>,
    pub iteration: usize,
    pub in_threshold: f64,
    pub out_threshold: f64,
}

impl JointSelection {
    pub fn in_view_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.pairs(|l| &l.in_view)
    }

    pub fn out_view_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.pairs(|l| &l.out_view)
    }

    fn pairs(&self, pick: impl Fn(&JointLabel) -> &Vec<bool>) -> BTreeSet<(usize, usize)> {
        self.labels
            .iter()
            .flat_map(|(&id, l)| {
                pick(l)
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(move |(j, _)| (id, j))
            })
            .collect()
    }

    pub fn get(&self, id: usize) -> Result<&JointLabel> {
        self.labels.get(&id).ok_or(Error::NotPseudoLabelled(id))
    }

    pub fn write_audit(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct JointAudit {
            kind: &'static str,
            iteration: usize,
            thresholds: [f64; 2],
            in_view: BTreeSet<(usize, usize)>,
            out_view: BTreeSet<(usize, usize)>,
            scores: BTreeMap<usize, Vec<f64>>,
        }
        let audit = JointAudit {
            kind: "joint",
            iteration: self.iteration,
            thresholds: [self.in_threshold, self.out_threshold],
            in_view: self.in_view_pairs(),
            out_view: self.out_view_pairs(),
            scores: self
                .labels
                .iter()
                .map(|(&id, l)| (id, l.scores.clone()))
                .collect(),
        };
        write_json(path, &audit)
    }
}

/// Assigns each (sample, joint) pair to in-view (score below
/// `in_threshold`), out-view (score above `out_threshold`) or neither.
#[allow(clippy::too_many_arguments)]
pub fn select_joint_pseudo_labels(
    ids: &[usize],
    outputs: &[NetworkOutputs],
    flipped: &[NetworkOutputs],
    tree: &KinematicTree,
    render: TargetRendering,
    in_threshold: f64,
    out_threshold: f64,
    iteration: usize,
) -> Result<JointSelection> {
    check_lengths(ids, outputs, flipped)?;
    let mut labels = BTreeMap::new();
    for ((&id, out), fl) in ids.iter().zip(outputs).zip(flipped) {
        let scores = joint_scores(out, fl, tree);
        let in_view: Vec<bool> = scores.iter().map(|&s| s < in_threshold).collect();
        // A pair is never in both sets, even with crossed thresholds.
        let out_view: Vec<bool> = scores
            .iter()
            .zip(&in_view)
            .map(|(&s, &inv)| s > out_threshold && !inv)
            .collect();
        if !in_view.iter().chain(&out_view).any(|&b| b) {
            continue;
        }
        let (q, p) = equivariant_means(out, fl, tree);
        labels.insert(
            id,
            JointLabel {
                in_view,
                out_view,
                scores,
                heatmaps: render_gaussian_heatmap(&q, render.grid, render.sigma)?,
                pose_camera: p,
                pose_2d: q,
                confidences: out.confidences.w.clone(),
            },
        );
    }
    Ok(JointSelection {
        labels,
        iteration,
        in_threshold,
        out_threshold,
    })
}

/// Predictions of a frozen snapshot on images and their mirror images.
pub fn predict_with_flip(
    net: &MrpNet,
    images: &[&[f64]],
) -> Result<(Vec<NetworkOutputs>, Vec<NetworkOutputs>)> {
    let size = net.config().image_size;
    let mirrored: Vec<Vec<f64>> = images.iter().map(|im| flip_image(im, size)).collect();
    let refs: Vec<&[f64]> = mirrored.iter().map(|m| m.as_slice()).collect();
    Ok((net.predict(images)?, net.predict(&refs)?))
}

/// Reverses the column order of a row-major square image.
pub fn flip_image(img: &[f64], size: usize) -> Vec<f64> {
    img.chunks(size)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

fn check_lengths(ids: &[usize], a: &[NetworkOutputs], b: &[NetworkOutputs]) -> Result<()> {
    if ids.len() != a.len() || a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} ids, {} outputs, {} mirrored outputs",
            ids.len(),
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SelectionAudit {
    kind: String,
    iteration: usize,
    thresholds: Vec<f64>,
    selected: Vec<usize>,
    scores: Vec<(usize, f64)>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::heatmap::{joint_confidence, spatial_softmax};
    use crate::skeleton::{CameraParams, CanonicalPose3D, LocalLimbVectors};
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GRID: GridDims = GridDims {
        height: 4,
        width: 4,
    };

    pub(crate) fn random_outputs(rng: &mut ChaCha8Rng, j: usize, sharpness: f64) -> NetworkOutputs {
        let logits: Vec<f64> = (0..j * GRID.cells())
            .map(|_| rng.gen_range(-sharpness..sharpness))
            .collect();
        let heatmaps = spatial_softmax(j, GRID, &logits).unwrap();
        let rand2 = |rng: &mut ChaCha8Rng| Pose2D {
            coords: (0..j)
                .map(|_| Vector2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                .collect(),
        };
        let rand3 = |rng: &mut ChaCha8Rng| CameraPose3D {
            coords: (0..j)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        };
        NetworkOutputs {
            confidences: joint_confidence(&heatmaps),
            heatmaps,
            localized: rand2(rng),
            limbs: LocalLimbVectors::zeros(j),
            camera: CameraParams::identity(),
            pose_canonical: CanonicalPose3D::zeros(j),
            pose_camera: rand3(rng),
            projected: rand2(rng),
        }
    }

    fn render() -> TargetRendering {
        TargetRendering {
            grid: GRID,
            sigma: 1.0,
        }
    }

    #[test]
    fn pose_uncertainty_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut o = random_outputs(&mut rng, 17, 1.0);
        o.projected = o.localized.clone();
        assert_eq!(pose_uncertainty(&o), 0.0);
        o.projected.coords.iter_mut().for_each(|c| c.x += 0.1);
        assert!((pose_uncertainty(&o) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn equivariant_predictions_have_zero_consistency_error() {
        let tree = KinematicTree::default_17();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut o = random_outputs(&mut rng, 17, 1.0);
        o.projected = o.localized.clone();
        let mut f = o.clone();
        f.localized = flip_pose2d(&o.localized, tree.lr_swap());
        f.projected = f.localized.clone();
        f.pose_camera = mirror_camera_pose(&o.pose_camera, &tree);
        assert!(flip_consistency(&o, &f, &tree) < 1e-12);
        let set = select_pose_pseudo_labels(
            &[4],
            &[o.clone()],
            &[f],
            &tree,
            TargetRendering {
                grid: GridDims::DEFAULT,
                sigma: 1.0,
            },
            1e-9,
            0,
        )
        .unwrap();
        let label = set.get(4).unwrap();
        for (a, b) in label.pose_2d.coords.iter().zip(&o.localized.coords) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in label.pose_camera.coords.iter().zip(&o.pose_camera.coords) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn consistency_is_symmetric_under_exchange() {
        let tree = KinematicTree::default_17();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = random_outputs(&mut rng, 17, 1.0);
        let f = random_outputs(&mut rng, 17, 1.0);
        let a = flip_consistency(&o, &f, &tree);
        let b = flip_consistency(&f, &o, &tree);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn threshold_extremes() {
        let tree = KinematicTree::default_17();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outs: Vec<_> = (0..5).map(|_| random_outputs(&mut rng, 17, 2.0)).collect();
        let fl: Vec<_> = (0..5).map(|_| random_outputs(&mut rng, 17, 2.0)).collect();
        let ids: Vec<usize> = (10..15).collect();
        assert!(
            select_pose_pseudo_labels(&ids, &outs, &fl, &tree, render(), 0.0, 0)
                .unwrap()
                .is_empty()
        );
        assert_eq!(
            select_pose_pseudo_labels(&ids, &outs, &fl, &tree, render(), f64::INFINITY, 0)
                .unwrap()
                .ids(),
            ids
        );
        let js =
            select_joint_pseudo_labels(&ids, &outs, &fl, &tree, render(), 0.0, f64::INFINITY, 0)
                .unwrap();
        assert!(js.in_view_pairs().is_empty() && js.out_view_pairs().is_empty());
        assert!(select_pose_pseudo_labels(&ids[..2], &outs, &fl, &tree, render(), 1.0, 0).is_err());
    }

    #[test]
    fn delta_heatmaps_put_every_joint_in_view() {
        let tree = KinematicTree::default_17();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut o = random_outputs(&mut rng, 17, 1.0);
        let mut v = vec![0.0; 17 * GRID.cells()];
        for j in 0..17 {
            v[j * GRID.cells() + j % GRID.cells()] = 1.0;
        }
        o.heatmaps = Heatmap::from_pdfs(17, GRID, v).unwrap();
        let f = random_outputs(&mut rng, 17, 1.0);
        let js =
            select_joint_pseudo_labels(&[0], &[o], &[f], &tree, render(), 1e-12, f64::INFINITY, 0)
                .unwrap();
        assert_eq!(js.in_view_pairs().len(), 17);
    }

    #[test]
    fn audit_dumps_are_json() {
        let dir = tempfile::tempdir().unwrap();
        let tree = KinematicTree::default_17();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let outs: Vec<_> = (0..3).map(|_| random_outputs(&mut rng, 17, 2.0)).collect();
        let fl: Vec<_> = (0..3).map(|_| random_outputs(&mut rng, 17, 2.0)).collect();
        let set =
            select_pose_pseudo_labels(&[0, 1, 2], &outs, &fl, &tree, render(), 10.0, 7).unwrap();
        let p = dir.path().join("pose.json");
        set.write_audit(&p, &[(0, 0.1)]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(v["iteration"], 7);
        let js = select_joint_pseudo_labels(&[0, 1, 2], &outs, &fl, &tree, render(), 0.5, 1.0, 3)
            .unwrap();
        let p = dir.path().join("joint.json");
        js.write_audit(&p).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(v["kind"], "joint");
    }

    #[test]
    fn flip_image_is_an_involution() {
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let f = flip_image(&img, 4);
        assert_eq!(&f[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(flip_image(&f, 4), img);
    }
}
