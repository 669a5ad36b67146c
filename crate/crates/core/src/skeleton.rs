//! Kinematic skeleton, forward kinematics, canonical frame, scaled
//! orthographic camera and pose-error metrics.
//!
//! Conventions used throughout the crate:
//! * canonical frame: pelvis at the origin, the body faces +X, the hip axis
//!   lies along Y with the left hip on +Y, and the spine points towards +Z;
//! * camera frame: after rotation, camera X maps to the image row (pointing
//!   down) and camera Y to the image column (pointing right), camera Z is
//!   depth and is dropped by the projection;
//! * rotations use intrinsic Z-Y-X Euler angles, `R = Rz(a) Ry(b) Rx(c)`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Guard used by every normalisation in the crate.
pub const NORM_EPS: f64 = 1e-8;

pub const LEFT_HIP: &str = "left-hip";
pub const RIGHT_HIP: &str = "right-hip";
pub const NECK: &str = "neck";

/// Skeleton topology with fixed bone lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonDoc", into = "SkeletonDoc")]
pub struct KinematicTree {
    names: Vec<String>,
    /// The root points at itself.
    parents: Vec<usize>,
    bone_lengths: Vec<f64>,
    lr_swap: Vec<usize>,
    /// Limb direction of each joint in the canonical rest pose.
    rest_directions: Vec<Vector3<f64>>,
    /// Joints ordered so that every parent precedes its children.
    order: Vec<usize>,
    left_hip: usize,
    right_hip: usize,
    neck: usize,
}

/// On-disk form of a skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonDoc {
    pub joints: Vec<JointDoc>,
    /// Pairs of joint names exchanged by a left/right mirror.
    pub lr_swap: Vec<[String; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDoc {
    pub name: String,
    /// `None` for the root.
    pub parent: Option<String>,
    #[serde(default)]
    pub bone_length: f64,
    #[serde(default)]
    pub rest_direction: Option<[f64; 3]>,
}

impl TryFrom<SkeletonDoc> for KinematicTree {
    type Error = Error;

    fn try_from(doc: SkeletonDoc) -> Result<Self> {
        let index: BTreeMap<&str, usize> = doc
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| (j.name.as_str(), i))
            .collect();
        if index.len() != doc.joints.len() {
            return Err(Error::Skeleton("duplicate joint names".into()));
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Skeleton(format!("unknown joint {name:?}")))
        };
        let mut parents = Vec::with_capacity(doc.joints.len());
        for (i, j) in doc.joints.iter().enumerate() {
            parents.push(match &j.parent {
                None => i,
                Some(p) => lookup(p)?,
            });
        }
        let mut pairs = Vec::with_capacity(doc.lr_swap.len());
        for [a, b] in &doc.lr_swap {
            pairs.push((lookup(a)?, lookup(b)?));
        }
        KinematicTree::new(
            doc.joints.iter().map(|j| j.name.clone()).collect(),
            parents,
            doc.joints.iter().map(|j| j.bone_length).collect(),
            &pairs,
            doc.joints
                .iter()
                .map(|j| j.rest_direction.map(Vector3::from))
                .collect(),
        )
    }
}

impl From<KinematicTree> for SkeletonDoc {
    fn from(t: KinematicTree) -> Self {
        let joints = (0..t.joint_count())
            .map(|j| JointDoc {
                name: t.names[j].clone(),
                parent: (t.parents[j] != j).then(|| t.names[t.parents[j]].clone()),
                bone_length: if t.parents[j] == j {
                    0.0
                } else {
                    t.bone_lengths[j]
                },
                rest_direction: (t.parents[j] != j).then(|| t.rest_directions[j].into()),
            })
            .collect();
        let lr_swap = (0..t.joint_count())
            .filter(|&j| t.lr_swap[j] > j)
            .map(|j| [t.names[j].clone(), t.names[t.lr_swap[j]].clone()])
            .collect();
        SkeletonDoc { joints, lr_swap }
    }
}

impl KinematicTree {
    /// Validates and builds a tree. The root is the joint that is its own
    /// parent and must be index 0. `swap_pairs` lists left/right partners;
    /// unlisted joints are fixed by the mirror. Missing rest directions
    /// default to +Z.
    pub fn new(
        names: Vec<String>,
        parents: Vec<usize>,
        bone_lengths: Vec<f64>,
        swap_pairs: &[(usize, usize)],
        rest_directions: Vec<Option<Vector3<f64>>>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 || parents.len() != n || bone_lengths.len() != n || rest_directions.len() != n {
            return Err(Error::Skeleton(
                "per-joint arrays disagree in length".into(),
            ));
        }
        if parents[0] != 0 {
            return Err(Error::Skeleton("joint 0 must be the root".into()));
        }
        for (j, &p) in parents.iter().enumerate() {
            if p >= n {
                return Err(Error::Skeleton(format!("parent of joint {j} out of range")));
            }
            if j != 0 && p == j {
                return Err(Error::Skeleton(format!("joint {j} is a second root")));
            }
            if j != 0 && !(bone_lengths[j] > 0.0 && bone_lengths[j].is_finite()) {
                return Err(Error::Skeleton(format!(
                    "bone length of {} must be positive",
                    names[j]
                )));
            }
        }
        let order = topological_order(&parents)?;

        let mut lr_swap: Vec<usize> = (0..n).collect();
        let mut seen = BTreeSet::new();
        for &(a, b) in swap_pairs {
            if a >= n || b >= n || a == b || !seen.insert(a) || !seen.insert(b) {
                return Err(Error::Skeleton("lr_swap pairs must be disjoint".into()));
            }
            lr_swap[a] = b;
            lr_swap[b] = a;
        }

        let find = |name: &str| {
            names
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::Skeleton(format!("skeleton lacks a {name:?} joint")))
        };
        let (left_hip, right_hip, neck) = (find(LEFT_HIP)?, find(RIGHT_HIP)?, find(NECK)?);

        let mut dirs = Vec::with_capacity(n);
        for (j, d) in rest_directions.into_iter().enumerate() {
            let d = d.unwrap_or_else(Vector3::z);
            if j != 0 && d.norm() <= NORM_EPS {
                return Err(Error::Skeleton(format!(
                    "zero rest direction for joint {j}"
                )));
            }
            let d = if j == 0 {
                Vector3::zeros()
            } else if (d.norm() - 1.0).abs() < 1e-12 {
                // Keeps already-unit directions bit-identical across save/load.
                d
            } else {
                d.normalize()
            };
            dirs.push(d);
        }
        let mut bone_lengths = bone_lengths;
        bone_lengths[0] = 0.0;

        Ok(Self {
            names,
            parents,
            bone_lengths,
            lr_swap,
            rest_directions: dirs,
            order,
            left_hip,
            right_hip,
            neck,
        })
    }

    /// 17-joint layout: pelvis, hips/knees/ankles, spine, neck, nose,
    /// head-top, shoulders/elbows/wrists.
    pub fn default_17() -> Self {
        // (name, parent, length, rest direction)
        let table: [(&str, usize, f64, [f64; 3]); 17] = [
            ("pelvis", 0, 0.0, [0.0, 0.0, 0.0]),
            (RIGHT_HIP, 0, 0.12, [0.0, -1.0, 0.0]),
            ("right-knee", 1, 0.45, [0.0, 0.0, -1.0]),
            ("right-ankle", 2, 0.45, [0.0, 0.0, -1.0]),
            (LEFT_HIP, 0, 0.12, [0.0, 1.0, 0.0]),
            ("left-knee", 4, 0.45, [0.0, 0.0, -1.0]),
            ("left-ankle", 5, 0.45, [0.0, 0.0, -1.0]),
            ("spine", 0, 0.25, [0.0, 0.0, 1.0]),
            (NECK, 7, 0.25, [0.0, 0.0, 1.0]),
            ("nose", 8, 0.12, [0.6, 0.0, 0.8]),
            ("head-top", 9, 0.12, [-0.5, 0.0, 1.0]),
            ("left-shoulder", 8, 0.15, [0.0, 1.0, 0.0]),
            ("left-elbow", 11, 0.28, [0.0, 0.6, -1.0]),
            ("left-wrist", 12, 0.25, [0.0, 0.3, -1.0]),
            ("right-shoulder", 8, 0.15, [0.0, -1.0, 0.0]),
            ("right-elbow", 14, 0.28, [0.0, -0.6, -1.0]),
            ("right-wrist", 15, 0.25, [0.0, -0.3, -1.0]),
        ];
        let pairs = [(1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16)];
        Self::new(
            table.iter().map(|t| t.0.to_string()).collect(),
            table.iter().map(|t| t.1).collect(),
            table.iter().map(|t| t.2).collect(),
            &pairs,
            table
                .iter()
                .enumerate()
                .map(|(j, t)| (j != 0).then(|| Vector3::from(t.3)))
                .collect(),
        )
        .expect("built-in skeleton is valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serialises")
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, j: usize) -> usize {
        self.parents[j]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn is_root(&self, j: usize) -> bool {
        self.parents[j] == j
    }

    pub fn bone_length(&self, j: usize) -> f64 {
        self.bone_lengths[j]
    }

    pub fn bone_lengths(&self) -> &[f64] {
        &self.bone_lengths
    }

    pub fn lr_swap(&self) -> &[usize] {
        &self.lr_swap
    }

    pub fn rest_direction(&self, j: usize) -> Vector3<f64> {
        self.rest_directions[j]
    }

    /// Parents before children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn hips_and_neck(&self) -> (usize, usize, usize) {
        (self.left_hip, self.right_hip, self.neck)
    }
}

fn topological_order(parents: &[usize]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut children = vec![Vec::new(); n];
    for (j, &p) in parents.iter().enumerate() {
        if p != j {
            children[p].push(j);
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != n {
        return Err(Error::Skeleton("parent array contains a cycle".into()));
    }
    Ok(order)
}

macro_rules! pose_type {
    ($(#[$meta:meta])* $name:ident, $vec:ident, $dim:expr) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub coords: Vec<$vec<f64>>,
        }

        impl $name {
            pub fn zeros(joints: usize) -> Self {
                Self { coords: vec![$vec::zeros(); joints] }
            }

            pub fn joint_count(&self) -> usize {
                self.coords.len()
            }

            /// Row-major `J x D` copy.
            pub fn to_flat(&self) -> Vec<f64> {
                self.coords.iter().flat_map(|c| c.iter().copied()).collect()
            }

            pub fn from_flat(flat: &[f64]) -> Self {
                Self {
                    coords: flat.chunks_exact($dim).map($vec::from_column_slice).collect(),
                }
            }
        }
    };
}

pose_type!(
    /// Unit limb directions, one per joint; the root row is zero.
    LocalLimbVectors, Vector3, 3
);
pose_type!(
    /// View-independent 3D pose, pelvis at the origin.
    CanonicalPose3D, Vector3, 3
);
pose_type!(
    /// 3D pose in the camera frame.
    CameraPose3D, Vector3, 3
);
pose_type!(
    /// Normalised image coordinates `(row, column)`; `[0, 1]^2` covers the frame.
    Pose2D, Vector2, 2
);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraParams {
    pub euler: [f64; 3],
    pub scale: f64,
    pub translation: [f64; 2],
}

impl CameraParams {
    pub fn identity() -> Self {
        Self {
            euler: [0.0; 3],
            scale: 1.0,
            translation: [0.0; 2],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_rotation(self.euler)
    }
}

/// Divides each non-root row by `max(|row|, eps)` and zeroes the root row.
pub fn normalize_limb_vectors(raw: &[Vector3<f64>]) -> LocalLimbVectors {
    LocalLimbVectors {
        coords: raw
            .iter()
            .enumerate()
            .map(|(j, r)| {
                if j == 0 {
                    Vector3::zeros()
                } else {
                    r / r.norm().max(NORM_EPS)
                }
            })
            .collect(),
    }
}

/// Places every joint at its parent plus bone length times its limb vector.
pub fn forward_kinematics(tree: &KinematicTree, limbs: &LocalLimbVectors) -> CanonicalPose3D {
    let mut coords = vec![Vector3::zeros(); tree.joint_count()];
    for &j in tree.order() {
        if !tree.is_root(j) {
            coords[j] = coords[tree.parent(j)] + tree.bone_length(j) * limbs.coords[j];
        }
    }
    CanonicalPose3D { coords }
}

/// Unit normal of `(left-hip -> neck) x (left-hip -> right-hip)`.
pub fn face_direction(coords: &[Vector3<f64>], tree: &KinematicTree) -> Result<Vector3<f64>> {
    let (l, r, n) = tree.hips_and_neck();
    let up = coords[n] - coords[l];
    let across = coords[r] - coords[l];
    let f = up.cross(&across);
    let len = f.norm();
    if len <= NORM_EPS * up.norm().max(1.0) * across.norm().max(1.0) {
        return Err(Error::DegenerateFace);
    }
    Ok(f / len)
}

/// Rotation whose rows are the canonical axes expressed in the input frame.
fn canonical_rotation(coords: &[Vector3<f64>], tree: &KinematicTree) -> Result<Matrix3<f64>> {
    let x = face_direction(coords, tree)?;
    let (l, r, _) = tree.hips_and_neck();
    let hip = coords[r] - coords[l];
    let hip = hip - x * x.dot(&hip);
    let hip_len = hip.norm();
    if hip_len <= NORM_EPS {
        return Err(Error::DegenerateFace);
    }
    // Right hip on -Y.
    let y = -hip / hip_len;
    let z = x.cross(&y);
    Ok(Matrix3::from_rows(&[
        x.transpose(),
        y.transpose(),
        z.transpose(),
    ]))
}

/// Moves the pelvis to the origin and rotates the body to face +X with the
/// hip axis on Y (right hip negative).
pub fn canonicalize(coords: &[Vector3<f64>], tree: &KinematicTree) -> Result<CanonicalPose3D> {
    let root = coords[0];
    let centred: Vec<_> = coords.iter().map(|c| c - root).collect();
    let rot = canonical_rotation(&centred, tree)?;
    Ok(CanonicalPose3D {
        coords: centred.iter().map(|c| rot * c).collect(),
    })
}

fn rot_x(c: f64) -> Matrix3<f64> {
    let (s, c) = c.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rz(e[0]) Ry(e[1]) Rx(e[2])`.
pub fn euler_to_rotation(euler: [f64; 3]) -> Matrix3<f64> {
    rot_z(euler[0]) * rot_y(euler[1]) * rot_x(euler[2])
}

/// Partial derivatives of [`euler_to_rotation`] with respect to each angle.
pub fn euler_rotation_jacobian(euler: [f64; 3]) -> [Matrix3<f64>; 3] {
    let d = |m: Matrix3<f64>, axis: usize| -> Matrix3<f64> {
        // d/dθ R_axis(θ) = R_axis(θ) K_axis with K the generator.
        let mut k = Matrix3::zeros();
        let (i, j) = [(1, 2), (2, 0), (0, 1)][axis];
        k[(i, j)] = -1.0;
        k[(j, i)] = 1.0;
        m * k
    };
    let (rz, ry, rx) = (rot_z(euler[0]), rot_y(euler[1]), rot_x(euler[2]));
    [d(rz, 2) * ry * rx, rz * d(ry, 1) * rx, rz * ry * d(rx, 0)]
}

/// Inverse of [`euler_to_rotation`] with pitch in `[-pi/2, pi/2]`.
pub fn rotation_to_euler(r: &Matrix3<f64>) -> [f64; 3] {
    let sb = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        [r[(1, 0)].atan2(r[(0, 0)]), b, r[(2, 1)].atan2(r[(2, 2)])]
    } else {
        [(-r[(0, 1)]).atan2(r[(1, 1)]), b, 0.0]
    }
}

/// Rotates into the camera frame and applies the scaled orthographic projection.
pub fn camera_transform(pose: &CanonicalPose3D, cam: &CameraParams) -> (CameraPose3D, Pose2D) {
    let r = cam.rotation();
    let p: Vec<Vector3<f64>> = pose.coords.iter().map(|c| r * c).collect();
    let q = p
        .iter()
        .map(|c| {
            Vector2::new(
                cam.scale * c.x + cam.translation[0],
                cam.scale * c.y + cam.translation[1],
            )
        })
        .collect();
    (CameraPose3D { coords: p }, Pose2D { coords: q })
}

/// Mirrors a camera-frame pose to match a horizontally flipped image:
/// negates camera Y and exchanges left/right joints.
pub fn mirror_camera_pose(p: &CameraPose3D, tree: &KinematicTree) -> CameraPose3D {
    CameraPose3D {
        coords: tree
            .lr_swap()
            .iter()
            .map(|&s| {
                let c = p.coords[s];
                Vector3::new(c.x, -c.y, c.z)
            })
            .collect(),
    }
}

fn check_same(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape(format!("pose joint counts {a} vs {b}")));
    }
    Ok(())
}

/// Mean joint distance after subtracting each pose's root.
pub fn mpjpe(pred: &CameraPose3D, gt: &CameraPose3D) -> Result<f64> {
    let mask = vec![true; gt.joint_count()];
    mpjpe_masked(pred, gt, &mask)
}

/// Root-aligned mean joint distance over joints with `mask[j]` set.
/// Returns `NaN` for an empty mask.
pub fn mpjpe_masked(pred: &CameraPose3D, gt: &CameraPose3D, mask: &[bool]) -> Result<f64> {
    check_same(pred.joint_count(), gt.joint_count())?;
    check_same(mask.len(), gt.joint_count())?;
    let (pr, gr) = (pred.coords[0], gt.coords[0]);
    let (sum, n) = pred
        .coords
        .iter()
        .zip(&gt.coords)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((p, g), _)| {
            (s + ((p - pr) - (g - gr)).norm(), n + 1)
        });
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcrustesResult {
    pub aligned: CameraPose3D,
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// Rank-deficient cross-covariance: only the translation was fitted.
    pub degenerate: bool,
}

/// Similarity transform of `pred` minimising the summed squared distance to `gt`.
pub fn procrustes_align(pred: &CameraPose3D, gt: &CameraPose3D) -> Result<ProcrustesResult> {
    check_same(pred.joint_count(), gt.joint_count())?;
    let n = pred.joint_count() as f64;
    let mu_p = pred.coords.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.coords.iter().sum::<Vector3<f64>>() / n;
    let var_p = pred
        .coords
        .iter()
        .map(|c| (c - mu_p).norm_squared())
        .sum::<f64>()
        / n;
    let var_g = gt
        .coords
        .iter()
        .map(|c| (c - mu_g).norm_squared())
        .sum::<f64>()
        / n;

    let translation_only = || ProcrustesResult {
        aligned: CameraPose3D {
            coords: pred.coords.iter().map(|c| c - mu_p + mu_g).collect(),
        },
        rotation: Matrix3::identity(),
        scale: 1.0,
        translation: mu_g - mu_p,
        degenerate: true,
    };
    if var_p <= 1e-24 || var_g <= 1e-24 {
        return Ok(translation_only());
    }

    let mut cov = Matrix3::zeros();
    for (p, g) in pred.coords.iter().zip(&gt.coords) {
        cov += (g - mu_g) * (p - mu_p).transpose();
    }
    cov /= n;
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut sv = svd.singular_values;
    // nalgebra does not guarantee sorted singular values.
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[1] <= 1e-12 * sorted[0].max(1e-300) {
        return Ok(translation_only());
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // Flip the axis of the smallest singular value.
        let k = (0..3)
            .min_by(|&a, &b| sv[a].total_cmp(&sv[b]))
            .expect("three singular values");
        d[(k, k)] = -1.0;
        sv[k] = -sv[k];
    }
    let rotation = u * d * v_t;
    let scale = sv.sum() / var_p;
    let translation = mu_g - scale * rotation * mu_p;
    Ok(ProcrustesResult {
        aligned: CameraPose3D {
            coords: pred
                .coords
                .iter()
                .map(|c| scale * rotation * c + translation)
                .collect(),
        },
        rotation,
        scale,
        translation,
        degenerate: false,
    })
}

/// Mean joint distance after Procrustes alignment (no further root alignment).
pub fn pa_mpjpe(pred: &CameraPose3D, gt: &CameraPose3D) -> Result<f64> {
    let aligned = procrustes_align(pred, gt)?.aligned;
    Ok(mean_distance(&aligned.coords, &gt.coords))
}

pub(crate) fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}
