//! The two-head pose network and the fusion regressor.
//!
//! Batched graph layout: `n` samples, `J` joints, grid of `C = H W` cells.
//! Per-sample tensors are rows; joint coordinates are interleaved, so a
//! 3D pose is `[n, 3J]` and a 2D pose `[n, 2J]`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use netcore::{BackwardRule, Dense, Graph, ParamStore, ResidualBlock, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::heatmap::{joint_confidence, GridDims, Heatmap, JointConfidences};
use crate::skeleton::{
    euler_rotation_jacobian, euler_to_rotation, CameraParams, CameraPose3D, CanonicalPose3D,
    KinematicTree, LocalLimbVectors, Pose2D, NORM_EPS,
};
use crate::{Error, Result};

/// Lower bound of the camera scale.
pub const SCALE_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrpNetConfig {
    /// Side of the square single-channel observation.
    pub image_size: usize,
    pub encoder_widths: Vec<usize>,
    pub grid: GridDims,
    pub trunk_blocks: usize,
    pub branch_blocks: usize,
    pub fusion_width: usize,
    pub fusion_blocks: usize,
    #[serde(default = "KinematicTree::default_17")]
    pub skeleton: KinematicTree,
}

impl Default for MrpNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            encoder_widths: vec![256, 128],
            grid: GridDims::DEFAULT,
            trunk_blocks: 2,
            branch_blocks: 2,
            fusion_width: 128,
            fusion_blocks: 3,
            skeleton: KinematicTree::default_17(),
        }
    }
}

impl MrpNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder_widths must be non-empty and positive");
        }
        if self.grid.cells() == 0 {
            return bad("grid dims must be positive");
        }
        if self.fusion_width == 0 {
            return bad("fusion_width must be positive");
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn joints(&self) -> usize {
        self.skeleton.joint_count()
    }
}

/// Per-sample outputs of both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs {
    pub heatmaps: Heatmap,
    /// Soft-argmax of the heatmaps.
    pub localized: Pose2D,
    pub confidences: JointConfidences,
    pub limbs: LocalLimbVectors,
    pub camera: CameraParams,
    pub pose_canonical: CanonicalPose3D,
    pub pose_camera: CameraPose3D,
    /// Projection of the regressed 3D pose.
    pub projected: Pose2D,
}

/// Graph handles of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub batch: usize,
    pub features: Var,
    /// `[n J, C]` spatial PDFs.
    pub heatmaps: Var,
    /// `[n, 2J]`.
    pub localized: Var,
    pub raw_limbs: Var,
    pub limbs: Var,
    pub angles: Var,
    /// `[n, 1]`.
    pub scale: Var,
    /// `[n, 2]`.
    pub translation: Var,
    pub pose_canonical: Var,
    /// `[n, 3J]`.
    pub pose_camera: Var,
    /// `[n, 2J]`.
    pub projected: Var,
}

#[derive(Clone, Debug)]
struct Stack {
    blocks: Vec<ResidualBlock>,
}

impl Stack {
    fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            blocks: (0..n)
                .map(|i| ResidualBlock::new(store, &format!("{name}.{i}"), width, rng))
                .collect(),
        }
    }

    fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Shared encoder, localisation head and regression head.
#[derive(Clone, Debug)]
pub struct MrpNet {
    config: MrpNetConfig,
    pub params: ParamStore,
    encoder: Vec<Dense>,
    loc_out: Dense,
    trunk: Stack,
    camera_blocks: Stack,
    camera_out: Dense,
    limb_blocks: Stack,
    limb_out: Dense,
    grid_centres: Tensor,
}

impl MrpNet {
    pub fn new(config: MrpNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let j = config.joints();
        let mut encoder = Vec::new();
        let mut width = config.obs_dim();
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            encoder.push(Dense::new(
                &mut params,
                &format!("encoder.{i}"),
                width,
                w,
                &mut rng,
            ));
            width = w;
        }
        let loc_out = Dense::new(
            &mut params,
            "loc.out",
            width,
            j * config.grid.cells(),
            &mut rng,
        );
        let trunk = Stack::new(
            &mut params,
            "reg.trunk",
            width,
            config.trunk_blocks,
            &mut rng,
        );
        let camera_blocks = Stack::new(
            &mut params,
            "reg.camera",
            width,
            config.branch_blocks,
            &mut rng,
        );
        let camera_out = Dense::new(&mut params, "reg.camera.out", width, 6, &mut rng);
        let limb_blocks = Stack::new(
            &mut params,
            "reg.limbs",
            width,
            config.branch_blocks,
            &mut rng,
        );
        let limb_out = Dense::new(&mut params, "reg.limbs.out", width, 3 * j, &mut rng);
        let grid_centres = Tensor::new(vec![config.grid.cells(), 2], config.grid.cell_centres())?;
        Ok(Self {
            config,
            params,
            encoder,
            loc_out,
            trunk,
            camera_blocks,
            camera_out,
            limb_blocks,
            limb_out,
            grid_centres,
        })
    }

    pub fn config(&self) -> &MrpNetConfig {
        &self.config
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.config.skeleton
    }

    /// Batched forward pass on `obs: [n, R R]` (row-major images).
    pub fn forward(&self, g: &mut Graph, obs: Var) -> Result<ForwardVars> {
        let shape = g.shape(obs).to_vec();
        if shape.len() != 2 || shape[1] != self.config.obs_dim() {
            return Err(Error::Shape(format!(
                "observation batch {shape:?}, expected [n, {}]",
                self.config.obs_dim()
            )));
        }
        let n = shape[0];
        let j = self.config.joints();
        let cells = self.config.grid.cells();

        let mut x = obs;
        for layer in &self.encoder {
            let y = layer.forward(g, x)?;
            x = g.relu(y);
        }
        let features = x;

        let logits = self.loc_out.forward(g, features)?;
        let logits = g.reshape(logits, vec![n * j, cells])?;
        let heatmaps = g.softmax_rows(logits);
        let grid = g.constant(self.grid_centres.clone());
        let localized = g.matmul(heatmaps, grid)?;
        let localized = g.reshape(localized, vec![n, 2 * j])?;

        let trunk = self.trunk.forward(g, features)?;
        let cam = self.camera_blocks.forward(g, trunk)?;
        let cam = self.camera_out.forward(g, cam)?;
        let angles = g.slice_cols(cam, 0, 3)?;
        let raw_scale = g.slice_cols(cam, 3, 4)?;
        let scale = g.softplus(raw_scale);
        let scale = g.add_scalar(scale, SCALE_FLOOR);
        let translation = g.slice_cols(cam, 4, 6)?;

        let limb = self.limb_blocks.forward(g, trunk)?;
        let raw_limbs = self.limb_out.forward(g, limb)?;
        let limbs = normalize_limbs_op(g, raw_limbs, j);
        let pose_canonical = forward_kinematics_op(g, limbs, self.tree());
        let pose_camera = rotate_op(g, angles, pose_canonical);
        let projected = project_op(g, pose_camera, scale, translation);

        Ok(ForwardVars {
            batch: n,
            features,
            heatmaps,
            localized,
            raw_limbs,
            limbs,
            angles,
            scale,
            translation,
            pose_canonical,
            pose_camera,
            projected,
        })
    }

    /// Reads the per-sample outputs of a forward pass.
    pub fn collect_outputs(&self, g: &Graph, v: &ForwardVars) -> Result<Vec<NetworkOutputs>> {
        let j = self.config.joints();
        let cells = self.config.grid.cells();
        let hm = g.value(v.heatmaps);
        let (loc, limbs, pc, p, proj) = (
            g.value(v.localized),
            g.value(v.limbs),
            g.value(v.pose_canonical),
            g.value(v.pose_camera),
            g.value(v.projected),
        );
        let (ang, sc, tr) = (g.value(v.angles), g.value(v.scale), g.value(v.translation));
        (0..v.batch)
            .map(|s| {
                let heatmaps = Heatmap::from_pdfs(
                    j,
                    self.config.grid,
                    hm[s * j * cells..(s + 1) * j * cells].to_vec(),
                )?;
                let confidences = joint_confidence(&heatmaps);
                Ok(NetworkOutputs {
                    heatmaps,
                    localized: Pose2D::from_flat(&loc[s * 2 * j..(s + 1) * 2 * j]),
                    confidences,
                    limbs: LocalLimbVectors::from_flat(&limbs[s * 3 * j..(s + 1) * 3 * j]),
                    camera: CameraParams {
                        euler: [ang[3 * s], ang[3 * s + 1], ang[3 * s + 2]],
                        scale: sc[s],
                        translation: [tr[2 * s], tr[2 * s + 1]],
                    },
                    pose_canonical: CanonicalPose3D::from_flat(&pc[s * 3 * j..(s + 1) * 3 * j]),
                    pose_camera: CameraPose3D::from_flat(&p[s * 3 * j..(s + 1) * 3 * j]),
                    projected: Pose2D::from_flat(&proj[s * 2 * j..(s + 1) * 2 * j]),
                })
            })
            .collect()
    }

    /// Inference on a batch of flattened images.
    pub fn predict(&self, images: &[&[f64]]) -> Result<Vec<NetworkOutputs>> {
        let mut out = Vec::with_capacity(images.len());
        // Bounded graph size keeps memory flat for large evaluation sets.
        for chunk in images.chunks(64) {
            let mut g = Graph::new(&self.params);
            let obs = g.constant(batch_tensor(chunk, self.config.obs_dim())?);
            let v = self.forward(&mut g, obs)?;
            out.extend(self.collect_outputs(&g, &v)?);
        }
        Ok(out)
    }

    /// Writes `<stem>.json`/`<stem>.bin` parameters and `<stem>.config.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.params.save(stem)?;
        let cfg = config_path(stem);
        std::fs::write(&cfg, serde_json::to_vec_pretty(&self.config)?)
            .map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let cfg = config_path(stem);
        let config: MrpNetConfig =
            serde_json::from_slice(&std::fs::read(&cfg).map_err(|e| Error::io(&cfg, e))?)?;
        let mut net = Self::new(config, 0)?;
        net.params = adopt(&net.params, ParamStore::load(stem)?)?;
        Ok(net)
    }
}

fn config_path(stem: &Path) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".config.json");
    s.into()
}

/// Accepts `loaded` only if it has the same parameter layout as `fresh`.
fn adopt(fresh: &ParamStore, loaded: ParamStore) -> Result<ParamStore> {
    let same = fresh.len() == loaded.len()
        && fresh
            .iter()
            .zip(loaded.iter())
            .all(|((_, a), (_, b))| a.name == b.name && a.value.shape() == b.value.shape());
    if !same {
        return Err(Error::Invariant(
            "checkpoint does not match the model layout".into(),
        ));
    }
    Ok(loaded)
}

/// Stacks equally sized rows into a `[n, dim]` tensor.
pub fn batch_tensor(rows: &[&[f64]], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::Shape(format!(
                "row of {} values, expected {dim}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(vec![rows.len(), dim], data)?)
}

// ---------------------------------------------------------------------------
// Kinematic ops

struct NormalizeLimbs {
    joints: usize,
}

impl BackwardRule for NormalizeLimbs {
    fn name(&self) -> &'static str {
        "normalize_limbs"
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad: &[f64]) -> Vec<Vec<f64>> {
        let raw = inputs[0];
        let mut dr = vec![0.0; raw.len()];
        for (row, ((r, y), (gr, d))) in raw
            .chunks(3)
            .zip(output.chunks(3))
            .zip(grad.chunks(3).zip(dr.chunks_mut(3)))
            .enumerate()
        {
            if row % self.joints == 0 {
                continue;
            }
            let r = Vector3::new(r[0], r[1], r[2]);
            let y = Vector3::new(y[0], y[1], y[2]);
            let gv = Vector3::new(gr[0], gr[1], gr[2]);
            let n = r.norm();
            let out = if n > NORM_EPS {
                (gv - y * y.dot(&gv)) / n
            } else {
                gv / NORM_EPS
            };
            d.copy_from_slice(out.as_slice());
        }
        vec![dr]
    }
}

/// Row-wise unit limb vectors; the root row of every sample is zero.
pub fn normalize_limbs_op(g: &mut Graph, raw: Var, joints: usize) -> Var {
    let shape = g.shape(raw).to_vec();
    let out: Vec<f64> = g
        .value(raw)
        .chunks(3)
        .enumerate()
        .flat_map(|(row, r)| {
            if row % joints == 0 {
                [0.0; 3]
            } else {
                let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
                    .sqrt()
                    .max(NORM_EPS);
                [r[0] / n, r[1] / n, r[2] / n]
            }
        })
        .collect();
    let t = Tensor::new(shape, out).expect("same shape as input");
    g.custom(&[raw], t, Box::new(NormalizeLimbs { joints }))
}

struct ForwardKinematics {
    parents: Vec<usize>,
    order: Vec<usize>,
    lengths: Vec<f64>,
}

impl BackwardRule for ForwardKinematics {
    fn name(&self) -> &'static str {
        "forward_kinematics"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], grad: &[f64]) -> Vec<Vec<f64>> {
        let j = self.parents.len();
        let mut dl = vec![0.0; grad.len()];
        for (gs, ds) in grad.chunks(3 * j).zip(dl.chunks_mut(3 * j)) {
            // Subtree sums of the position gradients, leaves first.
            let mut acc: Vec<Vector3<f64>> = gs.chunks(3).map(Vector3::from_column_slice).collect();
            for &k in self.order.iter().rev() {
                let p = self.parents[k];
                if p != k {
                    let a = acc[k];
                    acc[p] += a;
                    ds[3 * k..3 * k + 3].copy_from_slice((self.lengths[k] * a).as_slice());
                }
            }
        }
        vec![dl]
    }
}

/// Joint positions from unit limb vectors, `[n, 3J] -> [n, 3J]`.
pub fn forward_kinematics_op(g: &mut Graph, limbs: Var, tree: &KinematicTree) -> Var {
    let j = tree.joint_count();
    let shape = g.shape(limbs).to_vec();
    let mut out = vec![0.0; g.value(limbs).len()];
    for (ls, ps) in g.value(limbs).chunks(3 * j).zip(out.chunks_mut(3 * j)) {
        for &k in tree.order() {
            let p = tree.parent(k);
            if p != k {
                for c in 0..3 {
                    ps[3 * k + c] = ps[3 * p + c] + tree.bone_length(k) * ls[3 * k + c];
                }
            }
        }
    }
    let rule = ForwardKinematics {
        parents: tree.parents().to_vec(),
        order: tree.order().to_vec(),
        lengths: tree.bone_lengths().to_vec(),
    };
    g.custom(
        &[limbs],
        Tensor::new(shape, out).expect("same shape"),
        Box::new(rule),
    )
}

struct Rotate;

impl BackwardRule for Rotate {
    fn name(&self) -> &'static str {
        "camera_rotate"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad: &[f64]) -> Vec<Vec<f64>> {
        let (angles, pose) = (inputs[0], inputs[1]);
        let n = angles.len() / 3;
        let per = pose.len() / n.max(1);
        let mut da = vec![0.0; angles.len()];
        let mut dp = vec![0.0; pose.len()];
        for s in 0..n {
            let e = [angles[3 * s], angles[3 * s + 1], angles[3 * s + 2]];
            let rt = euler_to_rotation(e).transpose();
            let jac = euler_rotation_jacobian(e);
            let range = s * per..(s + 1) * per;
            for ((pc, gv), d) in pose[range.clone()]
                .chunks(3)
                .zip(grad[range.clone()].chunks(3))
                .zip(dp[range].chunks_mut(3))
            {
                let pc = Vector3::from_column_slice(pc);
                let gv = Vector3::from_column_slice(gv);
                d.copy_from_slice((rt * gv).as_slice());
                for k in 0..3 {
                    da[3 * s + k] += gv.dot(&(jac[k] * pc));
                }
            }
        }
        vec![da, dp]
    }
}

/// Per-sample rotation `R(angles) p` of every joint.
pub fn rotate_op(g: &mut Graph, angles: Var, pose: Var) -> Var {
    let shape = g.shape(pose).to_vec();
    let a = g.value(angles);
    let n = a.len() / 3;
    let per = g.value(pose).len() / n.max(1);
    let mut out = Vec::with_capacity(g.value(pose).len());
    for s in 0..n {
        let r: Matrix3<f64> = euler_to_rotation([a[3 * s], a[3 * s + 1], a[3 * s + 2]]);
        for c in g.value(pose)[s * per..(s + 1) * per].chunks(3) {
            out.extend_from_slice((r * Vector3::from_column_slice(c)).as_slice());
        }
    }
    g.custom(
        &[angles, pose],
        Tensor::new(shape, out).expect("same shape"),
        Box::new(Rotate),
    )
}

struct Project;

impl BackwardRule for Project {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad: &[f64]) -> Vec<Vec<f64>> {
        let (pose, scale) = (inputs[0], inputs[1]);
        let n = scale.len();
        let per = pose.len() / n.max(1) / 3;
        let mut dp = vec![0.0; pose.len()];
        let mut ds = vec![0.0; n];
        let mut dt = vec![0.0; 2 * n];
        for s in 0..n {
            for k in 0..per {
                let (pi, gi) = (3 * (s * per + k), 2 * (s * per + k));
                for c in 0..2 {
                    dp[pi + c] = scale[s] * grad[gi + c];
                    ds[s] += pose[pi + c] * grad[gi + c];
                    dt[2 * s + c] += grad[gi + c];
                }
            }
        }
        vec![dp, ds, dt]
    }
}

/// Scaled orthographic projection, `[n, 3J] -> [n, 2J]`.
pub fn project_op(g: &mut Graph, pose: Var, scale: Var, translation: Var) -> Var {
    let n = g.shape(pose)[0];
    let p = g.value(pose);
    let (s, t) = (g.value(scale), g.value(translation));
    let per = p.len() / n.max(1) / 3;
    let mut out = Vec::with_capacity(2 * n * per);
    for b in 0..n {
        for k in 0..per {
            let i = 3 * (b * per + k);
            out.push(s[b] * p[i] + t[2 * b]);
            out.push(s[b] * p[i + 1] + t[2 * b + 1]);
        }
    }
    let t = Tensor::new(vec![n, 2 * per], out).expect("projection shape");
    g.custom(&[pose, scale, translation], t, Box::new(Project))
}

// ---------------------------------------------------------------------------
// Fusion

/// Maps `(p, q_loc, w)` to a refined camera-frame 3D pose.
#[derive(Clone, Debug)]
pub struct FusionNet {
    joints: usize,
    pub params: ParamStore,
    input: Dense,
    blocks: Stack,
    output: Dense,
}

impl FusionNet {
    pub fn new(joints: usize, width: usize, blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let input = Dense::new(&mut params, "fusion.in", 6 * joints, width, &mut rng);
        let blocks = Stack::new(&mut params, "fusion.block", width, blocks, &mut rng);
        let output = Dense::new(&mut params, "fusion.out", width, 3 * joints, &mut rng);
        Self {
            joints,
            params,
            input,
            blocks,
            output,
        }
    }

    pub fn for_config(config: &MrpNetConfig, seed: u64) -> Self {
        Self::new(
            config.joints(),
            config.fusion_width,
            config.fusion_blocks,
            seed,
        )
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Re-initialises the weights so that the output equals the `p` part of
    /// the input. Hidden units beyond `3J` keep their random input weights
    /// but start disconnected from the output.
    pub fn set_pass_through(&mut self) -> Result<()> {
        let d = 3 * self.joints;
        let width = self.input.fan_out;
        if width < d {
            return Err(Error::Config(format!(
                "fusion width {width} below pose size {d}"
            )));
        }
        let w_in = self.params.get_mut(self.input.weight).value.data_mut();
        for r in 0..6 * self.joints {
            for c in 0..d {
                w_in[r * width + c] = if r == c { 1.0 } else { 0.0 };
            }
        }
        for b in &self.blocks.blocks {
            self.params.get_mut(b.fc2.weight).value.data_mut().fill(0.0);
            self.params.get_mut(b.fc2.bias).value.data_mut().fill(0.0);
        }
        let w_out = self.params.get_mut(self.output.weight).value.data_mut();
        w_out.fill(0.0);
        for i in 0..d {
            w_out[i * d + i] = 1.0;
        }
        self.params
            .get_mut(self.output.bias)
            .value
            .data_mut()
            .fill(0.0);
        Ok(())
    }

    /// `input: [n, 6J]` holding `p` (3J), `q_loc` (2J) and `w` (J) per row.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 2 || s[1] != 6 * self.joints {
            return Err(Error::Shape(format!(
                "fusion input {s:?}, expected [n, {}]",
                6 * self.joints
            )));
        }
        let h = self.input.forward(g, input)?;
        let h = self.blocks.forward(g, h)?;
        Ok(self.output.forward(g, h)?)
    }

    /// Concatenated fusion input row for one sample.
    pub fn input_row(out: &NetworkOutputs) -> Vec<f64> {
        let mut row = out.pose_camera.to_flat();
        row.extend(out.localized.to_flat());
        row.extend(&out.confidences.w);
        row
    }

    pub fn predict(&self, outputs: &[NetworkOutputs]) -> Result<Vec<CameraPose3D>> {
        let rows: Vec<Vec<f64>> = outputs.iter().map(Self::input_row).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut res = Vec::with_capacity(rows.len());
        for chunk in refs.chunks(256) {
            let mut g = Graph::new(&self.params);
            let x = g.constant(batch_tensor(chunk, 6 * self.joints)?);
            let y = self.forward(&mut g, x)?;
            res.extend(
                g.value(y)
                    .chunks(3 * self.joints)
                    .map(CameraPose3D::from_flat),
            );
        }
        Ok(res)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        Ok(self.params.save(stem)?)
    }

    pub fn load(stem: &Path, joints: usize, width: usize, blocks: usize) -> Result<Self> {
        let mut f = Self::new(joints, width, blocks, 0);
        f.params = adopt(&f.params, ParamStore::load(stem)?)?;
        Ok(f)
    }
}

/// Mean over `n J` joints of the 2D distance between two `[n, 2J]` nodes.
pub fn mean_joint_distance_2d(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let n = g.shape(a)[0];
    let cols = g.shape(a)[1];
    let d = g.sub(a, b)?;
    let d2 = g.square(d);
    let d2 = g.reshape(d2, vec![n * cols / 2, 2])?;
    let sq = g.sum_rows(d2);
    let dist = g.sqrt(sq);
    Ok(g.mean(dist))
}
