//! Procedural toy domains.
//!
//! An observation is a single-channel `R x R` image: a horizontally
//! symmetric background texture plus one Gaussian blob per visible joint.
//! Blob amplitudes are equal within each left/right pair, so mirroring a
//! rendered image equals rendering the mirrored pose.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::heatmap::{flip_heatmap, flip_pose2d, render_gaussian_heatmap, GridDims, Heatmap};
use crate::skeleton::{
    camera_transform, canonicalize, euler_to_rotation, forward_kinematics, mirror_camera_pose,
    rotation_to_euler, CameraParams, CameraPose3D, CanonicalPose3D, KinematicTree,
    LocalLimbVectors, Pose2D,
};
use crate::uncertainty::flip_image;
use crate::{Error, Result};

/// Fraction of the frame kept by a truncation zoom.
pub const TRUNCATION_KEEP: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRange {
    /// Rotation of the body about the vertical axis; zero faces the camera.
    pub yaw: [f64; 2],
    /// Tilt about the horizontal image axis.
    pub elevation: [f64; 2],
    /// In-plane rotation.
    pub roll: [f64; 2],
    pub scale: [f64; 2],
    pub translation_row: [f64; 2],
    pub translation_col: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Drives the per-joint blob amplitudes and the background texture.
    pub appearance_seed: u64,
    pub camera: CameraRange,
    /// Half-angle (radians) of the cone around each rest limb direction.
    pub cone_angle: f64,
    /// Per-joint overrides of `cone_angle`, keyed by joint name.
    #[serde(default)]
    pub cone_overrides: BTreeMap<String, f64>,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Blob radius in pixels.
    pub blob_sigma: f64,
    /// Peak-to-peak range of the background texture.
    pub texture_contrast: f64,
}

impl DomainSpec {
    pub fn default_source() -> Self {
        Self {
            name: "source".into(),
            appearance_seed: 11,
            camera: CameraRange {
                yaw: [-0.5, 0.5],
                elevation: [-0.1, 0.2],
                roll: [-0.1, 0.1],
                scale: [0.44, 0.52],
                translation_row: [0.41, 0.47],
                translation_col: [0.42, 0.58],
            },
            cone_angle: 0.35,
            cone_overrides: BTreeMap::new(),
            noise: 0.02,
            blob_sigma: 1.0,
            texture_contrast: 0.25,
        }
    }

    pub fn default_target() -> Self {
        Self {
            name: "target".into(),
            appearance_seed: 29,
            camera: CameraRange {
                yaw: [-0.6, 0.6],
                elevation: [-0.15, 0.25],
                roll: [-0.15, 0.15],
                scale: [0.40, 0.50],
                translation_row: [0.40, 0.48],
                translation_col: [0.38, 0.62],
            },
            cone_angle: 0.4,
            cone_overrides: BTreeMap::new(),
            noise: 0.03,
            blob_sigma: 1.0,
            texture_contrast: 0.35,
        }
    }

    pub fn default_background() -> Self {
        Self {
            name: "background".into(),
            appearance_seed: 47,
            ..Self::default_source()
        }
    }

    pub fn validate(&self, tree: &KinematicTree) -> Result<()> {
        let c = &self.camera;
        for (name, r) in [
            ("yaw", c.yaw),
            ("elevation", c.elevation),
            ("roll", c.roll),
            ("scale", c.scale),
            ("translation_row", c.translation_row),
            ("translation_col", c.translation_col),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!(
                    "{}: range {name} is invalid",
                    self.name
                )));
            }
        }
        if c.scale[0] <= 0.0 {
            return Err(Error::Config(format!(
                "{}: scale must be positive",
                self.name
            )));
        }
        let cone_ok = |a: f64| (0.0..=PI).contains(&a);
        if !cone_ok(self.cone_angle) || !self.cone_overrides.values().all(|&a| cone_ok(a)) {
            return Err(Error::Config(format!(
                "{}: cone angles must lie in [0, pi]",
                self.name
            )));
        }
        if let Some(bad) = self
            .cone_overrides
            .keys()
            .find(|k| tree.index_of(k).is_none())
        {
            return Err(Error::Config(format!(
                "{}: unknown joint {bad:?}",
                self.name
            )));
        }
        if !(self.noise >= 0.0 && self.blob_sigma > 0.0 && self.texture_contrast >= 0.0) {
            return Err(Error::Config(format!(
                "{}: noise, blob_sigma or contrast invalid",
                self.name
            )));
        }
        Ok(())
    }

    fn cone(&self, tree: &KinematicTree, j: usize) -> f64 {
        self.cone_overrides
            .get(&tree.names()[j])
            .copied()
            .unwrap_or(self.cone_angle)
    }
}

/// Deterministic appearance of a domain: blob amplitudes and background.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub amplitudes: Vec<f64>,
    pub background: Vec<f64>,
}

impl Appearance {
    pub fn new(spec: &DomainSpec, tree: &KinematicTree, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.appearance_seed);
        let mut amplitudes = vec![0.0; tree.joint_count()];
        for j in 0..tree.joint_count() {
            let partner = tree.lr_swap()[j];
            amplitudes[j] = if partner < j {
                amplitudes[partner]
            } else {
                rng.gen_range(0.45..0.95)
            };
        }
        let base = rng.gen_range(0.1..0.3);
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.gen_range(0.5..1.0),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.0..2.0 * PI),
                ]
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w[0]).sum();
        let mid = (size as f64 - 1.0) / 2.0;
        let mut background = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                // Cosine in the distance from the vertical midline is
                // mirror symmetric.
                let v: f64 = waves
                    .iter()
                    .map(|w| {
                        w[0] * (w[1] * r as f64 + w[3]).cos() * (w[2] * (c as f64 - mid)).cos()
                    })
                    .sum::<f64>()
                    / norm;
                background.push(base + 0.5 * spec.texture_contrast * (v + 1.0));
            }
        }
        Self {
            amplitudes,
            background,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub row0: f64,
    pub col0: f64,
    pub row1: f64,
    pub col1: f64,
}

impl Rect {
    /// Closed-interval containment.
    pub fn contains(&self, q: &Vector2<f64>) -> bool {
        q.x >= self.row0 && q.x <= self.row1 && q.y >= self.col0 && q.y <= self.col1
    }

    pub fn area(&self) -> f64 {
        (self.row1 - self.row0).max(0.0) * (self.col1 - self.col0).max(0.0)
    }

    fn mirrored(&self) -> Self {
        Self {
            col0: 1.0 - self.col1,
            col1: 1.0 - self.col0,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Occlusion {
    None,
    Object { rect: Rect },
    Truncation { top: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionMode {
    Object,
    Truncation,
}

impl std::str::FromStr for OcclusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Self::Object),
            "truncation" => Ok(Self::Truncation),
            other => Err(Error::OcclusionMode(other.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub canonical: CanonicalPose3D,
    pub camera: CameraParams,
    pub pose_camera: CameraPose3D,
    pub pose_2d: Pose2D,
    pub heatmaps: Heatmap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Row-major `R x R` image with values in `[0, 1]`.
    pub image: Vec<f64>,
    /// `None` for person-free backgrounds.
    pub gt: Option<GroundTruth>,
    pub visibility: Vec<bool>,
    pub domain: String,
    pub occlusion: Occlusion,
}

impl Sample {
    pub fn gt(&self) -> Result<&GroundTruth> {
        self.gt.as_ref().ok_or(Error::MissingGroundTruth(self.id))
    }

    pub fn is_background(&self) -> bool {
        self.gt.is_none()
    }
}

/// Everything needed to render a domain at a given resolution.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub spec: DomainSpec,
    pub tree: KinematicTree,
    pub image_size: usize,
    pub grid: GridDims,
    pub heatmap_sigma: f64,
    appearance: Appearance,
}

impl Renderer {
    pub fn new(
        spec: DomainSpec,
        tree: KinematicTree,
        image_size: usize,
        grid: GridDims,
        heatmap_sigma: f64,
    ) -> Result<Self> {
        spec.validate(&tree)?;
        if image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        let appearance = Appearance::new(&spec, &tree, image_size);
        Ok(Self {
            spec,
            tree,
            image_size,
            grid,
            heatmap_sigma,
            appearance,
        })
    }

    pub fn appearance(&self) -> &Appearance {
        &self.appearance
    }

    /// Draws limb directions inside the cones, runs FK, canonicalises and
    /// draws a camera that keeps every joint inside the frame.
    pub fn sample_pose(&self, rng: &mut impl Rng) -> Result<(CanonicalPose3D, CameraParams)> {
        let tree = &self.tree;
        let limbs = LocalLimbVectors {
            coords: (0..tree.joint_count())
                .map(|j| {
                    if tree.is_root(j) {
                        Vector3::zeros()
                    } else {
                        sample_in_cone(rng, tree.rest_direction(j), self.spec.cone(tree, j))
                    }
                })
                .collect(),
        };
        let pose = canonicalize(&forward_kinematics(tree, &limbs).coords, tree)?;
        let mut cam = self.sample_camera(rng);
        for _ in 0..100 {
            let (_, q) = camera_transform(&pose, &cam);
            if q.coords.iter().all(|c| in_unit_square(c, 0.02)) {
                break;
            }
            cam = self.sample_camera(rng);
        }
        Ok((pose, cam))
    }

    fn sample_camera(&self, rng: &mut impl Rng) -> CameraParams {
        let c = &self.spec.camera;
        let draw = |rng: &mut dyn rand::RngCore, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.gen_range(r[0]..r[1])
            }
        };
        let yaw = draw(rng, c.yaw);
        let elevation = draw(rng, c.elevation);
        let roll = draw(rng, c.roll);
        let r = view_rotation(yaw, elevation, roll);
        CameraParams {
            euler: rotation_to_euler(&r),
            scale: draw(rng, c.scale),
            translation: [draw(rng, c.translation_row), draw(rng, c.translation_col)],
        }
    }

    /// Noise-free image with a blob for every visible joint.
    pub fn render_clean(&self, q: &Pose2D, visibility: &[bool]) -> Vec<f64> {
        let n = self.image_size;
        let mut img = self.appearance.background.clone();
        let inv = 1.0 / (2.0 * self.spec.blob_sigma * self.spec.blob_sigma);
        for (j, c) in q.coords.iter().enumerate() {
            if !visibility[j] {
                continue;
            }
            let (cr, cc) = (c.x * n as f64 - 0.5, c.y * n as f64 - 0.5);
            let a = self.appearance.amplitudes[j];
            for r in 0..n {
                let dr = r as f64 - cr;
                for k in 0..n {
                    let dk = k as f64 - cc;
                    img[r * n + k] += a * (-(dr * dr + dk * dk) * inv).exp();
                }
            }
        }
        img
    }

    fn finish(&self, mut img: Vec<f64>, rng: &mut impl Rng) -> Vec<f64> {
        let noise = Normal::new(0.0, self.spec.noise.max(0.0)).expect("finite noise");
        for v in &mut img {
            if self.spec.noise > 0.0 {
                *v += noise.sample(rng);
            }
            // Exactly representable in single precision so dataset files
            // round-trip bit for bit.
            *v = v.clamp(0.0, 1.0) as f32 as f64;
        }
        img
    }

    /// Clean render, pixel noise and clamping.
    pub fn render_observation(
        &self,
        q: &Pose2D,
        visibility: &[bool],
        rng: &mut impl Rng,
    ) -> Vec<f64> {
        let clean = self.render_clean(q, visibility);
        self.finish(clean, rng)
    }

    fn ground_truth(
        &self,
        canonical: CanonicalPose3D,
        camera: CameraParams,
    ) -> Result<GroundTruth> {
        let (pose_camera, pose_2d) = camera_transform(&canonical, &camera);
        let heatmaps = render_gaussian_heatmap(&pose_2d, self.grid, self.heatmap_sigma)?;
        Ok(GroundTruth {
            canonical,
            camera,
            pose_camera,
            pose_2d,
            heatmaps,
        })
    }

    /// A full-body sample.
    pub fn make_person(&self, id: usize, rng: &mut impl Rng) -> Result<Sample> {
        let (canonical, camera) = self.sample_pose(rng)?;
        let gt = self.ground_truth(canonical, camera)?;
        let visibility: Vec<bool> = gt
            .pose_2d
            .coords
            .iter()
            .map(|c| in_unit_square(c, 0.0))
            .collect();
        let image = self.render_observation(&gt.pose_2d, &visibility, rng);
        Ok(Sample {
            id,
            image,
            gt: Some(gt),
            visibility,
            domain: self.spec.name.clone(),
            occlusion: Occlusion::None,
        })
    }

    /// A person-free image.
    pub fn make_background(&self, id: usize, rng: &mut impl Rng) -> Sample {
        let j = self.tree.joint_count();
        let image = self.finish(self.appearance.background.clone(), rng);
        Sample {
            id,
            image,
            gt: None,
            visibility: vec![false; j],
            domain: self.spec.name.clone(),
            occlusion: Occlusion::None,
        }
    }

    /// Pastes a random occluder or zooms into the top or bottom of the frame.
    pub fn simulate_occlusion(
        &self,
        sample: &Sample,
        mode: OcclusionMode,
        rng: &mut impl Rng,
    ) -> Result<Sample> {
        match mode {
            OcclusionMode::Object => {
                let h = rng.gen_range(0.2..0.6);
                let w = rng.gen_range(0.2..0.6);
                let row0 = rng.gen_range(0.0..1.0 - h);
                let col0 = rng.gen_range(0.0..1.0 - w);
                let rect = Rect {
                    row0,
                    col0,
                    row1: row0 + h,
                    col1: col0 + w,
                };
                self.occlude_with(sample, rect, rng)
            }
            OcclusionMode::Truncation => self.truncate(sample, rng.gen_bool(0.5), rng),
        }
    }

    /// Object occlusion with a given rectangle.
    pub fn occlude_with(&self, sample: &Sample, rect: Rect, rng: &mut impl Rng) -> Result<Sample> {
        let gt = sample.gt()?;
        let visibility: Vec<bool> = gt
            .pose_2d
            .coords
            .iter()
            .map(|c| in_unit_square(c, 0.0) && !(rect.area() > 0.0 && rect.contains(c)))
            .collect();
        let mut img = self.render_clean(&gt.pose_2d, &visibility);
        if rect.area() > 0.0 {
            paint_occluder(&mut img, self.image_size, &rect, rng);
        }
        Ok(Sample {
            image: self.finish(img, rng),
            visibility,
            occlusion: Occlusion::Object { rect },
            ..sample.clone()
        })
    }

    /// Zooms into the top (`top`) or bottom part of the frame.
    pub fn truncate(&self, sample: &Sample, top: bool, rng: &mut impl Rng) -> Result<Sample> {
        let gt = sample.gt()?;
        let origin = truncation_origin(top);
        let clean = self.render_clean(&gt.pose_2d, &sample.visibility);
        let zoomed = resample_window(&clean, self.image_size, origin, TRUNCATION_KEEP);
        let camera = CameraParams {
            scale: gt.camera.scale / TRUNCATION_KEEP,
            translation: [
                (gt.camera.translation[0] - origin.x) / TRUNCATION_KEEP,
                (gt.camera.translation[1] - origin.y) / TRUNCATION_KEEP,
            ],
            ..gt.camera
        };
        let new_gt = self.ground_truth(gt.canonical.clone(), camera)?;
        let visibility = new_gt
            .pose_2d
            .coords
            .iter()
            .zip(&sample.visibility)
            .map(|(c, &v)| v && in_unit_square(c, 0.0))
            .collect();
        Ok(Sample {
            image: self.finish(zoomed, rng),
            gt: Some(new_gt),
            visibility,
            occlusion: Occlusion::Truncation { top },
            ..sample.clone()
        })
    }

    /// Mirror image with left/right-swapped ground truth.
    pub fn flip_observation(&self, sample: &Sample) -> Sample {
        let swap = self.tree.lr_swap();
        let gt = sample.gt.as_ref().map(|gt| {
            let e = gt.camera.euler;
            let m = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
            GroundTruth {
                canonical: CanonicalPose3D {
                    coords: swap.iter().map(|&s| m * gt.canonical.coords[s]).collect(),
                },
                camera: CameraParams {
                    euler: [-e[0], e[1], -e[2]],
                    scale: gt.camera.scale,
                    translation: [gt.camera.translation[0], 1.0 - gt.camera.translation[1]],
                },
                pose_camera: mirror_camera_pose(&gt.pose_camera, &self.tree),
                pose_2d: flip_pose2d(&gt.pose_2d, swap),
                heatmaps: flip_heatmap(&gt.heatmaps, swap),
            }
        });
        let occlusion = match sample.occlusion {
            Occlusion::Object { rect } => Occlusion::Object {
                rect: rect.mirrored(),
            },
            other => other,
        };
        Sample {
            id: sample.id,
            image: flip_image(&sample.image, self.image_size),
            gt,
            visibility: swap.iter().map(|&s| sample.visibility[s]).collect(),
            domain: sample.domain.clone(),
            occlusion,
        }
    }

    /// `n` samples; sample `i` is drawn from its own stream of `seed`.
    pub fn build_dataset(&self, n: usize, mix: OcclusionMix, seed: u64) -> Result<Dataset> {
        mix.validate()?;
        let samples = (0..n)
            .map(|i| {
                let mut rng = stream_rng(seed, i);
                if mix.background {
                    return Ok(self.make_background(i, &mut rng));
                }
                let s = self.make_person(i, &mut rng)?;
                let u: f64 = rng.gen();
                if u < mix.object {
                    self.simulate_occlusion(&s, OcclusionMode::Object, &mut rng)
                } else if u < mix.object + mix.truncation {
                    self.simulate_occlusion(&s, OcclusionMode::Truncation, &mut rng)
                } else {
                    Ok(s)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            image_size: self.image_size,
            grid: self.grid,
            heatmap_sigma: self.heatmap_sigma,
            joint_names: self.tree.names().to_vec(),
            samples,
        })
    }
}

/// Fractions of object-occluded and truncated samples, or a
/// background-only set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionMix {
    #[serde(default)]
    pub object: f64,
    #[serde(default)]
    pub truncation: f64,
    #[serde(default)]
    pub background: bool,
}

impl OcclusionMix {
    pub fn validate(&self) -> Result<()> {
        if !(self.object >= 0.0 && self.truncation >= 0.0 && self.object + self.truncation <= 1.0) {
            return Err(Error::Config(
                "occlusion fractions must be non-negative and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

/// Independent per-index generator derived from a base seed.
pub fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn in_unit_square(c: &Vector2<f64>, margin: f64) -> bool {
    c.x >= margin && c.x <= 1.0 - margin && c.y >= margin && c.y <= 1.0 - margin
}

/// Body yaw about the canonical vertical, elevation about the horizontal
/// axis, the frontal view, and a final in-plane roll.
pub fn view_rotation(yaw: f64, elevation: f64, roll: f64) -> Matrix3<f64> {
    // Frontal view: image down is canonical -Z, image right is canonical +Y.
    let front = euler_to_rotation([0.0, -PI / 2.0, 0.0]);
    euler_to_rotation([roll, 0.0, 0.0])
        * front
        * euler_to_rotation([0.0, elevation, 0.0])
        * euler_to_rotation([yaw, 0.0, 0.0])
}

fn sample_in_cone(rng: &mut impl Rng, axis: Vector3<f64>, half_angle: f64) -> Vector3<f64> {
    if half_angle == 0.0 {
        return axis;
    }
    let cos_a = 1.0 - rng.gen::<f64>() * (1.0 - half_angle.cos());
    let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
    let phi = rng.gen_range(0.0..2.0 * PI);
    let helper = if axis.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (cos_a * axis + sin_a * (phi.cos() * u + phi.sin() * v)).normalize()
}

fn truncation_origin(top: bool) -> Vector2<f64> {
    let row = if top { 0.0 } else { 1.0 - TRUNCATION_KEEP };
    Vector2::new(row, (1.0 - TRUNCATION_KEEP) / 2.0)
}

/// Bilinear resampling of the square window at `origin` with side `keep`
/// (normalised units) to the full resolution.
pub fn resample_window(img: &[f64], n: usize, origin: Vector2<f64>, keep: f64) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        img[r * n + c]
    };
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let x = (origin.x + keep * (r as f64 + 0.5) / n as f64) * n as f64 - 0.5;
            let y = (origin.y + keep * (c as f64 + 0.5) / n as f64) * n as f64 - 0.5;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out.push(
                (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                    + (1.0 - fx) * fy * at(x0, y0 + 1)
                    + fx * (1.0 - fy) * at(x0 + 1, y0)
                    + fx * fy * at(x0 + 1, y0 + 1),
            );
        }
    }
    out
}

/// Opaque striped rectangle covering every pixel whose centre lies inside.
fn paint_occluder(img: &mut [f64], n: usize, rect: &Rect, rng: &mut impl Rng) {
    let base = rng.gen_range(0.2..0.8);
    let amp = rng.gen_range(0.0..0.2);
    let freq = rng.gen_range(0.5..2.0);
    let vertical = rng.gen_bool(0.5);
    for r in 0..n {
        for c in 0..n {
            let centre = Vector2::new((r as f64 + 0.5) / n as f64, (c as f64 + 0.5) / n as f64);
            if rect.contains(&centre) {
                let t = if vertical { c } else { r } as f64;
                img[r * n + c] = base + amp * (freq * t).sin();
            }
        }
    }
}

/// A generated set of samples with its rendering metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub grid: GridDims,
    pub heatmap_sigma: f64,
    pub joint_names: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    image_size: usize,
    grid: GridDims,
    heatmap_sigma: f64,
    joint_names: Vec<String>,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    id: usize,
    domain: String,
    occlusion: Occlusion,
    visibility: Vec<bool>,
    camera: Option<CameraParams>,
}

const BLOBS: [&str; 5] = ["images", "canonical", "pose_camera", "pose_2d", "heatmaps"];

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.image.as_slice()).collect()
    }

    /// Writes `manifest.json` and one little-endian f32 file per array.
    /// Arrays hold rows only for samples with ground truth.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            image_size: self.image_size,
            grid: self.grid,
            heatmap_sigma: self.heatmap_sigma,
            joint_names: self.joint_names.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleEntry {
                    id: s.id,
                    domain: s.domain.clone(),
                    occlusion: s.occlusion,
                    visibility: s.visibility.clone(),
                    camera: s.gt.as_ref().map(|g| g.camera),
                })
                .collect(),
        };
        let mut blobs: [Vec<u8>; 5] = Default::default();
        for s in &self.samples {
            put_f32(&mut blobs[0], &s.image);
            if let Some(g) = &s.gt {
                put_f32(&mut blobs[1], &g.canonical.to_flat());
                put_f32(&mut blobs[2], &g.pose_camera.to_flat());
                put_f32(&mut blobs[3], &g.pose_2d.to_flat());
                put_f32(&mut blobs[4], g.heatmaps.values());
            }
        }
        for (name, bytes) in BLOBS.iter().zip(&blobs) {
            let p = dir.join(format!("{name}.f32"));
            std::fs::File::create(&p)
                .and_then(|mut f| f.write_all(bytes))
                .map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
    }

    /// Loads a dataset and checks it against `tree`.
    ///
    /// Camera-frame poses, 2D poses and heatmaps are recomputed in double
    /// precision from the canonical pose and camera; the stored arrays must
    /// agree to single-precision accuracy.
    pub fn load(dir: &Path, tree: &KinematicTree) -> Result<Self> {
        let p = dir.join("manifest.json");
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        if manifest.joint_names != tree.names() {
            return Err(Error::Invariant(
                "dataset joints differ from the skeleton".into(),
            ));
        }
        let mut arrays = Vec::new();
        for name in BLOBS {
            let p = dir.join(format!("{name}.f32"));
            arrays.push(get_f32(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?);
        }
        let n = manifest.image_size * manifest.image_size;
        let j = tree.joint_count();
        let cells = manifest.grid.cells();
        let with_gt = manifest
            .samples
            .iter()
            .filter(|s| s.camera.is_some())
            .count();
        let expect = [
            manifest.samples.len() * n,
            with_gt * 3 * j,
            with_gt * 3 * j,
            with_gt * 2 * j,
            with_gt * j * cells,
        ];
        for ((name, a), e) in BLOBS.iter().zip(&arrays).zip(expect) {
            if a.len() != e {
                return Err(Error::Invariant(format!(
                    "{name}.f32 holds {} values, expected {e}",
                    a.len()
                )));
            }
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let mut k = 0;
        for (i, e) in manifest.samples.into_iter().enumerate() {
            let image = arrays[0][i * n..(i + 1) * n].to_vec();
            if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invariant(format!(
                    "sample {} has pixels outside [0, 1]",
                    e.id
                )));
            }
            if e.visibility.len() != j {
                return Err(Error::Invariant(format!(
                    "sample {} visibility length",
                    e.id
                )));
            }
            let gt = match e.camera {
                None => {
                    if e.visibility.iter().any(|&v| v) {
                        return Err(Error::Invariant(format!(
                            "background {} has visible joints",
                            e.id
                        )));
                    }
                    None
                }
                Some(camera) => {
                    if camera.scale.is_nan() || camera.scale <= 0.0 {
                        return Err(Error::Invariant(format!("sample {} camera scale", e.id)));
                    }
                    let canonical =
                        CanonicalPose3D::from_flat(&arrays[1][k * 3 * j..(k + 1) * 3 * j]);
                    let (pose_camera, pose_2d) = camera_transform(&canonical, &camera);
                    let heatmaps =
                        render_gaussian_heatmap(&pose_2d, manifest.grid, manifest.heatmap_sigma)?;
                    let close =
                        |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-4);
                    if !close(
                        &pose_camera.to_flat(),
                        &arrays[2][k * 3 * j..(k + 1) * 3 * j],
                    ) || !close(&pose_2d.to_flat(), &arrays[3][k * 2 * j..(k + 1) * 2 * j])
                        || !close(
                            heatmaps.values(),
                            &arrays[4][k * j * cells..(k + 1) * j * cells],
                        )
                    {
                        return Err(Error::Invariant(format!(
                            "sample {} ground truth is inconsistent",
                            e.id
                        )));
                    }
                    for (c, &v) in pose_2d.coords.iter().zip(&e.visibility) {
                        if v && !in_unit_square(c, -1e-4) {
                            return Err(Error::Invariant(format!(
                                "sample {} marks an off-frame joint visible",
                                e.id
                            )));
                        }
                    }
                    k += 1;
                    Some(GroundTruth {
                        canonical,
                        camera,
                        pose_camera,
                        pose_2d,
                        heatmaps,
                    })
                }
            };
            samples.push(Sample {
                id: e.id,
                image,
                gt,
                visibility: e.visibility,
                domain: e.domain,
                occlusion: e.occlusion,
            });
        }
        Ok(Self {
            image_size: manifest.image_size,
            grid: manifest.grid,
            heatmap_sigma: manifest.heatmap_sigma,
            joint_names: manifest.joint_names,
            samples,
        })
    }
}

fn put_f32(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn get_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Invariant(
            "f32 array length is not a multiple of 4".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}
