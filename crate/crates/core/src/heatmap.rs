//! Per-joint spatial probability maps.
//!
//! Cell `(i, k)` of an `H x W` grid has its centre at normalised image
//! coordinates `((i + 0.5) / H, (k + 0.5) / W)`, row first. Mirroring an
//! image reverses the column axis.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::skeleton::Pose2D;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub const DEFAULT: GridDims = GridDims {
        height: 16,
        width: 16,
    };

    pub fn cells(self) -> usize {
        self.height * self.width
    }

    /// `ln(H W)`, the entropy of the uniform map.
    pub fn max_entropy(self) -> f64 {
        (self.cells() as f64).ln()
    }

    /// Row-major `[H W, 2]` table of cell centres.
    pub fn cell_centres(self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.cells());
        for i in 0..self.height {
            for k in 0..self.width {
                out.push((i as f64 + 0.5) / self.height as f64);
                out.push((k as f64 + 0.5) / self.width as f64);
            }
        }
        out
    }
}

impl Default for GridDims {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// `J` stacked PDFs over an `H x W` grid, stored joint-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    dims: GridDims,
    joints: usize,
    values: Vec<f64>,
}

impl Heatmap {
    /// Wraps values that already form per-joint PDFs.
    pub fn from_pdfs(joints: usize, dims: GridDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != joints * dims.cells() || dims.cells() == 0 {
            return Err(Error::Shape(format!(
                "{} heatmap values for {joints} joints on {}x{}",
                values.len(),
                dims.height,
                dims.width
            )));
        }
        let h = Self {
            dims,
            joints,
            values,
        };
        for j in 0..joints {
            let s = h.slice(j);
            let total: f64 = s.iter().sum();
            if s.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Invariant(format!("heatmap slice {j} is not a PDF")));
            }
        }
        Ok(h)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let n = self.dims.cells();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfidences {
    pub w: Vec<f64>,
}

/// Per-joint softmax over all cells of the grid.
pub fn spatial_softmax(joints: usize, dims: GridDims, logits: &[f64]) -> Result<Heatmap> {
    let n = dims.cells();
    if logits.len() != joints * n || n == 0 {
        return Err(Error::Shape(format!(
            "{} logits for {joints} joints on {}x{}",
            logits.len(),
            dims.height,
            dims.width
        )));
    }
    let mut values = logits.to_vec();
    for row in values.chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Heatmap {
        dims,
        joints,
        values,
    })
}

/// Expected cell centre of each joint's PDF.
pub fn soft_argmax(h: &Heatmap) -> Pose2D {
    let centres = h.dims.cell_centres();
    Pose2D {
        coords: (0..h.joints)
            .map(|j| {
                h.slice(j)
                    .iter()
                    .zip(centres.chunks_exact(2))
                    .fold(Vector2::zeros(), |acc, (&p, c)| {
                        acc + p * Vector2::new(c[0], c[1])
                    })
            })
            .collect(),
    }
}

/// Peak probability of each joint's PDF.
pub fn joint_confidence(h: &Heatmap) -> JointConfidences {
    JointConfidences {
        w: (0..h.joints)
            .map(|j| h.slice(j).iter().copied().fold(0.0, f64::max))
            .collect(),
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn pdf_entropy(pdf: &[f64]) -> f64 {
    -pdf.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn entropy(h: &Heatmap, j: usize) -> f64 {
    pdf_entropy(h.slice(j))
}

pub fn entropies(h: &Heatmap) -> Vec<f64> {
    (0..h.joints).map(|j| entropy(h, j)).collect()
}

/// Isotropic Gaussian at each joint, evaluated at cell centres and
/// renormalised. `sigma` is in cells. Joints far outside the frame still
/// yield a valid PDF concentrated on the nearest border cells.
pub fn render_gaussian_heatmap(q: &Pose2D, dims: GridDims, sigma: f64) -> Result<Heatmap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let joints = q.joint_count();
    let mut logits = Vec::with_capacity(joints * dims.cells());
    let inv = 1.0 / (2.0 * sigma * sigma);
    for c in &q.coords {
        // Distances measured in cells.
        let (ci, ck) = (
            c.x * dims.height as f64 - 0.5,
            c.y * dims.width as f64 - 0.5,
        );
        for i in 0..dims.height {
            for k in 0..dims.width {
                let (di, dk) = (i as f64 - ci, k as f64 - ck);
                logits.push(-(di * di + dk * dk) * inv);
            }
        }
    }
    // Log-domain normalisation keeps far-away joints finite.
    spatial_softmax(joints, dims, &logits)
}

/// Permutes a per-joint array by the left/right swap.
pub fn flip_joint_ids<T: Clone>(x: &[T], lr_swap: &[usize]) -> Vec<T> {
    lr_swap.iter().map(|&s| x[s].clone()).collect()
}

/// Mirrored image coordinates: column `y -> 1 - y`, joints swapped.
pub fn flip_pose2d(q: &Pose2D, lr_swap: &[usize]) -> Pose2D {
    Pose2D {
        coords: lr_swap
            .iter()
            .map(|&s| Vector2::new(q.coords[s].x, 1.0 - q.coords[s].y))
            .collect(),
    }
}

/// Reverses the column axis of every slice and swaps joints.
pub fn flip_heatmap(h: &Heatmap, lr_swap: &[usize]) -> Heatmap {
    let GridDims { height, width } = h.dims;
    let mut values = Vec::with_capacity(h.values.len());
    for &s in lr_swap {
        let src = h.slice(s);
        for i in 0..height {
            values.extend((0..width).rev().map(|k| src[i * width + k]));
        }
    }
    Heatmap {
        dims: h.dims,
        joints: h.joints,
        values,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpSidecar {
    joints: usize,
    height: usize,
    width: usize,
    joint_names: Vec<String>,
    dtype: String,
}

/// Writes `<stem>.f32` (little-endian, joint-major) and `<stem>.json`.
pub fn dump_heatmap(stem: &Path, h: &Heatmap, joint_names: &[String]) -> Result<()> {
    let bin = stem.with_extension("f32");
    let mut buf = Vec::with_capacity(4 * h.values.len());
    for &v in &h.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(&bin)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&bin, e))?;
    let side = DumpSidecar {
        joints: h.joints,
        height: h.dims.height,
        width: h.dims.width,
        joint_names: joint_names.to_vec(),
        dtype: "f32le".into(),
    };
    let json = stem.with_extension("json");
    std::fs::write(&json, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&json, e))
}

/// Reads a dump written by [`dump_heatmap`]; slices are renormalised after
/// the round trip through single precision.
pub fn load_heatmap_dump(stem: &Path) -> Result<(Heatmap, Vec<String>)> {
    let json = stem.with_extension("json");
    let side: DumpSidecar =
        serde_json::from_slice(&std::fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    let bin = stem.with_extension("f32");
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let dims = GridDims {
        height: side.height,
        width: side.width,
    };
    if bytes.len() != 4 * side.joints * dims.cells() {
        return Err(Error::Invariant(format!(
            "{} has the wrong size",
            bin.display()
        )));
    }
    let mut values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    for row in values.chunks_mut(dims.cells()) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok((
        Heatmap::from_pdfs(side.joints, dims, values)?,
        side.joint_names,
    ))
}
