//! Held-out evaluation, AUROC and histogram reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::heatmap::entropies;
use crate::model::{FusionNet, MrpNet, NetworkOutputs};
use crate::skeleton::{mpjpe, mpjpe_masked, pa_mpjpe, CameraPose3D};
use crate::synthdata::Dataset;
use crate::uncertainty::pose_uncertainty;
use crate::{Error, Result};

/// Held-out (or training) sets for the three domains.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub source: Dataset,
    pub target: Dataset,
    pub background: Dataset,
}

/// Area under the ROC curve for `positives` scoring above `negatives`,
/// with ties counted as one half.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> f64 {
    let (m, n) = (positives.len(), negatives.len());
    if m == 0 || n == 0 {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut k = i;
        while k + 1 < all.len() && all[k + 1].0 == all[i].0 {
            k += 1;
        }
        // Ranks i+1 ..= k+1 share their average.
        let avg = (i + k + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=k].iter().filter(|e| e.1).count() as f64;
        i = k + 1;
    }
    (rank_sum - (m * (m + 1)) as f64 / 2.0) / (m * n) as f64
}

/// One evaluation snapshot. Undefined entries are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub source_mpjpe: f64,
    pub target_mpjpe: f64,
    pub target_pa_mpjpe: f64,
    pub target_mpjpe_in_view: f64,
    pub target_pa_mpjpe_in_view: f64,
    pub fused_target_mpjpe: f64,
    pub fused_target_pa_mpjpe: f64,
    pub fused_target_mpjpe_in_view: f64,
    pub mean_u_source: f64,
    pub mean_u_target: f64,
    pub mean_u_background: f64,
    pub mean_h_in_view_source: f64,
    pub mean_h_out_view_source: f64,
    pub mean_h_in_view_target: f64,
    pub mean_h_out_view_target: f64,
    pub mean_h_background: f64,
    pub pseudo_labels: usize,
    pub pseudo_joints: usize,
    pub ood_auroc: f64,
    pub joint_auroc_target: f64,
}

pub const METRICS_COLUMNS: [&str; 21] = [
    "iteration",
    "source_mpjpe",
    "target_mpjpe",
    "target_pa_mpjpe",
    "target_mpjpe_in_view",
    "target_pa_mpjpe_in_view",
    "fused_target_mpjpe",
    "fused_target_pa_mpjpe",
    "fused_target_mpjpe_in_view",
    "mean_u_source",
    "mean_u_target",
    "mean_u_background",
    "mean_h_in_view_source",
    "mean_h_out_view_source",
    "mean_h_in_view_target",
    "mean_h_out_view_target",
    "mean_h_background",
    "pseudo_labels",
    "pseudo_joints",
    "ood_auroc",
    "joint_auroc_target",
];

impl MetricsRow {
    fn fields(&self) -> [String; 21] {
        let f = |x: f64| format!("{x}");
        [
            self.iteration.to_string(),
            f(self.source_mpjpe),
            f(self.target_mpjpe),
            f(self.target_pa_mpjpe),
            f(self.target_mpjpe_in_view),
            f(self.target_pa_mpjpe_in_view),
            f(self.fused_target_mpjpe),
            f(self.fused_target_pa_mpjpe),
            f(self.fused_target_mpjpe_in_view),
            f(self.mean_u_source),
            f(self.mean_u_target),
            f(self.mean_u_background),
            f(self.mean_h_in_view_source),
            f(self.mean_h_out_view_source),
            f(self.mean_h_in_view_target),
            f(self.mean_h_out_view_target),
            f(self.mean_h_background),
            self.pseudo_labels.to_string(),
            self.pseudo_joints.to_string(),
            f(self.ood_auroc),
            f(self.joint_auroc_target),
        ]
    }
}

/// CSV text with a header line and one row per snapshot.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.fields().join(","));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn subset(p: &CameraPose3D, mask: &[bool]) -> CameraPose3D {
    CameraPose3D {
        coords: p
            .coords
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect(),
    }
}

/// Pose errors of `preds` against a labelled dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseErrors {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpjpe_in_view: f64,
    pub pa_mpjpe_in_view: f64,
}

pub fn pose_errors(preds: &[CameraPose3D], data: &Dataset) -> Result<PoseErrors> {
    let mut all = Vec::new();
    let mut pa = Vec::new();
    let mut inv = Vec::new();
    let mut pa_inv = Vec::new();
    for (p, s) in preds.iter().zip(&data.samples) {
        let gt = &s.gt()?.pose_camera;
        all.push(mpjpe(p, gt)?);
        pa.push(pa_mpjpe(p, gt)?);
        let m = mpjpe_masked(p, gt, &s.visibility)?;
        if m.is_finite() {
            inv.push(m);
        }
        if s.visibility.iter().filter(|&&b| b).count() >= 3 {
            pa_inv.push(pa_mpjpe(
                &subset(p, &s.visibility),
                &subset(gt, &s.visibility),
            )?);
        }
    }
    Ok(PoseErrors {
        mpjpe: mean(all),
        pa_mpjpe: mean(pa),
        mpjpe_in_view: mean(inv),
        pa_mpjpe_in_view: mean(pa_inv),
    })
}

/// Per-joint entropies split by the ground-truth visibility flag.
pub fn entropies_by_visibility(outputs: &[NetworkOutputs], data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let mut inv = Vec::new();
    let mut outv = Vec::new();
    for (o, s) in outputs.iter().zip(&data.samples) {
        for (h, &vis) in entropies(&o.heatmaps).into_iter().zip(&s.visibility) {
            if vis {
                inv.push(h);
            } else {
                outv.push(h);
            }
        }
    }
    (inv, outv)
}

/// Network outputs on every evaluation split.
pub struct EvalOutputs {
    pub source: Vec<NetworkOutputs>,
    pub target: Vec<NetworkOutputs>,
    pub background: Vec<NetworkOutputs>,
}

impl EvalOutputs {
    pub fn compute(net: &MrpNet, data: &DomainData) -> Result<Self> {
        Ok(Self {
            source: net.predict(&data.source.images())?,
            target: net.predict(&data.target.images())?,
            background: net.predict(&data.background.images())?,
        })
    }
}

/// Evaluates a network (and optionally a fusion head) on held-out splits.
pub fn evaluate(
    net: &MrpNet,
    fusion: Option<&FusionNet>,
    data: &DomainData,
    iteration: usize,
    pseudo_labels: usize,
    pseudo_joints: usize,
) -> Result<MetricsRow> {
    let out = EvalOutputs::compute(net, data)?;
    let poses = |o: &[NetworkOutputs]| o.iter().map(|x| x.pose_camera.clone()).collect::<Vec<_>>();
    let src = pose_errors(&poses(&out.source), &data.source)?;
    let tgt = pose_errors(&poses(&out.target), &data.target)?;
    let fused = match fusion {
        Some(f) => Some(pose_errors(&f.predict(&out.target)?, &data.target)?),
        None => None,
    };
    let u = |o: &[NetworkOutputs]| o.iter().map(pose_uncertainty).collect::<Vec<_>>();
    let (u_s, u_t, u_b) = (u(&out.source), u(&out.target), u(&out.background));
    let (h_in_s, h_out_s) = entropies_by_visibility(&out.source, &data.source);
    let (h_in_t, h_out_t) = entropies_by_visibility(&out.target, &data.target);
    let h_bg: Vec<f64> = out
        .background
        .iter()
        .flat_map(|o| entropies(&o.heatmaps))
        .collect();
    let nan = f64::NAN;
    Ok(MetricsRow {
        iteration,
        source_mpjpe: src.mpjpe,
        target_mpjpe: tgt.mpjpe,
        target_pa_mpjpe: tgt.pa_mpjpe,
        target_mpjpe_in_view: tgt.mpjpe_in_view,
        target_pa_mpjpe_in_view: tgt.pa_mpjpe_in_view,
        fused_target_mpjpe: fused.map_or(nan, |f| f.mpjpe),
        fused_target_pa_mpjpe: fused.map_or(nan, |f| f.pa_mpjpe),
        fused_target_mpjpe_in_view: fused.map_or(nan, |f| f.mpjpe_in_view),
        mean_u_source: mean(u_s.iter().copied()),
        mean_u_target: mean(u_t.iter().copied()),
        mean_u_background: mean(u_b.iter().copied()),
        mean_h_in_view_source: mean(h_in_s.iter().copied()),
        mean_h_out_view_source: mean(h_out_s.iter().copied()),
        mean_h_in_view_target: mean(h_in_t.iter().copied()),
        mean_h_out_view_target: mean(h_out_t.iter().copied()),
        mean_h_background: mean(h_bg),
        pseudo_labels,
        pseudo_joints,
        ood_auroc: auroc(&u_b, &u_s),
        joint_auroc_target: auroc(&h_out_t, &h_in_t),
    })
}

/// Bin counts for several groups over shared edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: BTreeMap<String, Vec<u64>>,
}

impl Histogram {
    /// `bins` equal bins over `[lo, hi]`; values outside are clamped into
    /// the end bins.
    pub fn new(lo: f64, hi: f64, bins: usize, groups: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if bins == 0 || hi.is_nan() || lo.is_nan() || hi <= lo {
            return Err(Error::Config(format!(
                "bad histogram range [{lo}, {hi}] with {bins} bins"
            )));
        }
        let edges = (0..=bins)
            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
            .collect();
        let counts = groups
            .into_iter()
            .map(|(name, vals)| {
                let mut c = vec![0u64; bins];
                for v in vals.into_iter().filter(|v| v.is_finite()) {
                    let k = (((v - lo) / (hi - lo)) * bins as f64).floor();
                    c[k.clamp(0.0, (bins - 1) as f64) as usize] += 1;
                }
                (name, c)
            })
            .collect();
        Ok(Self { edges, counts })
    }
}

/// Entropy histogram per joint group and pose-uncertainty histogram per
/// domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub entropy: Histogram,
    pub pose_uncertainty: Histogram,
}

pub fn histogram_report(net: &MrpNet, data: &DomainData, bins: usize) -> Result<HistogramReport> {
    let out = EvalOutputs::compute(net, data)?;
    let (h_in_s, h_out_s) = entropies_by_visibility(&out.source, &data.source);
    let (h_in_t, h_out_t) = entropies_by_visibility(&out.target, &data.target);
    let h_bg: Vec<f64> = out
        .background
        .iter()
        .flat_map(|o| entropies(&o.heatmaps))
        .collect();
    let groups = BTreeMap::from([
        ("in_view_source".to_string(), h_in_s),
        ("out_view_source".to_string(), h_out_s),
        ("in_view_target".to_string(), h_in_t),
        ("out_view_target".to_string(), h_out_t),
        ("background".to_string(), h_bg),
    ]);
    let max_h = net.config().grid.max_entropy();
    let entropy = Histogram::new(0.0, max_h, bins, groups)?;
    let u = |o: &[NetworkOutputs]| o.iter().map(pose_uncertainty).collect::<Vec<_>>();
    let (u_s, u_t, u_b) = (u(&out.source), u(&out.target), u(&out.background));
    let hi = u_s
        .iter()
        .chain(&u_t)
        .chain(&u_b)
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let pose_uncertainty = Histogram::new(
        0.0,
        hi,
        bins,
        BTreeMap::from([
            ("source".to_string(), u_s),
            ("target".to_string(), u_t),
            ("background".to_string(), u_b),
        ]),
    )?;
    Ok(HistogramReport {
        entropy,
        pose_uncertainty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &p in pos {
            for &n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let m = rng.gen_range(1..30);
            let n = rng.gen_range(1..30);
            // Coarse values force ties.
            let pos: Vec<f64> = (0..m).map(|_| rng.gen_range(0..6) as f64).collect();
            let neg: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            assert!((auroc(&pos, &neg) - pairwise(&pos, &neg)).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_edge_cases() {
        assert_eq!(auroc(&[1.0; 5], &[1.0; 7]), 0.5);
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auroc(&[0.0], &[1.0]), 0.0);
        assert!(auroc(&[], &[1.0]).is_nan());
    }

    #[test]
    fn csv_layout() {
        let row = MetricsRow {
            iteration: 3,
            source_mpjpe: 0.5,
            target_mpjpe: 0.25,
            target_pa_mpjpe: 0.1,
            target_mpjpe_in_view: 0.2,
            target_pa_mpjpe_in_view: 0.1,
            fused_target_mpjpe: f64::NAN,
            fused_target_pa_mpjpe: f64::NAN,
            fused_target_mpjpe_in_view: f64::NAN,
            mean_u_source: 0.0,
            mean_u_target: 0.0,
            mean_u_background: 0.0,
            mean_h_in_view_source: 0.0,
            mean_h_out_view_source: 0.0,
            mean_h_in_view_target: 0.0,
            mean_h_out_view_target: 0.0,
            mean_h_background: 0.0,
            pseudo_labels: 7,
            pseudo_joints: 0,
            ood_auroc: 0.5,
            joint_auroc_target: f64::NAN,
        };
        let csv = metrics_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), METRICS_COLUMNS.len());
        assert!(lines[1].starts_with("3,0.5,0.25,"));
        assert!(lines[1].contains("NaN"));
    }

    #[test]
    fn histogram_counts() {
        let h = Histogram::new(
            0.0,
            1.0,
            4,
            BTreeMap::from([(
                "a".to_string(),
                vec![0.0, 0.1, 0.3, 0.99, 1.0, 5.0, -1.0, f64::NAN],
            )]),
        )
        .unwrap();
        assert_eq!(h.edges, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(h.counts["a"], vec![3, 1, 0, 3]);
    }
}
