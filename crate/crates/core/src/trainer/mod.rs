//! Training loops: pose-level and joint-level adaptation, the source-only
//! baselines and the fusion head.
//!
//! Every loss term owns an Adam optimiser and a batch sampler stream, so a
//! term only ever touches its own moment estimates.

pub mod eval;
pub mod losses;

use std::collections::BTreeMap;

use netcore::{AdamBank, AdamConfig, Gradients, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::heatmap::GridDims;
use crate::model::{batch_tensor, ForwardVars, FusionNet, MrpNet};
use crate::synthdata::Dataset;
use crate::uncertainty::{
    predict_with_flip, select_joint_pseudo_labels, select_pose_pseudo_labels, JointSelection,
    PseudoLabelSet, TargetRendering,
};
use crate::{Error, Result};

pub use eval::{
    auroc, evaluate, histogram_report, metrics_csv, write_metrics_csv, DomainData, MetricsRow,
};
use losses::BatchTargets;

/// Names of the loss terms; each keys an optimiser and a learning rate.
pub mod term {
    pub const SOURCE: &str = "source";
    pub const BACKGROUND: &str = "background";
    pub const TARGET_UNCERTAINTY: &str = "target_uncertainty";
    pub const PSEUDO: &str = "pseudo";
    pub const SOURCE_IN_VIEW: &str = "source_in_view";
    pub const SOURCE_OUT_VIEW: &str = "source_out_view";
    pub const BACKGROUND_ENTROPY: &str = "background_entropy";
    pub const TARGET_IN_VIEW: &str = "target_in_view";
    pub const TARGET_OUT_VIEW: &str = "target_out_view";
    pub const JOINT_PSEUDO: &str = "joint_pseudo";
    pub const FUSION_SOURCE: &str = "fusion_source";
    pub const FUSION_PSEUDO: &str = "fusion_pseudo";

    pub const ALL: [&str; 12] = [
        SOURCE,
        BACKGROUND,
        TARGET_UNCERTAINTY,
        PSEUDO,
        SOURCE_IN_VIEW,
        SOURCE_OUT_VIEW,
        BACKGROUND_ENTROPY,
        TARGET_IN_VIEW,
        TARGET_OUT_VIEW,
        JOINT_PSEUDO,
        FUSION_SOURCE,
        FUSION_PSEUDO,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Multiplier of every heatmap MSE term.
    pub heatmap_weight: f64,
    /// Weight of the 3D pose term against the heatmap term.
    pub lambda_pose: f64,
    /// Weight of the source pose uncertainty (pose level) or out-view
    /// entropy (joint level).
    pub lambda_uncertainty: f64,
    /// Joint level only: weight of the localised-vs-projected distance over
    /// in-view source joints, added to the supervised step. It is the only
    /// signal training the projection used by the joint selection score.
    pub lambda_projection: f64,
    /// Weight of the 3D pose term inside pseudo supervision.
    pub lambda_pseudo: f64,
    /// Pose-level flip-consistency threshold.
    pub pose_threshold: f64,
    /// Joint-level in-view threshold; `0.02 ln C` when unset.
    pub in_view_threshold: Option<f64>,
    /// Joint-level out-view threshold; `0.5 ln C` when unset.
    pub out_view_threshold: Option<f64>,
    /// Iterations between pseudo-label refreshes.
    pub refresh_interval: usize,
    /// Iterations between held-out evaluations; defaults to the refresh
    /// interval.
    pub eval_interval: Option<usize>,
    pub max_iter: usize,
    /// Only the supervised source term runs before this iteration.
    pub warmup_iters: usize,
    pub background_margin: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-term overrides of `learning_rate`.
    pub learning_rates: BTreeMap<String, f64>,
    /// Learning rates follow a cosine from their base value down to this
    /// fraction of it at the last iteration. 1 keeps them constant.
    pub final_lr_fraction: f64,
    pub fusion_iters: usize,
    pub fusion_batch_size: usize,
    /// Start the fusion head as the identity on the regression pose.
    pub fusion_pass_through: bool,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            heatmap_weight: 1.0,
            lambda_pose: 1.0,
            lambda_uncertainty: 0.1,
            lambda_projection: 0.0,
            lambda_pseudo: 1.0,
            pose_threshold: 0.05,
            in_view_threshold: None,
            out_view_threshold: None,
            refresh_interval: 200,
            eval_interval: None,
            max_iter: 3000,
            warmup_iters: 0,
            background_margin: 0.5,
            batch_size: 8,
            learning_rate: 1e-3,
            learning_rates: BTreeMap::new(),
            final_lr_fraction: 1.0,
            fusion_iters: 1000,
            fusion_batch_size: 32,
            fusion_pass_through: true,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be non-negative and finite, got {v}"
                )))
            }
        };
        nonneg("heatmap_weight", self.heatmap_weight)?;
        nonneg("lambda_pose", self.lambda_pose)?;
        nonneg("lambda_uncertainty", self.lambda_uncertainty)?;
        nonneg("lambda_projection", self.lambda_projection)?;
        nonneg("lambda_pseudo", self.lambda_pseudo)?;
        pos("pose_threshold", self.pose_threshold)?;
        if let Some(t) = self.in_view_threshold {
            pos("in_view_threshold", t)?;
        }
        if let Some(t) = self.out_view_threshold {
            pos("out_view_threshold", t)?;
        }
        nonneg("background_margin", self.background_margin)?;
        nonneg("learning_rate", self.learning_rate)?;
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!(
                "final_lr_fraction must lie in [0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        for (k, &v) in &self.learning_rates {
            if !term::ALL.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "unknown loss term `{k}` in learning_rates"
                )));
            }
            nonneg(&format!("learning_rates.{k}"), v)?;
        }
        for (name, v) in [
            ("refresh_interval", self.refresh_interval),
            ("batch_size", self.batch_size),
            ("fusion_batch_size", self.fusion_batch_size),
            ("eval_interval", self.eval_interval.unwrap_or(1)),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn lr(&self, name: &str) -> f64 {
        self.learning_rates
            .get(name)
            .copied()
            .unwrap_or(self.learning_rate)
    }

    /// Learning rate of term `name` at iteration `it` of `total`.
    pub fn scheduled_lr(&self, name: &str, it: usize, total: usize) -> f64 {
        let f = self.final_lr_fraction;
        let progress = if total > 1 {
            it as f64 / (total - 1) as f64
        } else {
            0.0
        };
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.lr(name) * (f + (1.0 - f) * cosine)
    }

    pub fn in_threshold(&self, grid: GridDims) -> f64 {
        self.in_view_threshold.unwrap_or(0.02 * grid.max_entropy())
    }

    pub fn out_threshold(&self, grid: GridDims) -> f64 {
        self.out_view_threshold.unwrap_or(0.5 * grid.max_entropy())
    }

    /// Weights of the source supervision terms.
    pub fn supervised_weights(&self) -> losses::TermWeights {
        losses::TermWeights {
            heatmap: self.heatmap_weight,
            pose: self.lambda_pose,
        }
    }

    /// Weights of the pseudo supervision terms.
    pub fn pseudo_weights(&self) -> losses::TermWeights {
        losses::TermWeights {
            heatmap: self.heatmap_weight,
            pose: self.lambda_pseudo,
        }
    }

    fn eval_every(&self) -> usize {
        self.eval_interval.unwrap_or(self.refresh_interval)
    }
}

/// Which pose-level terms run alongside source supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseTerms {
    pub background: bool,
    pub target_uncertainty: bool,
    pub pseudo_labels: bool,
}

impl PoseTerms {
    pub const FULL: Self = Self {
        background: true,
        target_uncertainty: true,
        pseudo_labels: true,
    };
    pub const SOURCE_ONLY: Self = Self {
        background: true,
        target_uncertainty: false,
        pseudo_labels: false,
    };
    pub const NO_PSEUDO: Self = Self {
        background: true,
        target_uncertainty: true,
        pseudo_labels: false,
    };
}

/// Which joint-level terms run alongside in-view source supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointTerms {
    pub source_out_view: bool,
    pub background: bool,
    pub target_in_view: bool,
    pub target_out_view: bool,
    pub pseudo_labels: bool,
}

impl JointTerms {
    pub const FULL: Self = Self {
        source_out_view: true,
        background: true,
        target_in_view: true,
        target_out_view: true,
        pseudo_labels: true,
    };
    pub const SOURCE_ONLY: Self = Self {
        source_out_view: true,
        background: true,
        target_in_view: false,
        target_out_view: false,
        pseudo_labels: false,
    };

    fn uses_selection(&self) -> bool {
        self.target_in_view || self.target_out_view || self.pseudo_labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Pose,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub term: String,
    pub value: f64,
}

/// Current pseudo labels of a run.
#[derive(Clone, Debug, Default)]
pub enum PseudoState {
    #[default]
    None,
    Pose(PseudoLabelSet),
    Joint(JointSelection),
}

impl PseudoState {
    /// Labelled samples and selected in-view joints.
    pub fn counts(&self) -> (usize, usize) {
        match self {
            PseudoState::None => (0, 0),
            PseudoState::Pose(s) => (s.len(), 0),
            PseudoState::Joint(s) => (s.labels.len(), s.in_view_pairs().len()),
        }
    }
}

pub struct TrainState {
    pub net: MrpNet,
    pub optimizers: AdamBank,
    pub iteration: usize,
    pub metrics: Vec<MetricsRow>,
    pub losses: Vec<LossRecord>,
    pub pseudo: PseudoState,
    samplers: BTreeMap<&'static str, ChaCha8Rng>,
    seed: u64,
}

impl TrainState {
    pub fn new(net: MrpNet, seed: u64) -> Self {
        Self {
            net,
            optimizers: AdamBank::new(),
            iteration: 0,
            metrics: Vec::new(),
            losses: Vec::new(),
            pseudo: PseudoState::None,
            samplers: BTreeMap::new(),
            seed,
        }
    }

    /// `batch` indices below `n`, drawn from the stream owned by `name`.
    fn draw(&mut self, name: &'static str, n: usize, batch: usize) -> Vec<usize> {
        let seed = self.seed;
        let rng = self.samplers.entry(name).or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(term::ALL.iter().position(|t| *t == name).unwrap_or(0) as u64 + 1);
            r
        });
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    }

    /// One Adam step of term `name` on the loss built from a forward pass
    /// over `images`.
    fn step<F>(
        &mut self,
        hp: &HyperParams,
        name: &'static str,
        images: &[&[f64]],
        build: F,
    ) -> Result<f64>
    where
        F: FnOnce(&mut Graph, &ForwardVars) -> Result<Var>,
    {
        let mut grads = Gradients::for_store(&self.net.params);
        let value = {
            let mut g = Graph::new(&self.net.params);
            let x = g.constant(batch_tensor(images, self.net.config().obs_dim())?);
            let v = self.net.forward(&mut g, x)?;
            let loss = build(&mut g, &v)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Invariant(format!(
                    "{name} loss is {value} at iteration {}",
                    self.iteration
                )));
            }
            g.backward(loss, &mut grads)?;
            value
        };
        let lr = hp.scheduled_lr(name, self.iteration, hp.max_iter);
        let opt = self
            .optimizers
            .get_or_insert(name, AdamConfig::default(), &self.net.params);
        opt.config.lr = lr;
        opt.step(&mut self.net.params, &grads);
        self.losses.push(LossRecord {
            iteration: self.iteration,
            term: name.to_string(),
            value,
        });
        Ok(value)
    }

    fn record_eval(&mut self, eval_data: &DomainData, fusion: Option<&FusionNet>) -> Result<()> {
        let (labels, joints) = self.pseudo.counts();
        let row = evaluate(&self.net, fusion, eval_data, self.iteration, labels, joints)?;
        self.metrics.push(row);
        Ok(())
    }
}

fn gather<'a>(data: &'a Dataset, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter()
        .map(|&i| data.samples[i].image.as_slice())
        .collect()
}

fn gt_targets(data: &Dataset, idx: &[usize]) -> Result<BatchTargets> {
    let mut t = BatchTargets::default();
    for &i in idx {
        let gt = data.samples[i].gt()?;
        t.heatmaps.extend_from_slice(gt.heatmaps.values());
        t.pose.extend(gt.pose_camera.to_flat());
    }
    Ok(t)
}

fn visibility(data: &Dataset, idx: &[usize]) -> Vec<bool> {
    idx.iter()
        .flat_map(|&i| data.samples[i].visibility.iter().copied())
        .collect()
}

fn require_nonempty(data: &DomainData) -> Result<()> {
    for (name, d) in [
        ("source", &data.source),
        ("target", &data.target),
        ("background", &data.background),
    ] {
        if d.is_empty() {
            return Err(Error::EmptyDataset(name));
        }
    }
    Ok(())
}

fn rendering(data: &Dataset) -> TargetRendering {
    TargetRendering {
        grid: data.grid,
        sigma: data.heatmap_sigma,
    }
}

fn all_ids(data: &Dataset) -> Vec<usize> {
    (0..data.len()).collect()
}

fn refresh_pose_labels(
    net: &MrpNet,
    target: &Dataset,
    hp: &HyperParams,
    iteration: usize,
) -> Result<PseudoLabelSet> {
    let (out, flipped) = predict_with_flip(net, &target.images())?;
    select_pose_pseudo_labels(
        &all_ids(target),
        &out,
        &flipped,
        net.tree(),
        rendering(target),
        hp.pose_threshold,
        iteration,
    )
}

fn refresh_joint_labels(
    net: &MrpNet,
    target: &Dataset,
    hp: &HyperParams,
    iteration: usize,
) -> Result<JointSelection> {
    let (out, flipped) = predict_with_flip(net, &target.images())?;
    let grid = net.config().grid;
    select_joint_pseudo_labels(
        &all_ids(target),
        &out,
        &flipped,
        net.tree(),
        rendering(target),
        hp.in_threshold(grid),
        hp.out_threshold(grid),
        iteration,
    )
}

/// Pose-level adaptation on clean source, target and background sets.
pub fn train_pose_level(
    net: MrpNet,
    train: &DomainData,
    eval_data: &DomainData,
    hp: &HyperParams,
    terms: PoseTerms,
) -> Result<TrainState> {
    hp.validate()?;
    require_nonempty(train)?;
    let j = net.config().joints();
    let b = hp.batch_size;
    let mut state = TrainState::new(net, hp.seed);
    for it in 0..hp.max_iter {
        state.iteration = it;
        let adapting = it >= hp.warmup_iters;
        if terms.pseudo_labels && adapting && it % hp.refresh_interval == 0 {
            state.pseudo =
                PseudoState::Pose(refresh_pose_labels(&state.net, &train.target, hp, it)?);
        }
        if it % hp.eval_every() == 0 {
            state.record_eval(eval_data, None)?;
        }

        let idx = state.draw(term::SOURCE, train.source.len(), b);
        let t = gt_targets(&train.source, &idx)?;
        state.step(hp, term::SOURCE, &gather(&train.source, &idx), |g, v| {
            losses::loss_sup_source(g, v, &t, j, hp.supervised_weights(), hp.lambda_uncertainty)
        })?;

        if terms.background && adapting {
            let idx = state.draw(term::BACKGROUND, train.background.len(), b);
            state.step(
                hp,
                term::BACKGROUND,
                &gather(&train.background, &idx),
                |g, v| losses::loss_bg_uncertainty(g, v, hp.background_margin),
            )?;
        }
        if !adapting {
            continue;
        }
        if terms.target_uncertainty {
            let idx = state.draw(term::TARGET_UNCERTAINTY, train.target.len(), b);
            state.step(
                hp,
                term::TARGET_UNCERTAINTY,
                &gather(&train.target, &idx),
                losses::loss_target_uncertainty,
            )?;
        }
        if terms.pseudo_labels {
            let ids = match &state.pseudo {
                PseudoState::Pose(s) if !s.is_empty() => s.ids(),
                _ => continue,
            };
            let pick = state.draw(term::PSEUDO, ids.len(), b);
            let idx: Vec<usize> = pick.iter().map(|&k| ids[k]).collect();
            let PseudoState::Pose(set) = &state.pseudo else {
                unreachable!()
            };
            let mut t = BatchTargets::default();
            let mut w = Vec::with_capacity(idx.len() * j);
            for &i in &idx {
                let l = set.get(i)?;
                t.heatmaps.extend_from_slice(l.heatmaps.values());
                t.pose.extend(l.pose_camera.to_flat());
                w.extend_from_slice(&l.confidences);
            }
            state.step(hp, term::PSEUDO, &gather(&train.target, &idx), |g, v| {
                losses::loss_psup_target(g, v, &t, &w, hp.pseudo_weights())
            })?;
        }
    }
    state.iteration = hp.max_iter;
    state.record_eval(eval_data, None)?;
    Ok(state)
}

/// Joint-level adaptation on occluded source and target sets.
pub fn train_joint_level(
    net: MrpNet,
    train: &DomainData,
    eval_data: &DomainData,
    hp: &HyperParams,
    terms: JointTerms,
) -> Result<TrainState> {
    hp.validate()?;
    require_nonempty(train)?;
    let j = net.config().joints();
    let b = hp.batch_size;
    let mut state = TrainState::new(net, hp.seed);
    for it in 0..hp.max_iter {
        state.iteration = it;
        let adapting = it >= hp.warmup_iters;
        if terms.uses_selection() && adapting && it % hp.refresh_interval == 0 {
            state.pseudo =
                PseudoState::Joint(refresh_joint_labels(&state.net, &train.target, hp, it)?);
        }
        if it % hp.eval_every() == 0 {
            state.record_eval(eval_data, None)?;
        }

        let idx = state.draw(term::SOURCE_IN_VIEW, train.source.len(), b);
        let t = gt_targets(&train.source, &idx)?;
        let seen = visibility(&train.source, &idx);
        let coef: Vec<f64> = seen.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        state.step(
            hp,
            term::SOURCE_IN_VIEW,
            &gather(&train.source, &idx),
            |g, v| {
                let sup = losses::joint_losses(g, v, &t, &coef, hp.supervised_weights())?;
                if hp.lambda_projection == 0.0 {
                    return Ok(sup);
                }
                let u = losses::masked_pose_uncertainty(g, v, &seen)?;
                let u = g.scale(u, hp.lambda_projection);
                Ok(g.add(sup, u)?)
            },
        )?;

        if terms.source_out_view && adapting {
            let idx = state.draw(term::SOURCE_OUT_VIEW, train.source.len(), b);
            let mask: Vec<bool> = visibility(&train.source, &idx)
                .into_iter()
                .map(|v| !v)
                .collect();
            if mask.iter().any(|&m| m) {
                state.step(
                    hp,
                    term::SOURCE_OUT_VIEW,
                    &gather(&train.source, &idx),
                    |g, v| {
                        let d = losses::entropy_deficit(g, v, &mask)?;
                        Ok(g.scale(d, hp.lambda_uncertainty))
                    },
                )?;
            }
        }
        if terms.background && adapting {
            let idx = state.draw(term::BACKGROUND_ENTROPY, train.background.len(), b);
            state.step(
                hp,
                term::BACKGROUND_ENTROPY,
                &gather(&train.background, &idx),
                |g, v| losses::loss_bg_entropy(g, v, j),
            )?;
        }
        if !adapting {
            continue;
        }
        let ids = match &state.pseudo {
            PseudoState::Joint(s) if !s.labels.is_empty() => {
                s.labels.keys().copied().collect::<Vec<_>>()
            }
            _ => continue,
        };
        for name in [
            term::TARGET_IN_VIEW,
            term::TARGET_OUT_VIEW,
            term::JOINT_PSEUDO,
        ] {
            let enabled = match name {
                term::TARGET_IN_VIEW => terms.target_in_view,
                term::TARGET_OUT_VIEW => terms.target_out_view,
                _ => terms.pseudo_labels,
            };
            if !enabled {
                continue;
            }
            let pick = state.draw(name, ids.len(), b);
            let idx: Vec<usize> = pick.iter().map(|&k| ids[k]).collect();
            let PseudoState::Joint(sel) = &state.pseudo else {
                unreachable!()
            };
            let mut in_view = Vec::with_capacity(idx.len() * j);
            let mut out_view = Vec::with_capacity(idx.len() * j);
            let mut t = BatchTargets::default();
            let mut w = Vec::with_capacity(idx.len() * j);
            for &i in &idx {
                let l = sel.get(i)?;
                in_view.extend_from_slice(&l.in_view);
                out_view.extend_from_slice(&l.out_view);
                if name == term::JOINT_PSEUDO {
                    t.heatmaps.extend_from_slice(l.heatmaps.values());
                    t.pose.extend(l.pose_camera.to_flat());
                    w.extend_from_slice(&l.confidences);
                }
            }
            let images = gather(&train.target, &idx);
            match name {
                term::TARGET_IN_VIEW if in_view.iter().any(|&m| m) => {
                    let coef: Vec<f64> =
                        in_view.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
                    state.step(hp, name, &images, |g, v| {
                        losses::weighted_entropy(g, v, &coef)
                    })?;
                }
                term::TARGET_OUT_VIEW if out_view.iter().any(|&m| m) => {
                    state.step(hp, name, &images, |g, v| {
                        losses::entropy_deficit(g, v, &out_view)
                    })?;
                }
                term::JOINT_PSEUDO if in_view.iter().any(|&m| m) => {
                    let coef: Vec<f64> = losses::normalized_weights(&w, &in_view, j)
                        .into_iter()
                        .map(|x| x * j as f64)
                        .collect();
                    state.step(hp, name, &images, |g, v| {
                        losses::joint_losses(g, v, &t, &coef, hp.pseudo_weights())
                    })?;
                }
                _ => {}
            }
        }
    }
    state.iteration = hp.max_iter;
    state.record_eval(eval_data, None)?;
    Ok(state)
}

/// Trained fusion head with its loss trace.
pub struct FusionRun {
    pub fusion: FusionNet,
    pub losses: Vec<LossRecord>,
    pub source_rows: usize,
    pub pseudo_rows: usize,
}

/// Training rows for the fusion head: network input rows, flat target
/// poses and per-joint loss coefficients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionRows {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub coef: Vec<Vec<f64>>,
}

impl FusionRows {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Trains the fusion head against a frozen network: ground truth on the
/// source set and flip-averaged pseudo labels, selected by the final
/// network, on the target set.
pub fn train_fusion(
    net: &MrpNet,
    train: &DomainData,
    hp: &HyperParams,
    level: Level,
) -> Result<FusionRun> {
    hp.validate()?;
    require_nonempty(train)?;
    let cfg = net.config();
    let j = cfg.joints();
    let mut fusion = FusionNet::for_config(cfg, hp.seed ^ 0x5eed);
    if hp.fusion_pass_through {
        fusion.set_pass_through()?;
    }

    let src_out = net.predict(&train.source.images())?;
    let mut source = FusionRows::default();
    for (o, s) in src_out.iter().zip(&train.source.samples) {
        source.inputs.push(FusionNet::input_row(o));
        source.targets.push(s.gt()?.pose_camera.to_flat());
        source.coef.push(match level {
            Level::Pose => vec![1.0; j],
            Level::Joint => s
                .visibility
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect(),
        });
    }

    let (out, _) = predict_with_flip(net, &train.target.images())?;
    let mut pseudo = FusionRows::default();
    match level {
        Level::Pose => {
            let set = refresh_pose_labels(net, &train.target, hp, hp.max_iter)?;
            for (id, l) in &set.labels {
                pseudo.inputs.push(FusionNet::input_row(&out[*id]));
                pseudo.targets.push(l.pose_camera.to_flat());
                let mask = vec![true; j];
                pseudo.coef.push(scaled_weights(&l.confidences, &mask, j));
            }
        }
        Level::Joint => {
            let sel = refresh_joint_labels(net, &train.target, hp, hp.max_iter)?;
            for (id, l) in &sel.labels {
                if !l.in_view.iter().any(|&b| b) {
                    continue;
                }
                pseudo.inputs.push(FusionNet::input_row(&out[*id]));
                pseudo.targets.push(l.pose_camera.to_flat());
                pseudo
                    .coef
                    .push(scaled_weights(&l.confidences, &l.in_view, j));
            }
        }
    }

    let losses = fit_fusion(&mut fusion, &source, &pseudo, hp)?;
    Ok(FusionRun {
        fusion,
        losses,
        source_rows: source.len(),
        pseudo_rows: pseudo.len(),
    })
}

/// Fits the fusion head on fixed source and pseudo-label rows, one Adam
/// state per term.
pub fn fit_fusion(
    fusion: &mut FusionNet,
    source: &FusionRows,
    pseudo: &FusionRows,
    hp: &HyperParams,
) -> Result<Vec<LossRecord>> {
    let j = fusion.joints();
    for rows in [source, pseudo] {
        let bad = rows.targets.len() != rows.len()
            || rows.coef.len() != rows.len()
            || rows.inputs.iter().any(|r| r.len() != 6 * j)
            || rows.targets.iter().any(|r| r.len() != 3 * j)
            || rows.coef.iter().any(|r| r.len() != j);
        if bad {
            return Err(Error::Shape(format!("fusion rows do not match {j} joints")));
        }
    }
    let mut bank = AdamBank::new();
    let mut rngs: Vec<ChaCha8Rng> = (0..2)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(hp.seed);
            r.set_stream(100 + k);
            r
        })
        .collect();
    let mut records = Vec::new();
    for it in 0..hp.fusion_iters {
        for (k, (name, rows)) in [(term::FUSION_SOURCE, source), (term::FUSION_PSEUDO, pseudo)]
            .into_iter()
            .enumerate()
        {
            if rows.is_empty() {
                continue;
            }
            let idx: Vec<usize> = (0..hp.fusion_batch_size)
                .map(|_| rngs[k].gen_range(0..rows.len()))
                .collect();
            let n = idx.len();
            let mut grads = Gradients::for_store(&fusion.params);
            let value = {
                let mut g = Graph::new(&fusion.params);
                let x: Vec<f64> = idx
                    .iter()
                    .flat_map(|&i| rows.inputs[i].iter().copied())
                    .collect();
                let x = g.constant(Tensor::new(vec![n, 6 * j], x)?);
                let y = fusion.forward(&mut g, x)?;
                let t: Vec<f64> = idx
                    .iter()
                    .flat_map(|&i| rows.targets[i].iter().copied())
                    .collect();
                let w: Vec<f64> = idx
                    .iter()
                    .flat_map(|&i| rows.coef[i].iter().flat_map(|&c| [c; 3]))
                    .map(|c| c / (n * j * 3) as f64)
                    .collect();
                let loss = losses::weighted_squared_error(&mut g, y, t, w)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Invariant(format!(
                        "{name} loss is {value} at iteration {it}"
                    )));
                }
                g.backward(loss, &mut grads)?;
                value
            };
            let opt = bank.get_or_insert(name, AdamConfig::default(), &fusion.params);
            opt.config.lr = hp.scheduled_lr(name, it, hp.fusion_iters);
            opt.step(&mut fusion.params, &grads);
            records.push(LossRecord {
                iteration: it,
                term: name.to_string(),
                value,
            });
        }
    }
    Ok(records)
}

/// Confidences normalised over `mask` and scaled by `J`, so that uniform
/// weights reproduce the unweighted loss.
fn scaled_weights(w: &[f64], mask: &[bool], joints: usize) -> Vec<f64> {
    losses::normalized_weights(w, mask, joints)
        .into_iter()
        .map(|x| x * joints as f64)
        .collect()
}
