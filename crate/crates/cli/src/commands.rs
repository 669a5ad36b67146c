use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use mrp_core::model::{
    forward_kinematics_op, normalize_limbs_op, project_op, rotate_op, FusionNet, MrpNet,
    MrpNetConfig,
};
use mrp_core::trainer::{
    self, eval, losses, train_fusion, train_joint_level, train_pose_level, JointTerms, Level,
    LossRecord, PoseTerms, PseudoState, TrainState,
};
use netcore::gradcheck::{self, GradCheckConfig};
use netcore::{Dense, Graph, ParamStore, ResidualBlock, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{load_split, save_split};
use crate::{CliError, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pose,
    Joint,
    Fusion,
    Baseline,
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::from_io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `out/{train,eval}/{pose,joint}/{source,target,background}`.
pub fn cmd_generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_json())?;
    for (split, eval) in [("train", false), ("eval", true)] {
        for (name, level) in [("pose", Level::Pose), ("joint", Level::Joint)] {
            save_split(&out.join(split).join(name), &cfg.build_split(level, eval)?)?;
        }
    }
    Ok(())
}

fn losses_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("iteration,term,value\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.term, r.value));
    }
    out
}

/// Artifacts of a training run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub fusion: Option<FusionNet>,
}

/// Runs training in memory; `cmd_train` adds the file outputs.
pub fn run_training(cfg: &ExperimentConfig, mode: Mode) -> Result<TrainOutcome, CliError> {
    let level = match mode {
        Mode::Pose => Level::Pose,
        Mode::Joint => Level::Joint,
        Mode::Fusion | Mode::Baseline => cfg.level,
    };
    let train = cfg.build_split(level, false)?;
    let eval_data = cfg.build_split(level, true)?;
    let net = MrpNet::new(cfg.model.clone(), cfg.seed)?;
    let hp = &cfg.hyper;
    let mut state = match (level, mode) {
        (Level::Pose, Mode::Baseline) => {
            train_pose_level(net, &train, &eval_data, hp, PoseTerms::SOURCE_ONLY)?
        }
        (Level::Pose, _) => train_pose_level(net, &train, &eval_data, hp, PoseTerms::FULL)?,
        (Level::Joint, Mode::Baseline) => {
            train_joint_level(net, &train, &eval_data, hp, JointTerms::SOURCE_ONLY)?
        }
        (Level::Joint, _) => train_joint_level(net, &train, &eval_data, hp, JointTerms::FULL)?,
    };
    let fusion = if mode == Mode::Fusion {
        let run = train_fusion(&state.net, &train, hp, level)?;
        // The final row is re-evaluated with the fusion head attached.
        let (labels, joints) = state.pseudo.counts();
        let row = trainer::evaluate(
            &state.net,
            Some(&run.fusion),
            &eval_data,
            state.iteration,
            labels,
            joints,
        )?;
        if let Some(last) = state.metrics.last_mut() {
            *last = row;
        }
        state.losses.extend(run.losses);
        Some(run.fusion)
    } else {
        None
    };
    Ok(TrainOutcome { state, fusion })
}

pub fn cmd_train(cfg: &ExperimentConfig, mode: Mode, out: &Path) -> Result<TrainOutcome, CliError> {
    create_dir(out)?;
    let started = now_secs();
    write(&out.join("config.json"), &cfg.to_json())?;
    write(
        &out.join("command.json"),
        &serde_json::json!({ "command": "train", "mode": mode, "seed": cfg.seed }).to_string(),
    )?;
    let outcome = run_training(cfg, mode)?;
    let state = &outcome.state;
    eval::write_metrics_csv(&out.join("metrics.csv"), &state.metrics)?;
    write(&out.join("losses.csv"), &losses_csv(&state.losses))?;
    state.net.save(&out.join("model"))?;
    if let Some(f) = &outcome.fusion {
        f.save(&out.join("fusion"))?;
    }
    match &state.pseudo {
        PseudoState::Pose(set) => {
            let scores: Vec<(usize, f64)> =
                set.labels.iter().map(|(&id, l)| (id, l.score)).collect();
            set.write_audit(&out.join("pseudo_labels.json"), &scores)?;
        }
        PseudoState::Joint(sel) => sel.write_audit(&out.join("pseudo_labels.json"))?,
        PseudoState::None => {}
    }
    write(
        &out.join("run.log"),
        &format!("started_unix={started}\nfinished_unix={}\n", now_secs()),
    )?;
    Ok(outcome)
}

fn load_checkpoint(stem: &Path) -> Result<MrpNet, CliError> {
    let cfg = stem.with_extension("config.json");
    if !cfg.exists() {
        return Err(CliError::MissingFile(cfg.display().to_string()));
    }
    Ok(MrpNet::load(stem)?)
}

/// Metrics of a checkpoint on `data/{source,target,background}` as JSON.
pub fn cmd_evaluate(
    checkpoint: &Path,
    fusion: Option<&Path>,
    data: &Path,
) -> Result<String, CliError> {
    let net = load_checkpoint(checkpoint)?;
    let split = load_split(data, net.config())?;
    let fusion = match fusion {
        Some(stem) => {
            let c = net.config();
            Some(FusionNet::load(
                stem,
                c.joints(),
                c.fusion_width,
                c.fusion_blocks,
            )?)
        }
        None => None,
    };
    let row = trainer::evaluate(&net, fusion.as_ref(), &split, 0, 0, 0)?;
    let mut value = serde_json::to_value(&row).map_err(|e| CliError::Runtime(e.to_string()))?;
    // JSON has no NaN; undefined metrics become null.
    if let Some(map) = value.as_object_mut() {
        map.remove("iteration");
        map.remove("pseudo_labels");
        map.remove("pseudo_joints");
    }
    Ok(serde_json::to_string_pretty(&value).expect("metrics serialise"))
}

pub fn cmd_histogram(checkpoint: &Path, data: &Path, bins: usize) -> Result<String, CliError> {
    let net = load_checkpoint(checkpoint)?;
    let split = load_split(data, net.config())?;
    let report = eval::histogram_report(&net, &split, bins)?;
    Ok(serde_json::to_string_pretty(&report).expect("histogram serialises"))
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    pub worst_relative_error: f64,
    /// Parameter entry with the largest error, as `name[index]`.
    pub worst_entry: Option<String>,
    pub analytic: Option<f64>,
    pub numeric: Option<f64>,
    pub entries: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

fn report(
    name: &str,
    seed: u64,
    r: netcore::Result<gradcheck::GradCheckReport>,
) -> Result<CheckResult, CliError> {
    let r = r.map_err(|e| CliError::Invariant(format!("{name}: {e}")))?;
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        passed: r.passed(),
        worst_relative_error: r.max_rel_error,
        worst_entry: r
            .worst
            .as_ref()
            .map(|m| format!("{}[{}]", m.param, m.index)),
        analytic: r.worst.as_ref().map(|m| m.analytic),
        numeric: r.worst.as_ref().map(|m| m.numeric),
        entries: r.checked,
    })
}

/// A random observation batch whose raw limb vectors all stay away from
/// zero, where limb normalisation is not differentiable. Small networks can
/// map an input to all-dead ReLU features and hence to zero limbs.
fn nondegenerate_observation(
    net: &MrpNet,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, CliError> {
    let j = net.config().joints();
    for _ in 0..100 {
        let obs = random_tensor(rng, vec![n, net.config().obs_dim()], 0.0, 1.0);
        let mut g = Graph::new(&net.params);
        let x = g.constant(obs.clone());
        let v = net.forward(&mut g, x)?;
        let clear = g.value(v.raw_limbs).chunks(3).enumerate().all(|(row, r)| {
            row % j == 0 || (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() > 1e-3
        });
        if clear {
            return Ok(obs);
        }
    }
    Err(CliError::Invariant(
        "no observation keeps the limb vectors away from zero".into(),
    ))
}

/// Finite-difference checks of every layer, the two-head forward pass with
/// its losses, the kinematic chain and both fusion losses.
pub fn gradcheck_suite(
    model: &MrpNetConfig,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<GradCheckSummary, CliError> {
    let mut checks = Vec::new();
    for seed in seeds {
        let gc = GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = model.joints();

        // Dense and residual layers.
        let mut store = ParamStore::new();
        let dense = Dense::new(&mut store, "dense", 5, 4, &mut rng);
        let block = ResidualBlock::new(&mut store, "block", 4, &mut rng);
        let x = random_tensor(&mut rng, vec![3, 5], -1.0, 1.0);
        let w = random_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        checks.push(report(
            "layers",
            seed,
            gradcheck::check(
                &store,
                |g| {
                    let xi = g.constant(x.clone());
                    let h = dense.forward(g, xi)?;
                    let h = block.forward(g, h)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(h, wv)?;
                    Ok(g.sum(p))
                },
                &gc,
            ),
        )?);

        // Two-head forward pass under the training losses.
        let net = MrpNet::new(model.clone(), seed)?;
        let n = 2;
        let obs = nondegenerate_observation(&net, n, &mut rng)?;
        let cells = model.grid.cells();
        let targets = losses::BatchTargets {
            heatmaps: (0..n * j * cells)
                .map(|_| rng.gen_range(0.0..0.2))
                .collect(),
            pose: (0..n * 3 * j).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        };
        let conf: Vec<f64> = (0..n * j).map(|_| rng.gen_range(0.1..1.0)).collect();
        let vis: Vec<bool> = (0..n * j).map(|_| rng.gen_bool(0.7)).collect();
        checks.push(report(
            "two_head_forward",
            seed,
            gradcheck::check(
                &net.params,
                |g| {
                    let x = g.constant(obs.clone());
                    let v = net.forward(g, x).expect("observation shape");
                    let run = |g: &mut Graph| -> mrp_core::Result<netcore::Var> {
                        let a = losses::loss_sup_source(
                            g,
                            &v,
                            &targets,
                            j,
                            losses::TermWeights::pose(1.0),
                            0.1,
                        )?;
                        let b = losses::loss_bg_uncertainty(g, &v, 10.0)?;
                        let c = losses::loss_psup_target(
                            g,
                            &v,
                            &targets,
                            &conf,
                            losses::TermWeights {
                                heatmap: 3.0,
                                pose: 1.0,
                            },
                        )?;
                        let d = losses::loss_sup_occlusion_aware(
                            g,
                            &v,
                            &targets,
                            &vis,
                            losses::TermWeights::pose(1.0),
                            0.1,
                        )?;
                        let e = losses::loss_bg_entropy(g, &v, j)?;
                        let s = g.add(a, b)?;
                        let s = g.add(s, c)?;
                        let s = g.add(s, d)?;
                        Ok(g.add(s, e)?)
                    };
                    Ok(run(g).expect("loss shapes are consistent"))
                },
                &gc,
            ),
        )?);

        // Kinematic chain from raw limb vectors to the 2D projection.
        let tree = model.skeleton.clone();
        let mut chain = ParamStore::new();
        let limbs = chain.add("limbs", random_tensor(&mut rng, vec![n, 3 * j], -1.0, 1.0));
        let angles = chain.add("angles", random_tensor(&mut rng, vec![n, 3], -1.5, 1.5));
        let scale = chain.add("scale", random_tensor(&mut rng, vec![n, 1], 0.3, 1.0));
        let trans = chain.add("translation", random_tensor(&mut rng, vec![n, 2], 0.2, 0.8));
        let wp = random_tensor(&mut rng, vec![n, 2 * j], -1.0, 1.0);
        let w3 = random_tensor(&mut rng, vec![n, 3 * j], -1.0, 1.0);
        checks.push(report(
            "kinematic_chain",
            seed,
            gradcheck::check(
                &chain,
                |g| {
                    let l = g.param(limbs);
                    let l = normalize_limbs_op(g, l, j);
                    let p = forward_kinematics_op(g, l, &tree);
                    let a = g.param(angles);
                    let pc = rotate_op(g, a, p);
                    let s = g.param(scale);
                    let t = g.param(trans);
                    let q = project_op(g, pc, s, t);
                    let wq = g.constant(wp.clone());
                    let wc = g.constant(w3.clone());
                    let e1 = g.mul(q, wq)?;
                    let e2 = g.mul(pc, wc)?;
                    let s1 = g.sum(e1);
                    let s2 = g.sum(e2);
                    g.add(s1, s2)
                },
                &gc,
            ),
        )?);

        // Fusion head under the pose-level and joint-level losses, with
        // respect to its weights and to its input.
        let fusion = FusionNet::new(j, 16, 1, seed);
        let input = random_tensor(&mut rng, vec![n, 6 * j], -1.0, 1.0);
        let target: Vec<f64> = (0..n * 3 * j).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let pose_w: Vec<f64> = conf.iter().flat_map(|&c| [c; 3]).collect();
        let joint_w: Vec<f64> = vis
            .iter()
            .flat_map(|&v| [if v { 1.0 } else { 0.0 }; 3])
            .collect();
        for (name, weights) in [
            ("fusion_pose_level", &pose_w),
            ("fusion_joint_level", &joint_w),
        ] {
            checks.push(report(
                name,
                seed,
                gradcheck::check(
                    &fusion.params,
                    |g| {
                        let x = g.constant(input.clone());
                        let y = fusion.forward(g, x).expect("fusion input shape");
                        Ok(
                            losses::weighted_squared_error(g, y, target.clone(), weights.clone())
                                .expect("fusion loss shape"),
                        )
                    },
                    &gc,
                ),
            )?);
            // The input as an extra parameter of a copy of the head.
            let mut with_input = fusion.params.clone();
            let xid = with_input.add("input", input.clone());
            checks.push(report(
                &format!("{name}_input"),
                seed,
                gradcheck::check_params(
                    &with_input,
                    &[xid],
                    |g| {
                        let x = g.param(xid);
                        let y = fusion.forward(g, x).expect("fusion input shape");
                        Ok(
                            losses::weighted_squared_error(g, y, target.clone(), weights.clone())
                                .expect("fusion loss shape"),
                        )
                    },
                    &gc,
                ),
            )?);
        }
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckSummary { passed, checks })
}

/// Gradient check over the configured model, `count` seeds from `seed`.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, count: u64) -> Result<GradCheckSummary, CliError> {
    gradcheck_suite(&cfg.model, cfg.seed..cfg.seed + count)
}
