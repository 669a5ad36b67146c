use mrp_core::heatmap::GridDims;
use mrp_core::model::{ForwardVars, FusionNet, MrpNet, MrpNetConfig};
use mrp_core::skeleton::mpjpe;
use mrp_core::synthdata::{Dataset, DomainSpec, OcclusionMix, Renderer};
use mrp_core::trainer::losses::{self, BatchTargets, TermWeights};
use mrp_core::trainer::{
    fit_fusion, train_fusion, train_joint_level, train_pose_level, DomainData, FusionRows,
    HyperParams, JointTerms, Level, PoseTerms,
};
use mrp_core::uncertainty::{predict_with_flip, select_joint_pseudo_labels, TargetRendering};
use netcore::{Gradients, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> MrpNetConfig {
    MrpNetConfig {
        image_size: 8,
        encoder_widths: vec![32],
        grid: GridDims {
            height: 4,
            width: 4,
        },
        trunk_blocks: 1,
        branch_blocks: 1,
        fusion_width: 64,
        fusion_blocks: 1,
        ..MrpNetConfig::default()
    }
}

fn make(spec: DomainSpec, mix: OcclusionMix, n: usize, seed: u64) -> Dataset {
    let cfg = config();
    Renderer::new(spec, cfg.skeleton.clone(), cfg.image_size, cfg.grid, 0.6)
        .unwrap()
        .build_dataset(n, mix, seed)
        .unwrap()
}

fn domain(mix: OcclusionMix, n: usize, seed: u64) -> DomainData {
    DomainData {
        source: make(DomainSpec::default_source(), mix, n, seed),
        target: make(DomainSpec::default_target(), mix, n, seed + 1),
        background: make(
            DomainSpec::default_background(),
            OcclusionMix {
                background: true,
                ..OcclusionMix::default()
            },
            n / 2,
            seed + 2,
        ),
    }
}

fn occluded() -> OcclusionMix {
    OcclusionMix {
        object: 0.4,
        truncation: 0.3,
        background: false,
    }
}

#[test]
fn zero_iterations_leave_parameters_unchanged() {
    let data = domain(occluded(), 8, 0);
    let hp = HyperParams {
        max_iter: 0,
        ..HyperParams::default()
    };
    let net = MrpNet::new(config(), 4).unwrap();
    let init = net.params.clone();
    let state = train_pose_level(net.clone(), &data, &data, &hp, PoseTerms::FULL).unwrap();
    assert_eq!(state.net.params, init);
    assert_eq!(state.metrics.len(), 1);
    let state = train_joint_level(net, &data, &data, &hp, JointTerms::FULL).unwrap();
    assert_eq!(state.net.params, init);
}

#[test]
fn plain_supervision_lowers_source_error() {
    let train = domain(OcclusionMix::default(), 200, 0);
    let held_out = domain(OcclusionMix::default(), 60, 100);
    let hp = HyperParams {
        max_iter: 500,
        batch_size: 16,
        eval_interval: Some(250),
        heatmap_weight: 16.0,
        lambda_uncertainty: 0.0,
        seed: 0,
        ..HyperParams::default()
    };
    let terms = PoseTerms {
        background: false,
        target_uncertainty: false,
        pseudo_labels: false,
    };
    let state = train_pose_level(
        MrpNet::new(config(), 0).unwrap(),
        &train,
        &held_out,
        &hp,
        terms,
    )
    .unwrap();
    let first = state.metrics.first().unwrap().source_mpjpe;
    let last = state.metrics.last().unwrap().source_mpjpe;
    assert!(last < first, "source MPJPE {first} -> {last}");
    assert!(state.losses.iter().all(|r| r.value.is_finite()));
}

#[test]
fn unassigned_pairs_receive_no_entropy_gradient() {
    let cfg = config();
    let tree = cfg.skeleton.clone();
    let j = tree.joint_count();
    let cells = cfg.grid.cells();
    let net = MrpNet::new(cfg.clone(), 2).unwrap();
    let data = make(DomainSpec::default_target(), occluded(), 10, 5);
    let n = data.len();
    let images: Vec<&[f64]> = data.samples.iter().map(|s| s.image.as_slice()).collect();
    let (out, flipped) = predict_with_flip(&net, &images).unwrap();
    let ids: Vec<usize> = (0..n).collect();
    let mut scores: Vec<f64> = out
        .iter()
        .zip(&flipped)
        .flat_map(|(o, f)| {
            let all = f64::INFINITY;
            select_joint_pseudo_labels(
                &[0],
                std::slice::from_ref(o),
                std::slice::from_ref(f),
                &tree,
                render(),
                all,
                all,
                0,
            )
            .unwrap()
            .labels[&0]
                .scores
                .clone()
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let (lo, hi) = (scores[scores.len() / 3], scores[2 * scores.len() / 3]);
    let sel = select_joint_pseudo_labels(&ids, &out, &flipped, &tree, render(), lo, hi, 0).unwrap();

    let mut in_view = Vec::new();
    let mut out_view = Vec::new();
    let mut t = BatchTargets::default();
    let mut conf = Vec::new();
    for id in &ids {
        let l = sel.get(*id).unwrap();
        in_view.extend_from_slice(&l.in_view);
        out_view.extend_from_slice(&l.out_view);
        t.heatmaps.extend_from_slice(l.heatmaps.values());
        t.pose.extend(l.pose_camera.to_flat());
        conf.extend_from_slice(&l.confidences);
    }
    let unassigned: Vec<bool> = in_view
        .iter()
        .zip(&out_view)
        .map(|(a, b)| !a && !b)
        .collect();
    assert!(
        unassigned.iter().any(|&u| u) && in_view.iter().any(|&u| u) && out_view.iter().any(|&u| u)
    );

    // Heatmaps and poses as free parameters so per-row gradients are visible.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let logits = store.add("logits", random(&mut rng, vec![n * j, cells]));
    let pose = store.add("pose", random(&mut rng, vec![n, 3 * j]));
    let in_coef: Vec<f64> = in_view.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let pseudo_coef: Vec<f64> = losses::normalized_weights(&conf, &in_view, j)
        .iter()
        .map(|w| w * j as f64)
        .collect();

    type Build<'a> = Box<dyn Fn(&mut Graph, &ForwardVars) -> netcore::Var + 'a>;
    let terms: Vec<(&str, Build)> = vec![
        (
            "in-view entropy",
            Box::new(|g, v| losses::weighted_entropy(g, v, &in_coef).unwrap()),
        ),
        (
            "out-view entropy",
            Box::new(|g, v| losses::entropy_deficit(g, v, &out_view).unwrap()),
        ),
        (
            "pseudo supervision",
            Box::new(|g, v| {
                losses::joint_losses(g, v, &t, &pseudo_coef, TermWeights::pose(1.0)).unwrap()
            }),
        ),
    ];
    for (name, build) in &terms {
        let mut grads = Gradients::for_store(&store);
        let mut g = Graph::new(&store);
        let h = g.param(logits);
        let h = g.softmax_rows(h);
        let p = g.param(pose);
        let v = ForwardVars {
            batch: n,
            features: p,
            heatmaps: h,
            localized: p,
            raw_limbs: p,
            limbs: p,
            angles: p,
            scale: p,
            translation: p,
            pose_canonical: p,
            pose_camera: p,
            projected: p,
        };
        let loss = build(&mut g, &v);
        g.backward(loss, &mut grads).unwrap();
        let gh = grads.get(logits);
        let gp = grads.get(pose);
        let mut touched = 0;
        for (k, &u) in unassigned.iter().enumerate() {
            let row = &gh[k * cells..(k + 1) * cells];
            let prow = &gp[k * 3..k * 3 + 3];
            if u {
                assert!(
                    row.iter().chain(prow).all(|&x| x == 0.0),
                    "{name}: pair {k} has gradient"
                );
            } else if row.iter().any(|&x| x != 0.0) {
                touched += 1;
            }
        }
        assert!(touched > 0, "{name} reaches no pair");
    }
}

#[test]
fn source_out_view_entropy_ignores_visible_joints() {
    let data = make(DomainSpec::default_source(), occluded(), 12, 3);
    let j = config().joints();
    let cells = config().grid.cells();
    let n = data.len();
    let hidden: Vec<bool> = data
        .samples
        .iter()
        .flat_map(|s| s.visibility.iter().map(|v| !v))
        .collect();
    assert!(hidden.iter().any(|&h| h));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let logits = store.add("logits", random(&mut rng, vec![n * j, cells]));
    let mut grads = Gradients::for_store(&store);
    let mut g = Graph::new(&store);
    let h = g.param(logits);
    let h = g.softmax_rows(h);
    let v = ForwardVars {
        batch: n,
        features: h,
        heatmaps: h,
        localized: h,
        raw_limbs: h,
        limbs: h,
        angles: h,
        scale: h,
        translation: h,
        pose_canonical: h,
        pose_camera: h,
        projected: h,
    };
    let loss = losses::entropy_deficit(&mut g, &v, &hidden).unwrap();
    g.backward(loss, &mut grads).unwrap();
    let gh = grads.get(logits);
    for (k, &hid) in hidden.iter().enumerate() {
        let nonzero = gh[k * cells..(k + 1) * cells].iter().any(|&x| x != 0.0);
        assert_eq!(nonzero, hid, "pair {k}");
    }
}

fn render() -> TargetRendering {
    TargetRendering {
        grid: config().grid,
        sigma: 0.6,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Fusion rows whose regression pose is the ground truth.
fn perfect_rows(net: &MrpNet, data: &Dataset) -> FusionRows {
    let images: Vec<&[f64]> = data.samples.iter().map(|s| s.image.as_slice()).collect();
    let mut rows = FusionRows::default();
    for (mut o, s) in net.predict(&images).unwrap().into_iter().zip(&data.samples) {
        o.pose_camera = s.gt().unwrap().pose_camera.clone();
        rows.inputs.push(FusionNet::input_row(&o));
        rows.targets.push(o.pose_camera.to_flat());
        rows.coef.push(vec![1.0; o.pose_camera.coords.len()]);
    }
    rows
}

#[test]
fn fusion_keeps_a_perfect_regression_pose() {
    let cfg = config();
    let net = MrpNet::new(cfg.clone(), 6).unwrap();
    let train = make(
        DomainSpec::default_source(),
        OcclusionMix::default(),
        120,
        8,
    );
    let test = make(DomainSpec::default_source(), OcclusionMix::default(), 40, 9);
    let rows = perfect_rows(&net, &train);
    let test_rows = perfect_rows(&net, &test);
    // Tolerance: 5% of the mean root-relative joint distance.
    let scale: f64 = test
        .samples
        .iter()
        .map(|s| {
            let p = &s.gt().unwrap().pose_camera.coords;
            p.iter().map(|c| (c - p[0]).norm()).sum::<f64>() / p.len() as f64
        })
        .sum::<f64>()
        / test.len() as f64;

    for pass_through in [true, false] {
        let hp = HyperParams {
            fusion_iters: if pass_through { 50 } else { 4000 },
            fusion_batch_size: 32,
            final_lr_fraction: 0.05,
            fusion_pass_through: pass_through,
            ..HyperParams::default()
        };
        let mut fusion = FusionNet::for_config(&cfg, 3);
        if pass_through {
            fusion.set_pass_through().unwrap();
        }
        let trace = fit_fusion(&mut fusion, &rows, &FusionRows::default(), &hp).unwrap();
        assert_eq!(trace.len(), hp.fusion_iters);
        let inputs: Vec<_> = net
            .predict(
                &test
                    .samples
                    .iter()
                    .map(|s| s.image.as_slice())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
            .into_iter()
            .zip(&test.samples)
            .map(|(mut o, s)| {
                o.pose_camera = s.gt().unwrap().pose_camera.clone();
                o
            })
            .collect();
        let fused = fusion.predict(&inputs).unwrap();
        let err: f64 = fused
            .iter()
            .zip(&test.samples)
            .map(|(p, s)| mpjpe(p, &s.gt().unwrap().pose_camera).unwrap())
            .sum::<f64>()
            / test.len() as f64;
        assert!(
            err <= 0.05 * scale,
            "pass-through {pass_through}: fused {err} vs tolerance {}",
            0.05 * scale
        );
        assert_eq!(test_rows.len(), test.len());
    }
}

#[test]
fn fusion_training_leaves_the_main_network_untouched() {
    let data = domain(occluded(), 12, 11);
    let net = MrpNet::new(config(), 1).unwrap();
    let before = net.params.clone();
    let hp = HyperParams {
        fusion_iters: 5,
        fusion_batch_size: 4,
        pose_threshold: 10.0,
        ..HyperParams::default()
    };
    for level in [Level::Pose, Level::Joint] {
        let run = train_fusion(&net, &data, &hp, level).unwrap();
        assert!(run.losses.iter().all(|r| r.value.is_finite()));
        assert_eq!(run.source_rows, data.source.len());
    }
    assert_eq!(net.params, before);
}

#[test]
fn fusion_rejects_rows_of_the_wrong_width() {
    let mut fusion = FusionNet::for_config(&config(), 0);
    let rows = FusionRows {
        inputs: vec![vec![0.0; 5]],
        targets: vec![vec![0.0; 51]],
        coef: vec![vec![1.0; 17]],
    };
    assert!(fit_fusion(
        &mut fusion,
        &rows,
        &FusionRows::default(),
        &HyperParams::default()
    )
    .is_err());
}
