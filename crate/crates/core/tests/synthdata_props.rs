use mrp_core::heatmap::{render_gaussian_heatmap, GridDims};
use mrp_core::skeleton::{camera_transform, KinematicTree};
use mrp_core::synthdata::{DomainSpec, Occlusion, OcclusionMix, Renderer};

fn renderer(spec: DomainSpec) -> Renderer {
    Renderer::new(
        spec,
        KinematicTree::default_17(),
        32,
        GridDims::DEFAULT,
        1.0,
    )
    .unwrap()
}

fn mix() -> OcclusionMix {
    OcclusionMix {
        object: 0.4,
        truncation: 0.3,
        background: false,
    }
}

#[test]
fn ground_truth_is_consistent_with_the_camera() {
    for spec in [DomainSpec::default_source(), DomainSpec::default_target()] {
        let r = renderer(spec);
        let data = r.build_dataset(300, mix(), 4).unwrap();
        for s in &data.samples {
            let gt = s.gt().unwrap();
            let (p, q) = camera_transform(&gt.canonical, &gt.camera);
            for (a, b) in p.coords.iter().zip(&gt.pose_camera.coords) {
                assert!((a - b).norm() < 1e-9);
            }
            for (a, b) in q.coords.iter().zip(&gt.pose_2d.coords) {
                assert!((a - b).norm() < 1e-9);
            }
            let h = render_gaussian_heatmap(&gt.pose_2d, GridDims::DEFAULT, 1.0).unwrap();
            assert_eq!(h, gt.heatmaps);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn visibility_follows_frame_and_occluder_geometry() {
    let r = renderer(DomainSpec::default_target());
    let data = r.build_dataset(400, mix(), 8).unwrap();
    let mut kinds = [0usize; 3];
    for s in &data.samples {
        let gt = s.gt().unwrap();
        let inside = |j: usize| {
            let c = gt.pose_2d.coords[j];
            (0.0..=1.0).contains(&c.x) && (0.0..=1.0).contains(&c.y)
        };
        for j in 0..17 {
            let c = gt.pose_2d.coords[j];
            let expected = match s.occlusion {
                Occlusion::None => inside(j),
                Occlusion::Object { rect } => inside(j) && !rect.contains(&c),
                Occlusion::Truncation { .. } => inside(j),
            };
            assert_eq!(s.visibility[j], expected, "sample {} joint {j}", s.id);
        }
        let all = s.visibility.iter().all(|&v| v);
        let clean = s.occlusion == Occlusion::None && (0..17).all(inside);
        if clean {
            assert!(all);
        }
        kinds[match s.occlusion {
            Occlusion::None => 0,
            Occlusion::Object { .. } => 1,
            Occlusion::Truncation { .. } => 2,
        }] += 1;
    }
    assert!(kinds.iter().all(|&k| k > 50), "{kinds:?}");
}

#[test]
fn clean_sets_keep_every_joint_in_view() {
    let r = renderer(DomainSpec::default_source());
    let data = r.build_dataset(200, OcclusionMix::default(), 1).unwrap();
    for s in &data.samples {
        assert_eq!(s.occlusion, Occlusion::None);
        assert!(s.visibility.iter().all(|&v| v));
    }
}

#[test]
fn generation_is_reproducible_per_seed() {
    let r = renderer(DomainSpec::default_source());
    let a = r.build_dataset(50, mix(), 21).unwrap();
    let b = r.build_dataset(50, mix(), 21).unwrap();
    assert_eq!(a.samples, b.samples);
    let c = r.build_dataset(50, mix(), 22).unwrap();
    assert_ne!(a.samples[0].image, c.samples[0].image);
}

#[test]
fn backgrounds_have_no_person() {
    let r = renderer(DomainSpec::default_background());
    let data = r
        .build_dataset(
            20,
            OcclusionMix {
                background: true,
                ..OcclusionMix::default()
            },
            3,
        )
        .unwrap();
    assert!(data.samples.iter().all(|s| s.is_background()));
    let flipped = r.flip_observation(&data.samples[0]);
    assert!(flipped.is_background());
    assert_eq!(r.flip_observation(&flipped).image, data.samples[0].image);
}
