mod common;

use mvpgs_core::fixtures::{generate_scene_with, FixtureOptions, Preset, SceneFixture};
use mvpgs_core::losses::IterKind;
use mvpgs_core::pipeline::{prepare, run_pipeline, PipelineConfig};
use mvpgs_core::train::{build_warp_cache, train, warp_depths, TrainConfig, TrainInputs};
use mvpgs_core::warp::forward_warp;

fn small() -> SceneFixture {
    let opts = FixtureOptions {
        width: 24,
        height: 24,
        supersample: 2,
    };
    generate_scene_with(Preset::ThreePlanes, 5, &opts)
}

fn inputs(fx: &SceneFixture, cfg: &PipelineConfig) -> TrainInputs {
    let views = fx.train_views();
    let p = prepare(&views, cfg).unwrap();
    TrainInputs {
        views,
        masks: p.masks,
        init: p.init,
        warp_cache: Some(p.warp_cache),
        extent: p.extent,
    }
}

#[test]
fn warp_cache_is_complete_and_pure() {
    let fx = small();
    let cfg = PipelineConfig::default();
    let views = fx.train_views();
    let p = prepare(&views, &cfg).unwrap();
    let cache = &p.warp_cache;
    assert_eq!(cache.entries.len(), 24 * 3);
    let depths = warp_depths(&views, Some(&p.masks));
    for e in cache.entries.iter().step_by(7) {
        let v = &views[e.src];
        let fresh = forward_warp(&v.image, depths[e.src].as_ref().unwrap(), &v.pose, &cache.poses[e.unseen], &v.intrinsics).ok();
        let cached = e.result.as_ref();
        assert_eq!(cached.map(|r| &r.image), fresh.as_ref().map(|r| &r.image));
        assert_eq!(cached.map(|r| &r.coverage), fresh.as_ref().map(|r| &r.coverage));
    }
}

#[test]
fn identity_unseen_pose_reproduces_source() {
    let fx = small();
    let views = fx.train_views();
    let depths = warp_depths(&views, None);
    let cache = build_warp_cache(&views, &depths, &[views[1].pose]);
    let r = cache.entries[1].result.as_ref().unwrap();
    let d = views[1].mvs_depth.as_ref().unwrap();
    for p in 0..d.valid.len() {
        if d.valid[p] {
            assert!(r.coverage[p]);
            assert_eq!(r.image.data[p * 3..p * 3 + 3], views[1].image.data[p * 3..p * 3 + 3]);
        }
    }
}

#[test]
fn zero_iterations_return_initialization() {
    let fx = small();
    let cfg = PipelineConfig {
        train: TrainConfig {
            num_iters: 0,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let inp = inputs(&fx, &cfg);
    let r = train(&inp, &cfg.train).unwrap();
    assert_eq!(r.gaussians, inp.init);
    assert!(r.telemetry.is_empty());
}

#[test]
fn telemetry_follows_iteration_schedule() {
    let fx = small();
    let cfg = PipelineConfig {
        train: TrainConfig {
            num_iters: 60,
            densify_from: 20,
            densify_every: 20,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let r = train(&inputs(&fx, &cfg), &cfg.train).unwrap();
    assert_eq!(r.telemetry.len(), 60);
    for (k, rec) in r.telemetry.iter().enumerate() {
        assert_eq!(rec.iter, k + 1);
        let want = if rec.iter % 3 == 0 { IterKind::Unseen } else { IterKind::Train };
        assert_eq!(rec.kind(), want);
        assert!(rec.total.is_finite());
    }
    assert!(!r.densify.is_empty());
    assert!(r.gaussians.is_consistent());

    let off = TrainConfig { use_fwd: false, ..cfg.train };
    let r = train(&inputs(&fx, &cfg), &off).unwrap();
    assert!(r.telemetry.iter().all(|t| t.kind() == IterKind::Train));
}

#[test]
fn same_seed_same_checkpoint() {
    let fx = small();
    let tests = common::fixture_tests(&fx);
    let cfg = PipelineConfig {
        train: TrainConfig {
            num_iters: 80,
            densify_from: 20,
            densify_every: 20,
            seed: 11,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let a = run_pipeline(&fx.train_views(), &tests, &cfg).unwrap();
    let b = run_pipeline(&fx.train_views(), &tests, &cfg).unwrap();
    assert_eq!(a.trained.gaussians, b.trained.gaussians);
    assert_eq!(a.report, b.report);
    let other = PipelineConfig {
        train: TrainConfig { seed: 12, ..cfg.train },
        ..cfg
    };
    let c = run_pipeline(&fx.train_views(), &tests, &other).unwrap();
    assert_ne!(a.trained.gaussians, c.trained.gaussians);
}
