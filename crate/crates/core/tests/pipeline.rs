use dinoreg_core::config::PipelineConfig;
use dinoreg_core::eval::pose_errors;
use dinoreg_core::fusion::FusionMode;
use dinoreg_core::geometry::RigidTransform;
use dinoreg_core::model::{init_weights, InitMode, Model};
use dinoreg_core::pipeline::{register, PairInput, Providers};
use dinoreg_core::synthetic::{identical_pair, synthetic_pair, SceneParams};
use dinoreg_core::transformer::AttentionMode;
use dinoreg_core::Error;
use nalgebra::Vector3;

fn setup(cfg: &PipelineConfig) -> (Model, Providers) {
    let store = init_weights(&cfg.architecture, InitMode::IdentityReduction, 0).unwrap();
    (Model::from_weights(&store, cfg).unwrap(), Providers::from_config(cfg).unwrap())
}

fn input(seed: u64) -> PairInput {
    let p = synthetic_pair(seed, &SceneParams::default()).unwrap();
    PairInput {
        source: p.source,
        target: p.target,
        gt: Some(p.gt),
    }
}

#[test]
fn identical_clouds_register_to_identity() {
    let cfg = PipelineConfig::synthetic();
    let (model, providers) = setup(&cfg);
    let p = identical_pair(2, &SceneParams::default()).unwrap();
    let pair = PairInput {
        source: p.source,
        target: p.target,
        gt: Some(p.gt),
    };
    let r = register(&pair, &cfg, &model, &providers, 0).unwrap();
    let e = pose_errors(&r.transform, &RigidTransform::identity());
    assert!(e.rte_m < 1e-3, "{e:?}");
    assert!(e.rre_deg < 0.1, "{e:?}");
    assert!(r.metrics.unwrap().ir.value() > 0.9);
}

#[test]
fn camera_facing_away_has_no_valid_patches() {
    let cfg = PipelineConfig::synthetic();
    let (model, providers) = setup(&cfg);
    let mut pair = input(1);
    let flip = RigidTransform::from_axis_angle(&Vector3::x(), std::f64::consts::PI, Vector3::zeros());
    pair.target.camera = pair.target.camera.clone().with_extrinsics(flip).unwrap();
    let err = register(&pair, &cfg, &model, &providers, 0).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "mapping", .. }), "{err}");
    assert!(matches!(err.root(), Error::NoValidPatches));
    assert!(err.to_string().contains("no valid patches"));
}

#[test]
fn geo_and_mixed_modes_both_complete() {
    let pair = input(4);
    for mode in [AttentionMode::Geo, AttentionMode::Mixed] {
        let cfg = PipelineConfig {
            attention_mode: mode,
            ..PipelineConfig::synthetic()
        };
        let (model, providers) = setup(&cfg);
        let r = register(&pair, &cfg, &model, &providers, 0).unwrap();
        assert_eq!(r.attention_mode, mode);
        assert!(r.metrics.unwrap().registered, "{mode:?}");
    }
}

#[test]
fn every_fusion_ablation_runs_end_to_end() {
    let pair = input(6);
    for mode in [FusionMode::Full, FusionMode::GeometricOnly, FusionMode::VisualOnly, FusionMode::ConcatNoFfn] {
        let cfg = PipelineConfig {
            fusion_mode: mode,
            ..PipelineConfig::synthetic()
        };
        let (model, providers) = setup(&cfg);
        match register(&pair, &cfg, &model, &providers, 0) {
            Ok(r) => {
                assert_eq!(r.fusion_mode, mode);
                assert!(!r.point_matches.is_empty(), "{mode:?}");
            }
            // handcrafted geometry alone may leave no patch pair with enough local matches
            Err(e) => {
                assert_eq!(mode, FusionMode::GeometricOnly, "{e}");
                assert!(matches!(e, Error::Stage { stage: "estimation", .. }), "{e}");
                assert!(matches!(e.root(), Error::InsufficientCorrespondences));
            }
        }
    }
}

#[test]
fn repeated_runs_are_identical() {
    let cfg = PipelineConfig {
        noise_sigma: 2.0,
        ..PipelineConfig::synthetic()
    };
    let (model, providers) = setup(&cfg);
    let pair = input(9);
    let a = register(&pair, &cfg, &model, &providers, 17).unwrap();
    let b = register(&pair, &cfg, &model, &providers, 17).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
