//! Property tests over the public API.

use std::collections::BTreeSet;

use dinoreg_core::camera::{project_to_pixels, scale_coordinate, scale_to_grid, GridCell, PixelMapping};
use dinoreg_core::config::PipelineConfig;
use dinoreg_core::dataset::{classify, group_pairs, Bin, BuildParams, Split};
use dinoreg_core::estimation::{lgr, weighted_procrustes, EstimationConfig};
use dinoreg_core::eval::{evaluate_pair, pose_errors, summarize, MetricThresholds};
use dinoreg_core::features::synthetic::cosine;
use dinoreg_core::features::{FeatureProvider, FeatureSource, PatchFeatureMap, SyntheticVisualProvider};
use dinoreg_core::fusion::{fuse_patches, FusionLayers, FusionMode, WindowConv};
use dinoreg_core::geometry::{grid_subsample, RigidTransform};
use dinoreg_core::matching::{match_patches, match_points, PatchMatch, PatchMatchConfig, PointMatch, PointMatchConfig};
use dinoreg_core::model::{init_weights, InitMode, Model};
use dinoreg_core::nn::{Linear, Mlp};
use dinoreg_core::synthetic::{synthetic_pair, SceneParams};
use dinoreg_core::transformer::{softmax_rows, AttentionMode, GeometricEmbedding};
use nalgebra::{DMatrix, DVector, Point3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    RigidTransform::from_axis_angle(
        &axis,
        rng.random_range(0.0..std::f64::consts::PI),
        Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear {
    let w = random_matrix(rng, out, inp) / (inp as f64).sqrt();
    let b = DVector::from_fn(out, |_, _| rng.random_range(-0.1..0.1));
    Linear::new(w, b).unwrap()
}

fn mapping(pixels: Vec<[f64; 2]>, width: u32, height: u32) -> PixelMapping {
    let n = pixels.len();
    let valid = pixels
        .iter()
        .map(|&[u, v]| u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64)
        .collect();
    PixelMapping {
        pixels,
        in_front: vec![true; n],
        valid,
        width,
        height,
    }
}

/// Channels: visual 6, geometric 5, reduced 4, hidden 7, fused 8.
fn random_fusion(rng: &mut ChaCha8Rng) -> FusionLayers {
    let weights = (0..9).map(|_| random_matrix(rng, 6, 6)).collect();
    let biases = (0..9).map(|_| DVector::from_fn(6, |_, _| rng.random_range(-0.1..0.1))).collect();
    let layers = FusionLayers {
        window: WindowConv::new(3, weights, biases).unwrap(),
        reduce_g: random_linear(rng, 4, 5),
        reduce_v: random_linear(rng, 4, 6),
        ffn: Mlp::new(random_linear(rng, 7, 8), random_linear(rng, 8, 7), 0.01).unwrap(),
        resize: random_linear(rng, 8, 8),
    };
    layers.validate().unwrap();
    layers
}

type PointMatchInstance = (Vec<PatchMatch>, Vec<Vec<usize>>, Vec<Vec<usize>>, DMatrix<f64>, DMatrix<f64>);

fn point_match_instance(rng: &mut ChaCha8Rng) -> PointMatchInstance {
    let split = |rng: &mut ChaCha8Rng, patches: usize| -> Vec<Vec<usize>> {
        let mut start = 0;
        (0..patches)
            .map(|_| {
                let len = rng.random_range(1..12);
                start += len;
                (start - len..start).collect()
            })
            .collect()
    };
    let mp = split(rng, 4);
    let mq = split(rng, 3);
    let np = mp.iter().map(Vec::len).sum();
    let nq = mq.iter().map(Vec::len).sum();
    let fp = random_matrix(rng, np, 8);
    let fq = random_matrix(rng, nq, 8);
    let pm = (0..4)
        .flat_map(|p| (0..3).map(move |q| (p, q)))
        .filter(|_| rng.random_bool(0.5))
        .map(|(p, q)| PatchMatch { p, q, score: 0.5 })
        .collect();
    (pm, mp, mq, fp, fq)
}

/// Point matches grouped ten per patch pair: most groups are clean
/// correspondences under `gt`, the rest are displaced by at least 0.5 m.
fn lgr_instance(rng: &mut ChaCha8Rng) -> (Vec<Point3<f64>>, Vec<Point3<f64>>, Vec<PointMatch>) {
    let gt = random_transform(rng);
    let inv = gt.inverse();
    let pp = random_points(rng, 120, 2.0);
    let mut pq = Vec::with_capacity(pp.len());
    let mut matches = Vec::with_capacity(pp.len());
    for (i, p) in pp.iter().enumerate() {
        let group = i / 10;
        let outlier = group >= 8 || rng.random_bool(0.2);
        let offset = if outlier {
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            dir.normalize() * rng.random_range(0.5..2.0)
        } else {
            Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01))
        };
        pq.push(inv.apply(&(p + offset)));
        matches.push(PointMatch {
            p: i,
            q: i,
            conf: rng.random_range(0.1..1.0),
            patch_pair: group,
        });
    }
    (pp, pq, matches)
}

proptest! {
    #[test]
    fn grid_scaling_is_monotone(a in 0.0f64..640.0, b in 0.0f64..640.0, grid in 1u32..100) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(scale_coordinate(lo, 640, grid) <= scale_coordinate(hi, 640, grid));
    }

    #[test]
    fn grid_cell_is_the_containing_14px_region(cols in 1u32..60, rows in 1u32..60, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (14 * cols, 14 * rows);
        let px: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)])
            .collect();
        let grid = scale_to_grid(&mapping(px.clone(), w, h), cols, rows).unwrap();
        for (&[u, v], cell) in px.iter().zip(&grid.cells) {
            let cell = cell.expect("inside the image");
            prop_assert!(cell.u < cols as usize && cell.v < rows as usize);
            prop_assert!((14 * cell.u) as f64 <= u && u < (14 * cell.u + 14) as f64);
            prop_assert!((14 * cell.v) as f64 <= v && v < (14 * cell.v + 14) as f64);
        }
    }

    #[test]
    fn fusion_commutes_with_patch_permutation(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = random_fusion(&mut rng);
        let n = 12;
        let data: Vec<f32> = (0..5 * 4 * 6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let map = PatchFeatureMap::new(4, 5, 6, data, FeatureSource::Synthetic).unwrap();
        let centers = random_points(&mut rng, n, 1.0);
        let feats = random_matrix(&mut rng, n, 5);
        let px: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..70.0), rng.random_range(0.0..56.0)]).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let run = |order: &[usize], mode: FusionMode| {
            let c: Vec<_> = order.iter().map(|&i| centers[i]).collect();
            let f = DMatrix::from_fn(n, 5, |r, k| feats[(order[r], k)]);
            let pixels = mapping(order.iter().map(|&i| px[i]).collect(), 70, 56);
            let grid = scale_to_grid(&pixels, 5, 4).unwrap();
            fuse_patches(&map, &c, &f, &pixels, &grid, &layers, mode).unwrap()
        };
        let identity: Vec<usize> = (0..n).collect();
        for mode in [FusionMode::Full, FusionMode::GeometricOnly, FusionMode::VisualOnly, FusionMode::ConcatNoFfn] {
            let base = run(&identity, mode);
            let moved = run(&perm, mode);
            prop_assert_eq!(base.features.shape(), (n, 8));
            for (r, &src) in perm.iter().enumerate() {
                let diff = (moved.features.row(r) - base.features.row(src)).amax();
                prop_assert!(diff < 1e-12, "mode {:?} row {}: {}", mode, r, diff);
                prop_assert_eq!(moved.cells[r], base.cells[src]);
            }
        }
    }

    #[test]
    fn projected_pairs_invariant_under_isometry(seed in 0u64..100, n in 2usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 16;
        let emb = GeometricEmbedding {
            dist_proj: random_linear(&mut rng, d, d),
            angle_proj: random_linear(&mut rng, d, d),
            sigma_d: 0.5,
            sigma_a: 15.0,
            angle_k: 3,
        };
        let wr = random_matrix(&mut rng, d, d);
        let centers = random_points(&mut rng, n, 2.0);
        let s = random_transform(&mut rng);
        let moved: Vec<_> = centers.iter().map(|c| s.apply(c)).collect();
        let a = emb.projected_pairs(&centers, &wr, 0.01).unwrap();
        let b = emb.projected_pairs(&moved, &wr, 0.01).unwrap();
        prop_assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn patch_matching_ignores_feature_scale(seed in 0u64..300, sp in 1e-3f64..1e3, sq in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fp = random_matrix(&mut rng, 15, 6);
        let fq = random_matrix(&mut rng, 12, 6);
        let cfg = PatchMatchConfig { top_k: 40, ..Default::default() };
        let a = match_patches(&fp, &fq, &cfg).unwrap();
        let b = match_patches(&(&fp * sp), &(&fq * sq), &cfg).unwrap();
        prop_assert_eq!(a.matches.len(), b.matches.len());
        for (x, y) in a.matches.iter().zip(&b.matches) {
            prop_assert_eq!((x.p, x.q), (y.p, y.q));
            prop_assert!((x.score - y.score).abs() < 1e-6);
        }
    }

    #[test]
    fn mutual_point_matches_transpose_under_swap(seed in 0u64..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pm, mp, mq, fp, fq) = point_match_instance(&mut rng);
        let swapped: Vec<PatchMatch> = pm.iter().map(|m| PatchMatch { p: m.q, q: m.p, score: m.score }).collect();
        let cfg = PointMatchConfig { score_scale: Some(3.0), ..Default::default() };
        let a = match_points(&pm, &mp, &mq, &fp, &fq, 1.0, &cfg).unwrap();
        let b = match_points(&swapped, &mq, &mp, &fq, &fp, 1.0, &cfg).unwrap();
        let x: BTreeSet<(usize, usize)> = a.matches.iter().map(|m| (m.p, m.q)).collect();
        let y: BTreeSet<(usize, usize)> = b.matches.iter().map(|m| (m.q, m.p)).collect();
        prop_assert_eq!(x, y);
        for m in &a.matches {
            let pair = pm[m.patch_pair];
            prop_assert!(mp[pair.p].contains(&m.p) && mq[pair.q].contains(&m.q));
            prop_assert!(m.conf > 0.0 && m.conf <= 1.0);
        }
    }

    #[test]
    fn procrustes_rotation_is_proper(seed in 0u64..1000, n in 3usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_points(&mut rng, n, 2.0);
        let q = random_points(&mut rng, n, 2.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let r = weighted_procrustes(&p, &q, &w).unwrap().transform.rotation;
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lgr_follows_source_frame_motion(seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pp, pq, matches) = lgr_instance(&mut rng);
        let s = random_transform(&mut rng);
        let cfg = EstimationConfig::default();
        let base = lgr(&pp, &pq, &matches, &cfg).unwrap();
        let moved_p: Vec<_> = pp.iter().map(|p| s.apply(p)).collect();
        let moved = lgr(&moved_p, &pq, &matches, &cfg).unwrap();
        prop_assert_eq!(&base.inliers, &moved.inliers);
        let expect = s.compose(&base.transform);
        prop_assert!((expect.rotation - moved.transform.rotation).amax() < 1e-6);
        prop_assert!((expect.translation - moved.transform.translation).amax() < 1e-6);
        prop_assert!(base.inlier_history.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(moved.inlier_history.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn exact_estimate_is_always_registered(seed in 0u64..200, pairs in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = MetricThresholds::default();
        let metrics: Vec<_> = (0..pairs)
            .map(|_| {
                let gt = random_transform(&mut rng);
                let pp = random_points(&mut rng, 40, 1.0);
                let pq: Vec<_> = pp.iter().map(|p| gt.inverse().apply(p)).collect();
                evaluate_pair(&pp, &pq, &[], &[], &[], &[], &gt, &gt, &t).unwrap()
            })
            .collect();
        let refs: Vec<_> = metrics.iter().map(Some).collect();
        prop_assert_eq!(summarize(&refs, &t).rr, 1.0);
    }

    #[test]
    fn rotation_error_is_symmetric(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        prop_assert!((pose_errors(&a, &b).rre_deg - pose_errors(&b, &a).rre_deg).abs() < 1e-9);
    }

    #[test]
    fn bins_partition_kept_test_pairs(overlap in 0.0f64..=1.0) {
        let params = BuildParams::default();
        let [lo, mid, hi] = params.bins;
        let tag = classify(overlap, Split::Test, &params);
        let in_lo = (lo..mid).contains(&overlap);
        let in_hi = (mid..=hi).contains(&overlap);
        prop_assert!(!(in_lo && in_hi));
        prop_assert_eq!(tag == Some(Bin::Lo), in_lo);
        prop_assert_eq!(tag == Some(Bin::Hi), in_hi);
        prop_assert_eq!(tag.is_none(), !in_lo && !in_hi);
    }

    #[test]
    fn group_traversal_count(samples in 0usize..400, group in 1usize..80) {
        let pairs = group_pairs(samples, group);
        let full = samples / group;
        let rest = samples % group;
        let expect = full * group * (group - 1) / 2 + rest * rest.saturating_sub(1) / 2;
        prop_assert_eq!(pairs.len(), expect);
        prop_assert!(pairs.iter().all(|&(i, j)| i < j && i / group == j / group));
    }
}

#[test]
fn mixed_scores_softmax_to_one() {
    let cfg = PipelineConfig::synthetic();
    assert_eq!(cfg.attention_mode, AttentionMode::Mixed);
    let store = init_weights(&cfg.architecture, InitMode::Random, 4).unwrap();
    let model = Model::from_weights(&store, &cfg).unwrap();
    let tf = &model.transformer;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [1, 7, 40] {
        let centers = random_points(&mut rng, n, 2.0);
        let px: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let enc = tf.encode_frame(&centers, &px).unwrap();
        let f = random_matrix(&mut rng, n, tf.dim()) * 3.0;
        for layer in &tf.layers {
            for s in layer.self_attn.attention_scores(&f, AttentionMode::Mixed, Some(&enc)).unwrap() {
                let a = softmax_rows(&s);
                for row in a.row_iter() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn synthetic_visual_similarity_margin() {
    let params = SceneParams::default();
    for seed in 0..50u64 {
        let pair = synthetic_pair(seed, &params).unwrap();
        let provider = SyntheticVisualProvider::new(64, 0.3, seed).unwrap();
        let map_a = provider.visual_map(&pair.source).unwrap();
        let map_b = provider.visual_map(&pair.target).unwrap();
        let patches = grid_subsample(&pair.source.cloud, 0.2).unwrap();
        let in_target: Vec<Point3<f64>> = patches.centers.iter().map(|c| pair.gt.inverse().apply(c)).collect();
        let cells = |pts: &[Point3<f64>], frame: &dinoreg_core::features::Frame| -> Vec<Option<GridCell>> {
            let (gw, gh) = provider.grid_size(&frame.camera);
            scale_to_grid(&project_to_pixels(pts, &frame.camera), gw, gh).unwrap().cells
        };
        let ca = cells(&patches.centers, &pair.source);
        let cb = cells(&in_target, &pair.target);
        let both: Vec<(GridCell, GridCell)> = ca.iter().zip(&cb).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect();
        assert!(both.len() > 20, "seed {seed}: {} shared patches", both.len());
        let feat = |map: &PatchFeatureMap, c: GridCell| map.cell(c.v, c.u).iter().map(|&x| x as f64).collect::<Vec<_>>();
        let n = both.len();
        let same = both.iter().map(|&(a, b)| cosine(&feat(&map_a, a), &feat(&map_b, b))).sum::<f64>() / n as f64;
        let diff = (0..n)
            .map(|i| cosine(&feat(&map_a, both[i].0), &feat(&map_b, both[(i + n / 2) % n].1)))
            .sum::<f64>()
            / n as f64;
        assert!(same - diff >= 0.3, "seed {seed}: same {same:.3} different {diff:.3}");
    }
}
