//! End-to-end registration of one pair.

use std::time::Instant;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::camera::{inject_pixel_noise, project_to_pixels, scale_to_grid};
use crate::config::{PipelineConfig, VisualProviderConfig};
use crate::error::{Error, Result, StageExt};
use crate::estimation::lgr;
use crate::eval::{evaluate_pair, PairMetrics};
use crate::features::{check_provider_dims, FeatureProvider, FileVisualProvider, Frame, HandcraftedProvider, SyntheticVisualProvider};
use crate::fusion::{fuse_patches, FusedPatchSet, FusionMode};
use crate::geometry::{grid_subsample, PatchSet, RigidTransform};
use crate::matching::{match_patches, match_points, PatchMatch, PointMatch};
use crate::model::Model;
use crate::transformer::AttentionMode;

/// Visual and geometric feature sources selected by the configuration.
pub struct Providers {
    pub visual: Box<dyn FeatureProvider>,
    pub geometric: HandcraftedProvider,
}

impl Providers {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let a = &cfg.architecture;
        let visual: Box<dyn FeatureProvider> = match cfg.visual_provider {
            VisualProviderConfig::Synthetic { length_scale, seed } => {
                Box::new(SyntheticVisualProvider::new(a.visual_channels, length_scale, seed)?)
            }
            VisualProviderConfig::File => Box::new(FileVisualProvider {
                channels: a.visual_channels,
            }),
        };
        let g = &cfg.geometric_provider;
        let geometric = HandcraftedProvider::with_params(a.geometric_channels, a.point_channels, g.neighbors, g.bandwidth, g.seed)?;
        check_provider_dims(visual.as_ref(), &geometric, a.visual_channels, a.geometric_channels, Some(a.point_channels))?;
        Ok(Self { visual, geometric })
    }
}

/// Two frames to register; `gt` maps target coordinates into the source frame.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub source: Frame,
    pub target: Frame,
    pub gt: Option<RigidTransform>,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub subsample: f64,
    pub mapping: f64,
    pub features: f64,
    pub fusion: f64,
    pub transformer: f64,
    pub patch_matching: f64,
    pub point_matching: f64,
    pub estimation: f64,
    pub metrics: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps target coordinates into the source frame.
    pub transform: RigidTransform,
    pub attention_mode: AttentionMode,
    pub fusion_mode: FusionMode,
    pub noise_sigma: f64,
    /// Patches per side, and how many of them map onto the feature grid.
    pub patches: [usize; 2],
    pub valid_patches: [usize; 2],
    /// Indices refer to the voxel patches of each cloud.
    pub patch_matches: Vec<PatchMatch>,
    /// Indices refer to cloud points.
    pub point_matches: Vec<PointMatch>,
    pub inliers: usize,
    pub metrics: Option<PairMetrics>,
    /// Kept out of reports so they stay reproducible.
    #[serde(skip)]
    pub timing: Timing,
}

struct Side {
    patches: PatchSet,
    fused: FusedPatchSet,
    point_features: nalgebra::DMatrix<f64>,
}

fn lap(clock: &mut Instant) -> f64 {
    let now = Instant::now();
    let dt = now.duration_since(*clock).as_secs_f64();
    *clock = now;
    dt
}

fn prepare(
    frame: &Frame,
    cfg: &PipelineConfig,
    model: &Model,
    providers: &Providers,
    noise_seed: u64,
    timing: &mut Timing,
) -> Result<Side> {
    let mut clock = Instant::now();
    let patches = grid_subsample(&frame.cloud, cfg.voxel_size).stage("subsample")?;
    timing.subsample += lap(&mut clock);

    frame.camera.validate().stage("mapping")?;
    let clean = project_to_pixels(&patches.centers, &frame.camera);
    let pixels = inject_pixel_noise(&clean, cfg.noise_sigma, noise_seed).stage("mapping")?;
    if pixels.valid_count() == 0 {
        return Err(Error::NoValidPatches).stage("mapping");
    }
    timing.mapping += lap(&mut clock);

    let map = providers.visual.visual_map(frame).stage("features")?;
    let geo = providers.geometric.patch_features(frame, &patches).stage("features")?;
    let point_features = providers.geometric.point_features(frame, &patches).stage("features")?;
    timing.features += lap(&mut clock);

    let grid = scale_to_grid(&pixels, map.width as u32, map.height as u32).stage("mapping")?;
    if grid.valid_indices().is_empty() {
        return Err(Error::NoValidPatches).stage("mapping");
    }
    timing.mapping += lap(&mut clock);

    let fused = fuse_patches(&map, &patches.centers, &geo, &pixels, &grid, &model.fusion, cfg.fusion_mode).stage("fusion")?;
    timing.fusion += lap(&mut clock);
    Ok(Side {
        patches,
        fused,
        point_features,
    })
}

fn patch_points(frame: &Frame, patches: &PatchSet) -> Vec<Vec<Point3<f64>>> {
    patches
        .members()
        .iter()
        .map(|m| m.iter().map(|&i| frame.cloud.points[i]).collect())
        .collect()
}

/// Deterministic given the configuration, weights, inputs and `noise_seed`.
pub fn register(
    pair: &PairInput,
    cfg: &PipelineConfig,
    model: &Model,
    providers: &Providers,
    noise_seed: u64,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    let mut timing = Timing::default();
    let p = prepare(&pair.source, cfg, model, providers, noise_seed, &mut timing)?;
    let q = prepare(&pair.target, cfg, model, providers, noise_seed ^ 0x5851_F42D_4C95_7F2D, &mut timing)?;

    let mut clock = Instant::now();
    let (fp, fq) = model.transformer.forward(&p.fused, &q.fused).stage("transformer")?;
    timing.transformer = lap(&mut clock);

    let coarse = match_patches(&fp, &fq, &cfg.patch_matching).stage("patch-matching")?;
    let patch_matches: Vec<PatchMatch> = coarse
        .matches
        .iter()
        .map(|m| PatchMatch {
            p: p.fused.patch_ids[m.p],
            q: q.fused.patch_ids[m.q],
            score: m.score,
        })
        .collect();
    timing.patch_matching = lap(&mut clock);

    let fine = match_points(
        &patch_matches,
        &p.patches.members(),
        &q.patches.members(),
        &p.point_features,
        &q.point_features,
        model.dustbin,
        &cfg.point_matching,
    )
    .stage("point-matching")?;
    timing.point_matching = lap(&mut clock);

    let (pts_p, pts_q) = (&pair.source.cloud.points, &pair.target.cloud.points);
    let est = lgr(pts_p, pts_q, &fine.matches, &cfg.estimation).stage("estimation")?;
    timing.estimation = lap(&mut clock);

    let metrics = match &pair.gt {
        Some(gt) => Some(
            evaluate_pair(
                pts_p,
                pts_q,
                &patch_matches,
                &patch_points(&pair.source, &p.patches),
                &patch_points(&pair.target, &q.patches),
                &fine.matches,
                &est.transform,
                gt,
                &cfg.metrics,
            )
            .stage("metrics")?,
        ),
        None => None,
    };
    timing.metrics = lap(&mut clock);
    timing.total = start.elapsed().as_secs_f64();
    Ok(RegistrationResult {
        transform: est.transform,
        attention_mode: cfg.attention_mode,
        fusion_mode: cfg.fusion_mode,
        noise_sigma: cfg.noise_sigma,
        patches: [p.patches.len(), q.patches.len()],
        valid_patches: [p.fused.len(), q.fused.len()],
        patch_matches,
        point_matches: fine.matches,
        inliers: est.inliers.len(),
        metrics,
        timing,
    })
}

/// Metrics of a stored result, recomputed from its correspondences.
pub fn recompute_metrics(pair: &PairInput, result: &RegistrationResult, cfg: &PipelineConfig) -> Result<Option<PairMetrics>> {
    let Some(gt) = &pair.gt else {
        return Ok(None);
    };
    let pp = grid_subsample(&pair.source.cloud, cfg.voxel_size)?;
    let pq = grid_subsample(&pair.target.cloud, cfg.voxel_size)?;
    evaluate_pair(
        &pair.source.cloud.points,
        &pair.target.cloud.points,
        &result.patch_matches,
        &patch_points(&pair.source, &pp),
        &patch_points(&pair.target, &pq),
        &result.point_matches,
        &result.transform,
        gt,
        &cfg.metrics,
    )
    .map(Some)
}
