//! Synthetic visual features: a seed-fixed random Fourier field over world
//! coordinates, sampled through the camera onto the patch grid. The same
//! world location yields the same feature in every view.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Capabilities, FeatureProvider, FeatureSource, Frame, PatchFeatureMap};
use crate::camera::{scale_coordinate, CameraModel};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// `x -> [cos(ω_k·x), sin(ω_k·x)]_k / sqrt(C/2)` with `ω_k ~ N(0, I/ℓ²)`.
///
/// Inner products approximate the Gaussian kernel `exp(-|x-y|²/2ℓ²)`, and every
/// encoding has unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierField {
    frequencies: Vec<Vector3<f64>>,
}

impl FourierField {
    pub fn new(channels: usize, length_scale: f64, seed: u64) -> Result<Self> {
        if channels < 8 || !channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "synthetic channels must be even and at least 8, got {channels}"
            )));
        }
        if !(length_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("length scale {length_scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..channels / 2)
            .map(|_| {
                let g = |r: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(r) };
                Vector3::new(g(&mut rng), g(&mut rng), g(&mut rng)) / length_scale
            })
            .collect();
        Ok(Self { frequencies })
    }

    pub fn channels(&self) -> usize {
        self.frequencies.len() * 2
    }

    pub fn encode(&self, p: &Point3<f64>) -> Vec<f64> {
        let half = self.frequencies.len();
        let norm = 1.0 / (half as f64).sqrt();
        let mut out = vec![0.0; half * 2];
        for (k, w) in self.frequencies.iter().enumerate() {
            let phase = w.dot(&p.coords);
            out[k] = phase.cos() * norm;
            out[half + k] = phase.sin() * norm;
        }
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

/// Render the Fourier field through `camera` onto a `grid_height × grid_width` grid.
///
/// Each cell takes the mean world position of the frame points that project
/// into it. Cells no point reaches are back-projected through their center
/// at the frame's median depth.
pub fn synthetic_visual_features(
    camera_points: &[Point3<f64>],
    world_pose: &RigidTransform,
    camera: &CameraModel,
    grid_width: u32,
    grid_height: u32,
    field: &FourierField,
) -> Result<PatchFeatureMap> {
    if grid_width == 0 || grid_height == 0 {
        return Err(Error::InvalidArgument("grid size must be positive".into()));
    }
    let (gw, gh) = (grid_width as usize, grid_height as usize);
    let mut sums = vec![(Vector3::zeros(), 0usize); gw * gh];
    let mut depths = Vec::new();
    for p in camera_points {
        let x = camera.to_camera_frame(p);
        let h = camera.intrinsics * x.coords;
        if h.z <= 0.0 {
            continue;
        }
        depths.push(x.z);
        let (Some(cu), Some(cv)) = (
            scale_coordinate(h.x / h.z, camera.width, grid_width),
            scale_coordinate(h.y / h.z, camera.height, grid_height),
        ) else {
            continue;
        };
        let slot = &mut sums[cv * gw + cu];
        slot.0 += world_pose.apply(p).coords;
        slot.1 += 1;
    }
    depths.sort_by(f64::total_cmp);
    let fill_depth = depths.get(depths.len() / 2).copied().unwrap_or(1.0);
    let sensor_from_camera = camera.extrinsics.map(|e| e.inverse());

    let mut data = Vec::with_capacity(gw * gh * field.channels());
    for cv in 0..gh {
        for cu in 0..gw {
            let (sum, n) = sums[cv * gw + cu];
            let world = if n > 0 {
                Point3::from(sum / n as f64)
            } else {
                let u = (cu as f64 + 0.5) * camera.width as f64 / gw as f64;
                let v = (cv as f64 + 0.5) * camera.height as f64 / gh as f64;
                let cam_pt = camera.back_project(u, v, fill_depth);
                let sensor = sensor_from_camera.map_or(cam_pt, |t| t.apply(&cam_pt));
                world_pose.apply(&sensor)
            };
            data.extend(field.encode(&world).into_iter().map(|x| x as f32));
        }
    }
    PatchFeatureMap::new(gh, gw, field.channels(), data, FeatureSource::Synthetic)
}

/// Test double for the visual backbone over synthetic scenes.
#[derive(Debug, Clone)]
pub struct SyntheticVisualProvider {
    pub field: FourierField,
    /// Image pixels per grid cell side.
    pub patch_pixels: u32,
}

impl SyntheticVisualProvider {
    pub fn new(channels: usize, length_scale: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            field: FourierField::new(channels, length_scale, seed)?,
            patch_pixels: 14,
        })
    }

    pub fn grid_size(&self, camera: &CameraModel) -> (u32, u32) {
        (
            (camera.width / self.patch_pixels).max(1),
            (camera.height / self.patch_pixels).max(1),
        )
    }
}

impl FeatureProvider for SyntheticVisualProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            visual_channels: Some(self.field.channels()),
            ..Default::default()
        }
    }

    fn visual_map(&self, frame: &Frame) -> Result<PatchFeatureMap> {
        let pose = frame
            .world_pose
            .ok_or_else(|| Error::InvalidArgument("synthetic visual features need a world pose".into()))?;
        let (gw, gh) = self.grid_size(&frame.camera);
        synthetic_visual_features(&frame.cloud.points, &pose, &frame.camera, gw, gh, &self.field)
    }
}
