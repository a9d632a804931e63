//! Seeded synthetic scenes: a bumpy heightfield seen by two downward cameras.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project_to_pixels, CameraModel};
use crate::error::{Error, Result};
use crate::features::Frame;
use crate::geometry::{PointCloud, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Terrain covers `[-extent, extent]²`.
    pub extent: f64,
    pub spacing: f64,
    /// Uniform jitter as a fraction of `spacing`.
    pub jitter: f64,
    pub bumps: usize,
    pub bump_height: f64,
    pub camera_height: f64,
    /// Range of the camera-to-camera baseline (m).
    pub baseline: [f64; 2],
    pub max_yaw: f64,
    pub max_tilt: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent: 2.6,
            spacing: 0.05,
            jitter: 0.3,
            bumps: 40,
            bump_height: 0.35,
            camera_height: 2.0,
            baseline: [0.3, 0.6],
            max_yaw: 0.5,
            max_tilt: 0.08,
        }
    }
}

pub fn default_camera() -> CameraModel {
    CameraModel::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics")
}

struct Bump {
    center: [f64; 2],
    height: f64,
    width: f64,
}

/// Jittered grid samples of `z = Σ h_k exp(-|xy − c_k|² / 2w_k²)`.
pub fn heightfield(params: &SceneParams, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    let e = params.extent;
    let bumps: Vec<Bump> = (0..params.bumps)
        .map(|_| Bump {
            center: [rng.random_range(-e..e), rng.random_range(-e..e)],
            height: rng.random_range(-1.0..1.0) * params.bump_height,
            width: rng.random_range(0.15..0.5),
        })
        .collect();
    let n = (2.0 * e / params.spacing).round() as usize;
    let j = params.jitter * params.spacing;
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let x = -e + ix as f64 * params.spacing + rng.random_range(-j..=j);
            let y = -e + iy as f64 * params.spacing + rng.random_range(-j..=j);
            let z: f64 = bumps
                .iter()
                .map(|b| {
                    let r2 = (x - b.center[0]).powi(2) + (y - b.center[1]).powi(2);
                    b.height * (-r2 / (2.0 * b.width * b.width)).exp()
                })
                .sum();
            out.push(Point3::new(x, y, z));
        }
    }
    out
}

/// Camera → world pose of a camera at `position` looking straight down,
/// turned by `yaw`, then tilted by `tilt` about a horizontal `axis`.
pub fn downward_pose(position: Vector3<f64>, yaw: f64, tilt: f64, axis: f64) -> RigidTransform {
    let (s, c) = yaw.sin_cos();
    let down = Matrix3::from_columns(&[
        Vector3::new(c, s, 0.0),
        Vector3::new(s, -c, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
    ]);
    let tilt_axis = Unit::new_normalize(Vector3::new(axis.cos(), axis.sin(), 0.0));
    let rotation = Rotation3::from_axis_angle(&tilt_axis, tilt).matrix() * down;
    RigidTransform::new(rotation, position).expect("rotation is orthonormal")
}

/// The world points `camera` sees from `pose`, in camera coordinates.
pub fn view(world: &[Point3<f64>], pose: &RigidTransform, camera: &CameraModel) -> Result<Frame> {
    let inv = pose.inverse();
    let local: Vec<Point3<f64>> = world.iter().map(|p| inv.apply(p)).collect();
    let px = project_to_pixels(&local, camera);
    let visible: Vec<Point3<f64>> = local
        .into_iter()
        .zip(&px.valid)
        .filter_map(|(p, &ok)| ok.then_some(p))
        .collect();
    if visible.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(Frame {
        cloud: PointCloud::new(visible)?,
        camera: camera.clone(),
        visual_path: None,
        world_pose: Some(*pose),
    })
}

/// Two views of one scene; `gt` maps target coordinates into the source frame.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: Frame,
    pub target: Frame,
    pub gt: RigidTransform,
}

pub fn synthetic_pair(seed: u64, params: &SceneParams) -> Result<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = heightfield(params, &mut rng);
    let camera = default_camera();
    let pose = |rng: &mut ChaCha8Rng, center: Vector3<f64>| {
        downward_pose(
            center,
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.random_range(0.0..params.max_tilt),
            rng.random_range(0.0..std::f64::consts::TAU),
        )
    };
    let a_center = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), params.camera_height);
    let pose_a = pose(&mut rng, a_center);
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let len = rng.random_range(params.baseline[0]..params.baseline[1]);
    let b_center = a_center
        + Vector3::new(dir.cos() * len, dir.sin() * len, rng.random_range(-0.15..0.15));
    // target yaw is relative to the source yaw
    let yaw_a = pose_a.rotation[(1, 0)].atan2(pose_a.rotation[(0, 0)]);
    let yaw_b = yaw_a + rng.random_range(-params.max_yaw..params.max_yaw);
    let pose_b = downward_pose(
        b_center,
        yaw_b,
        rng.random_range(0.0..params.max_tilt),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    Ok(SyntheticPair {
        source: view(&world, &pose_a, &camera)?,
        target: view(&world, &pose_b, &camera)?,
        gt: pose_a.inverse().compose(&pose_b),
    })
}

/// The source view of `synthetic_pair(seed)` paired with itself.
pub fn identical_pair(seed: u64, params: &SceneParams) -> Result<SyntheticPair> {
    let p = synthetic_pair(seed, params)?;
    Ok(SyntheticPair {
        target: p.source.clone(),
        source: p.source,
        gt: RigidTransform::identity(),
    })
}
