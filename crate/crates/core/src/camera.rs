//! Pinhole projection of patch centers onto the image plane and onto the
//! visual feature grid.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    /// Sensor frame → camera frame. `None` for depth-derived clouds.
    pub extrinsics: Option<RigidTransform>,
    pub width: u32,
    pub height: u32,
}

#[derive(Serialize, Deserialize)]
struct CameraRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extrinsic_rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extrinsic_translation: Option<[f64; 3]>,
}

impl CameraModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            intrinsics: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            extrinsics: None,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_extrinsics(mut self, extrinsics: RigidTransform) -> Result<Self> {
        extrinsics.validate().map_err(|e| Error::InvalidCamera(e.to_string()))?;
        self.extrinsics = Some(extrinsics);
        Ok(self)
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !k.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite intrinsics".into()));
        }
        if k[(2, 2)] != 1.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCamera("last intrinsic row must be (0, 0, 1)".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if let Some(e) = &self.extrinsics {
            e.validate().map_err(|e| Error::InvalidCamera(e.to_string()))?;
        }
        Ok(())
    }

    /// Point in the camera frame for a sensor-frame point.
    pub fn to_camera_frame(&self, p: &Point3<f64>) -> Point3<f64> {
        match &self.extrinsics {
            Some(e) => e.apply(p),
            None => *p,
        }
    }

    /// Camera-frame point for pixel `(u, v)` at depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        Point3::new((u - self.cx()) * z / self.fx(), (v - self.cy()) * z / self.fy(), z)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl Serialize for CameraModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (rot, trans) = match &self.extrinsics {
            Some(e) => {
                let r = e.rotation;
                (
                    Some([
                        r[(0, 0)], r[(0, 1)], r[(0, 2)],
                        r[(1, 0)], r[(1, 1)], r[(1, 2)],
                        r[(2, 0)], r[(2, 1)], r[(2, 2)],
                    ]),
                    Some([e.translation.x, e.translation.y, e.translation.z]),
                )
            }
            None => (None, None),
        };
        CameraRepr {
            fx: self.fx(),
            fy: self.fy(),
            cx: self.cx(),
            cy: self.cy(),
            width: self.width,
            height: self.height,
            extrinsic_rotation: rot,
            extrinsic_translation: trans,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = CameraRepr::deserialize(d)?;
        let mut cam = CameraModel::pinhole(r.fx, r.fy, r.cx, r.cy, r.width, r.height).map_err(D::Error::custom)?;
        match (r.extrinsic_rotation, r.extrinsic_translation) {
            (None, None) => {}
            (rot, trans) => {
                let rot = rot.map(|a| Matrix3::from_row_slice(&a)).unwrap_or_else(Matrix3::identity);
                let trans = trans.map(|a| Vector3::from_column_slice(&a)).unwrap_or_else(Vector3::zeros);
                let e = RigidTransform::new(rot, trans).map_err(D::Error::custom)?;
                cam = cam.with_extrinsics(e).map_err(D::Error::custom)?;
            }
        }
        Ok(cam)
    }
}

/// Per-patch pixel positions on the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMapping {
    /// `(u, v)` in pixels; NaN when the point has no finite projection.
    pub pixels: Vec<[f64; 2]>,
    /// Projective scale `s > 0`.
    pub in_front: Vec<bool>,
    pub valid: Vec<bool>,
    pub width: u32,
    pub height: u32,
}

impl PixelMapping {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn inside(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] < self.width as f64 && uv[1] >= 0.0 && uv[1] < self.height as f64
    }

    fn revalidate(&mut self) {
        self.valid = self
            .pixels
            .iter()
            .zip(&self.in_front)
            .map(|(&uv, &front)| front && self.inside(uv))
            .collect();
    }

    /// Pixel positions scaled to `[0, 1]²` by image size.
    pub fn normalized(&self, index: usize) -> [f64; 2] {
        let [u, v] = self.pixels[index];
        [u / self.width as f64, v / self.height as f64]
    }
}

pub fn project_to_pixels(centers: &[Point3<f64>], camera: &CameraModel) -> PixelMapping {
    let mut pixels = Vec::with_capacity(centers.len());
    let mut in_front = Vec::with_capacity(centers.len());
    for c in centers {
        let x = camera.to_camera_frame(c);
        let h = camera.intrinsics * x.coords;
        let s = h.z;
        if s > 0.0 {
            pixels.push([h.x / s, h.y / s]);
            in_front.push(true);
        } else {
            pixels.push([f64::NAN, f64::NAN]);
            in_front.push(false);
        }
    }
    let mut m = PixelMapping {
        pixels,
        in_front,
        valid: Vec::new(),
        width: camera.width,
        height: camera.height,
    };
    m.revalidate();
    m
}

/// `floor(x · grid / size)`, or `None` outside `[0, grid)`.
pub fn scale_coordinate(x: f64, size: u32, grid: u32) -> Option<usize> {
    if !x.is_finite() {
        return None;
    }
    let scaled = (x * grid as f64 / size as f64).floor();
    (scaled >= 0.0 && scaled < grid as f64).then_some(scaled as usize)
}

/// Integer cell on the visual feature grid: column `u`, row `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub u: usize,
    pub v: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMapping {
    /// `None` for patches excluded downstream.
    pub cells: Vec<Option<GridCell>>,
    pub grid_width: u32,
    pub grid_height: u32,
}

impl GridMapping {
    pub fn valid_indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|_| i))
            .collect()
    }
}

pub fn scale_to_grid(mapping: &PixelMapping, grid_width: u32, grid_height: u32) -> Result<GridMapping> {
    if grid_width == 0 || grid_height == 0 {
        return Err(Error::InvalidArgument("grid size must be at least 1×1".into()));
    }
    let cells = mapping
        .pixels
        .iter()
        .zip(&mapping.valid)
        .map(|(&[u, v], &ok)| {
            if !ok {
                return None;
            }
            Some(GridCell {
                u: scale_coordinate(u, mapping.width, grid_width)?,
                v: scale_coordinate(v, mapping.height, grid_height)?,
            })
        })
        .collect();
    Ok(GridMapping {
        cells,
        grid_width,
        grid_height,
    })
}

/// Adds i.i.d. `N(0, sigma²)` to every pixel coordinate, then re-evaluates validity.
pub fn inject_pixel_noise(mapping: &PixelMapping, sigma: f64, seed: u64) -> Result<PixelMapping> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(mapping.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mapping.clone();
    for uv in &mut out.pixels {
        uv[0] += normal.sample(&mut rng);
        uv[1] += normal.sample(&mut rng);
    }
    out.revalidate();
    Ok(out)
}
