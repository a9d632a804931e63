//! Depth-to-cloud conversion and pair construction for RGB-D scan sequences.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geometry::{grid_subsample, overlap_ratio, OverlapDirection, PointCloud, RigidTransform};

/// Row-major 16-bit depth in millimeters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::shape("depth image", width as usize * height as usize, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }
}

pub const DEFAULT_MAX_RANGE: f64 = 6.0;

/// Back-projects every pixel with `0 < z < max_range`, in row-major order.
/// Points are expressed in the sensor frame of `camera`.
pub fn depth_to_cloud(depth: &DepthImage, camera: &CameraModel, max_range: f64) -> Result<PointCloud> {
    camera.validate()?;
    if (depth.width, depth.height) != (camera.width, camera.height) {
        return Err(Error::shape(
            "depth image size",
            format!("{}x{}", camera.width, camera.height),
            format!("{}x{}", depth.width, depth.height),
        ));
    }
    let to_sensor = camera.extrinsics.map(|e| e.inverse());
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d == 0 {
                continue;
            }
            let z = d as f64 * 1e-3;
            if z >= max_range {
                continue;
            }
            let x = camera.back_project(u as f64, v as f64, z);
            points.push(to_sensor.map_or(x, |t| t.apply(&x)));
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyDepth);
    }
    PointCloud::new(points)
}

pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Png(format!(
            "{}: expected 16-bit grayscale, got {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    DepthImage::new(info.width, info.height, data)
}

pub fn write_depth_png(path: impl AsRef<Path>, depth: &DepthImage) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), depth.width, depth.height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bytes: Vec<u8> = depth.data.iter().flat_map(|d| d.to_be_bytes()).collect();
    let png_err = |e: png::EncodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Camera → world.
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub scene: String,
    pub split: Split,
    pub camera: CameraModel,
    /// Overrides the build-wide stride for this scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    pub frames: Vec<FrameRecord>,
}

/// Scenes with relative paths resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scenes: Vec<SceneEntry>,
}

impl SceneManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: SceneManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in m.scenes.iter_mut().flat_map(|s| s.frames.iter_mut()) {
            if f.depth.is_relative() {
                f.depth = base.join(&f.depth);
            }
            if let Some(img) = f.image.as_mut().filter(|p| p.is_relative()) {
                *img = base.join(&*img);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::EmptyInput);
        }
        for s in &self.scenes {
            if s.frames.windows(2).any(|w| w[0].index >= w[1].index) {
                return Err(Error::Malformed {
                    format: "scene manifest",
                    reason: format!("scene {}: frames not ordered by index", s.scene),
                });
            }
            if s.stride == Some(0) || s.group_size.is_some_and(|g| g < 2) {
                return Err(Error::Config(format!("scene {}: stride must be ≥ 1 and group size ≥ 2", s.scene)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildParams {
    pub stride: usize,
    pub group_size: usize,
    pub min_overlap: f64,
    /// `[lo_min, hi_min, hi_max]`: lo is `[lo_min, hi_min)`, hi is `[hi_min, hi_max]`.
    pub bins: [f64; 3],
    pub scene_cap: usize,
    pub tau: f64,
    pub max_range: f64,
    /// Voxel used to thin depth clouds before overlap evaluation; `None` keeps every point.
    pub overlap_voxel: Option<f64>,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            stride: 50,
            group_size: 60,
            min_overlap: 0.05,
            bins: [0.10, 0.30, 0.70],
            scene_cap: 100,
            tau: 0.1,
            max_range: DEFAULT_MAX_RANGE,
            overlap_voxel: Some(0.025),
        }
    }
}

impl BuildParams {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.bins;
        if !(0.0 <= a && a < b && b < c && c <= 1.0) {
            return Err(Error::Config(format!("bins {:?} must be increasing within [0, 1]", self.bins)));
        }
        if self.stride == 0 || self.group_size < 2 || self.scene_cap == 0 {
            return Err(Error::Config("stride and scene cap must be ≥ 1, group size ≥ 2".into()));
        }
        if !(self.tau > 0.0) || !(self.max_range > 0.0) || self.overlap_voxel.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Config("tau, max range and overlap voxel must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return Err(Error::Config(format!("min overlap {}", self.min_overlap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bin {
    Lo,
    Hi,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub scene: String,
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
    pub bin: Bin,
}

/// Tag for a pair of the given split, or `None` when it is dropped.
pub fn classify(overlap: f64, split: Split, params: &BuildParams) -> Option<Bin> {
    let [lo, mid, hi] = params.bins;
    match split {
        Split::Train => (overlap >= params.min_overlap).then_some(Bin::Train),
        Split::Test if (lo..mid).contains(&overlap) => Some(Bin::Lo),
        Split::Test if (mid..=hi).contains(&overlap) => Some(Bin::Hi),
        Split::Test => None,
    }
}

/// Sample-position pairs `(i, j)`, `i < j`, within consecutive groups of `group_size`.
pub fn group_pairs(samples: usize, group_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for start in (0..samples).step_by(group_size.max(1)) {
        let end = (start + group_size).min(samples);
        for i in start..end {
            for j in i + 1..end {
                out.push((i, j));
            }
        }
    }
    out
}

/// One sampled frame ready for overlap evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub cloud: PointCloud,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct SceneSamples {
    pub scene: String,
    pub split: Split,
    pub group_size: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    /// Sorted by `(scene, a, b)`.
    pub pairs: Vec<PairRecord>,
    /// Pairs evaluated before overlap filtering.
    pub traversed: usize,
}

/// Pairs from already-sampled scenes. The test-split cap is applied here.
pub fn build_pairs_from_samples(scenes: &[SceneSamples], params: &BuildParams) -> Result<BuildOutput> {
    params.validate()?;
    let mut jobs = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        let n = match scene.split {
            Split::Test => scene.samples.len().min(params.scene_cap),
            Split::Train => scene.samples.len(),
        };
        jobs.extend(group_pairs(n, scene.group_size).into_iter().map(|(i, j)| (s, i, j)));
    }
    let evaluated: Vec<Option<PairRecord>> = jobs
        .par_iter()
        .map(|&(s, i, j)| -> Result<Option<PairRecord>> {
            let scene = &scenes[s];
            let (a, b) = (&scene.samples[i], &scene.samples[j]);
            let gt = a.pose.inverse().compose(&b.pose);
            let overlap = overlap_ratio(&a.cloud, &b.cloud, &gt, params.tau, OverlapDirection::SourceToTarget)?;
            Ok(classify(overlap, scene.split, params).map(|bin| PairRecord {
                scene: scene.scene.clone(),
                a: a.index,
                b: b.index,
                overlap,
                bin,
            }))
        })
        .collect::<Result<_>>()?;
    let mut pairs: Vec<PairRecord> = evaluated.into_iter().flatten().collect();
    pairs.sort_by(|x, y| x.scene.cmp(&y.scene).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    Ok(BuildOutput {
        pairs,
        traversed: jobs.len(),
    })
}

fn thin(cloud: PointCloud, voxel: Option<f64>) -> Result<PointCloud> {
    match voxel {
        Some(v) => PointCloud::new(grid_subsample(&cloud, v)?.centers),
        None => Ok(cloud),
    }
}

/// Loads the sampled depth frames of every scene and builds its pairs.
pub fn build_pairs(manifest: &SceneManifest, params: &BuildParams) -> Result<BuildOutput> {
    manifest.validate()?;
    params.validate()?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let stride = entry.stride.unwrap_or(params.stride);
        let mut picked: Vec<&FrameRecord> = entry.frames.iter().step_by(stride).collect();
        if entry.split == Split::Test {
            picked.truncate(params.scene_cap);
        }
        let samples = picked
            .par_iter()
            .map(|f| -> Result<Sample> {
                let depth = read_depth_png(&f.depth)?;
                let cloud = thin(depth_to_cloud(&depth, &entry.camera, params.max_range)?, params.overlap_voxel)?;
                Ok(Sample {
                    index: f.index,
                    cloud,
                    pose: f.pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        log::info!("scene {}: {} samples", entry.scene, samples.len());
        scenes.push(SceneSamples {
            scene: entry.scene.clone(),
            split: entry.split,
            group_size: entry.group_size.unwrap_or(params.group_size),
            samples,
        });
    }
    build_pairs_from_samples(&scenes, params)
}

/// In-memory samples for a scene, mostly for tests and synthetic data.
pub fn sample_from_points(index: usize, points: Vec<Point3<f64>>, pose: RigidTransform) -> Result<Sample> {
    Ok(Sample {
        index,
        cloud: PointCloud::new(points)?,
        pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project_to_pixels;
    use nalgebra::Vector3;

    fn cam() -> CameraModel {
        CameraModel::pinhole(100.0, 120.0, 16.0, 12.0, 32, 24).unwrap()
    }

    fn single(u: u32, v: u32, mm: u16) -> DepthImage {
        let mut d = DepthImage::new(32, 24, vec![0; 32 * 24]).unwrap();
        d.data[(v * 32 + u) as usize] = mm;
        d
    }

    #[test]
    fn principal_ray_and_offset_pixel() {
        let c = depth_to_cloud(&single(16, 12, 1000), &cam(), 6.0).unwrap();
        assert_eq!(c.points, vec![Point3::new(0.0, 0.0, 1.0)]);
        let wide = CameraModel::pinhole(10.0, 10.0, 5.0, 12.0, 32, 24).unwrap();
        let c = depth_to_cloud(&single(15, 12, 2000), &wide, 6.0).unwrap();
        assert!((c.points[0] - Point3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_and_far_pixels_are_dropped() {
        let mut d = single(3, 4, 1500);
        d.data[0] = 6000;
        d.data[1] = 5999;
        let c = depth_to_cloud(&d, &cam(), 6.0).unwrap();
        assert_eq!(c.len(), 2);
        // row-major: pixel (1, 0) precedes pixel (3, 4)
        assert!((c.points[0].z - 5.999).abs() < 1e-12);
        assert!(matches!(
            depth_to_cloud(&DepthImage::new(32, 24, vec![0; 768]).unwrap(), &cam(), 6.0),
            Err(Error::EmptyDepth)
        ));
    }

    #[test]
    fn project_round_trip() {
        let data: Vec<u16> = (0..32 * 24).map(|i| 800 + (i * 37 % 900) as u16).collect();
        let d = DepthImage::new(32, 24, data).unwrap();
        let c = depth_to_cloud(&d, &cam(), 6.0).unwrap();
        let px = project_to_pixels(&c.points, &cam());
        for (k, uv) in px.pixels.iter().enumerate() {
            let (u, v) = ((k % 32) as f64, (k / 32) as f64);
            assert!((uv[0] - u).abs() < 0.5 && (uv[1] - v).abs() < 0.5);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = DepthImage::new(5, 3, (0..15).map(|i| i * 4000).collect()).unwrap();
        write_depth_png(&p, &d).unwrap();
        assert_eq!(read_depth_png(&p).unwrap(), d);
    }

    #[test]
    fn traversal_respects_groups() {
        assert_eq!(group_pairs(3, 60).len(), 3);
        let pairs = group_pairs(120, 60);
        assert_eq!(pairs.len(), 2 * 60 * 59 / 2);
        assert!(!pairs.contains(&(0, 61)));
        assert!(pairs.contains(&(60, 61)));
        assert_eq!(group_pairs(61, 60).len(), 60 * 59 / 2);
    }

    #[test]
    fn bins_partition_test_pairs() {
        let p = BuildParams::default();
        assert_eq!(classify(0.04, Split::Test, &p), None);
        assert_eq!(classify(0.10, Split::Test, &p), Some(Bin::Lo));
        assert_eq!(classify(0.30, Split::Test, &p), Some(Bin::Hi));
        assert_eq!(classify(0.70, Split::Test, &p), Some(Bin::Hi));
        assert_eq!(classify(0.71, Split::Test, &p), None);
        assert_eq!(classify(0.05, Split::Train, &p), Some(Bin::Train));
        assert_eq!(classify(0.049, Split::Train, &p), None);
    }

    #[test]
    fn manifest_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = serde_json::json!({
            "scenes": [{
                "scene": "s", "split": "test",
                "camera": {"fx": 1.0, "fy": 1.0, "cx": 0.0, "cy": 0.0, "width": 2, "height": 2},
                "frames": [{"index": 0, "depth": "f0.png",
                            "pose": {"rotation": [1,0,0,0,1,0,0,0,1], "translation": [0,0,0]}}]
            }]
        });
        let path = dir.path().join("scenes.json");
        std::fs::write(&path, m.to_string()).unwrap();
        let loaded = SceneManifest::load(&path).unwrap();
        assert_eq!(loaded.scenes[0].frames[0].depth, dir.path().join("f0.png"));
        std::fs::write(&path, r#"{"scenes": []}"#).unwrap();
        assert!(SceneManifest::load(&path).is_err());
    }

    #[test]
    fn build_from_depth_files() {
        let dir = tempfile::tempdir().unwrap();
        let camera = cam();
        let flat = DepthImage::new(32, 24, vec![1000; 768]).unwrap();
        let mut frames = Vec::new();
        for i in 0..4 {
            let name = format!("f{i}.png");
            write_depth_png(dir.path().join(&name), &flat).unwrap();
            frames.push(FrameRecord {
                index: i,
                depth: dir.path().join(name),
                image: None,
                pose: RigidTransform::from_translation(Vector3::new(0.02 * i as f64, 0.0, 0.0)),
            });
        }
        let manifest = SceneManifest {
            scenes: vec![SceneEntry {
                scene: "flat".into(),
                split: Split::Train,
                camera,
                stride: Some(2),
                group_size: None,
                frames,
            }],
        };
        let out = build_pairs(&manifest, &BuildParams { overlap_voxel: None, ..Default::default() }).unwrap();
        assert_eq!(out.traversed, 1);
        assert_eq!((out.pairs[0].a, out.pairs[0].b), (0, 2));
        assert!(out.pairs[0].overlap > 0.5 && out.pairs[0].overlap <= 1.0);
    }
}
