//! Visual and geometric feature sources.
//!
//! The registration core never runs a neural network. Visual patch maps come
//! from files (written by an external exporter) or from the synthetic test
//! double; geometric features come from the handcrafted descriptor.

pub mod drfm;
pub mod handcrafted;
pub mod synthetic;

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geometry::{PatchSet, PointCloud, RigidTransform};

pub use drfm::{load_feature_map, save_feature_map};
pub use handcrafted::{handcrafted_geometric_descriptor, HandcraftedProvider};
pub use synthetic::{synthetic_visual_features, FourierField, SyntheticVisualProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Exported,
    Synthetic,
    File,
}

/// `H' × W'` grid of `C`-dim visual patch features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub source: FeatureSource,
}

impl PatchFeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>, source: FeatureSource) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("feature map dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("feature map payload", height * width * channels, data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            source,
        })
    }

    /// Feature at grid row `v`, column `u`.
    pub fn cell(&self, v: usize, u: usize) -> &[f32] {
        let o = (v * self.width + u) * self.channels;
        &self.data[o..o + self.channels]
    }
}

/// One side of a registration pair as seen by the feature providers.
#[derive(Debug, Clone)]
pub struct Frame {
    pub cloud: PointCloud,
    pub camera: CameraModel,
    pub visual_path: Option<PathBuf>,
    /// Frame → world pose, known only for synthetic scenes.
    pub world_pose: Option<RigidTransform>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub visual_channels: Option<usize>,
    pub patch_channels: Option<usize>,
    pub point_channels: Option<usize>,
}

impl Capabilities {
    pub fn provides_visual_map(&self) -> bool {
        self.visual_channels.is_some()
    }
    pub fn provides_patch_features(&self) -> bool {
        self.patch_channels.is_some()
    }
    pub fn provides_point_features(&self) -> bool {
        self.point_channels.is_some()
    }
}

pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    fn visual_map(&self, _frame: &Frame) -> Result<PatchFeatureMap> {
        Err(Error::Unsupported {
            provider: self.name().into(),
            what: "visual feature maps",
        })
    }

    /// One row per patch.
    fn patch_features(&self, _frame: &Frame, _patches: &PatchSet) -> Result<DMatrix<f64>> {
        Err(Error::Unsupported {
            provider: self.name().into(),
            what: "patch features",
        })
    }

    /// One row per point of `frame.cloud`.
    fn point_features(&self, _frame: &Frame, _patches: &PatchSet) -> Result<DMatrix<f64>> {
        Err(Error::Unsupported {
            provider: self.name().into(),
            what: "point features",
        })
    }
}

/// Visual maps read from DRFM files referenced by each frame.
#[derive(Debug, Clone)]
pub struct FileVisualProvider {
    pub channels: usize,
}

impl FeatureProvider for FileVisualProvider {
    fn name(&self) -> &str {
        "file"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            visual_channels: Some(self.channels),
            ..Default::default()
        }
    }

    fn visual_map(&self, frame: &Frame) -> Result<PatchFeatureMap> {
        let path = frame
            .visual_path
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("frame has no visual feature file".into()))?;
        let map = load_feature_map(path)?;
        if map.channels != self.channels {
            return Err(Error::shape(format!("visual channels of {}", path.display()), self.channels, map.channels));
        }
        Ok(map)
    }
}

/// Fail-fast dimension check for a (visual, geometric) provider combination.
pub fn check_provider_dims(
    visual: &dyn FeatureProvider,
    geometric: &dyn FeatureProvider,
    visual_channels: usize,
    patch_channels: usize,
    point_channels: Option<usize>,
) -> Result<()> {
    let v = visual.capabilities();
    let g = geometric.capabilities();
    let expect = |what: &str, got: Option<usize>, want: usize| match got {
        Some(c) if c == want => Ok(()),
        Some(c) => Err(Error::Config(format!("{what}: provider gives {c}, architecture expects {want}"))),
        None => Err(Error::Config(format!("{what}: provider does not supply it"))),
    };
    expect("visual channels", v.visual_channels, visual_channels)?;
    expect("patch channels", g.patch_channels, patch_channels)?;
    match point_channels {
        Some(want) => expect("point channels", g.point_channels, want),
        None if g.provides_point_features() => Ok(()),
        None => Err(Error::Config("point channels: provider does not supply them".into())),
    }
}
