//! Pipeline configuration and architecture profiles.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::EstimationConfig;
use crate::eval::MetricThresholds;
use crate::fusion::FusionMode;
use crate::matching::{PatchMatchConfig, PointMatchConfig};
use crate::nn::DEFAULT_SLOPE;
use crate::transformer::AttentionMode;

/// Layer sizes of the fusion module and the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub visual_channels: usize,
    pub geometric_channels: usize,
    pub point_channels: usize,
    /// Both modalities are reduced to this width before fusion.
    pub reduced_channels: usize,
    pub window: usize,
    pub fusion_hidden: usize,
    pub fused_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub attention_hidden: usize,
    pub positional_hidden: usize,
    pub angle_k: usize,
    /// Distance scale of the geometric embedding; `None` means 2.5 × voxel size.
    pub sigma_d: Option<f64>,
    pub sigma_a_deg: f64,
    pub slope: f64,
}

impl Architecture {
    pub fn standard() -> Self {
        Self {
            visual_channels: 384,
            geometric_channels: 256,
            point_channels: 64,
            reduced_channels: 256,
            window: 3,
            fusion_hidden: 1024,
            fused_dim: 512,
            model_dim: 256,
            heads: 4,
            layers: 3,
            attention_hidden: 512,
            positional_hidden: 64,
            angle_k: 3,
            sigma_d: None,
            sigma_a_deg: 15.0,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn large() -> Self {
        Self {
            reduced_channels: 512,
            fusion_hidden: 2048,
            fused_dim: 1024,
            model_dim: 512,
            heads: 8,
            attention_hidden: 1024,
            ..Self::standard()
        }
    }

    /// Small widths for the synthetic harness.
    pub fn synthetic() -> Self {
        Self {
            visual_channels: 64,
            geometric_channels: 64,
            point_channels: 64,
            reduced_channels: 64,
            fusion_hidden: 256,
            fused_dim: 128,
            model_dim: 128,
            attention_hidden: 256,
            positional_hidden: 32,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("visual_channels", self.visual_channels),
            ("geometric_channels", self.geometric_channels),
            ("reduced_channels", self.reduced_channels),
            ("fusion_hidden", self.fusion_hidden),
            ("fused_dim", self.fused_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("attention_hidden", self.attention_hidden),
            ("positional_hidden", self.positional_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if !self.model_dim.is_multiple_of(2 * self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by 2 × {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.point_channels < 2 || !self.point_channels.is_multiple_of(2) {
            return Err(Error::Config(format!("point_channels must be even, got {}", self.point_channels)));
        }
        if self.sigma_d.is_some_and(|s| !(s > 0.0)) || !(self.sigma_a_deg > 0.0) {
            return Err(Error::Config("embedding scales must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config(format!("slope {} outside [0, 1)", self.slope)));
        }
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VisualProviderConfig {
    /// Random Fourier field over world coordinates; needs frames with world poses.
    Synthetic { length_scale: f64, seed: u64 },
    /// DRFM files named by each pair.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricProviderConfig {
    pub neighbors: usize,
    pub bandwidth: f64,
    pub seed: u64,
}

impl Default for GeometricProviderConfig {
    fn default() -> Self {
        Self {
            neighbors: 8,
            bandwidth: 0.004,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub architecture: Architecture,
    pub visual_provider: VisualProviderConfig,
    pub geometric_provider: GeometricProviderConfig,
    pub voxel_size: f64,
    pub attention_mode: AttentionMode,
    pub fusion_mode: FusionMode,
    pub patch_matching: PatchMatchConfig,
    pub point_matching: PointMatchConfig,
    pub estimation: EstimationConfig,
    pub metrics: MetricThresholds,
    /// Pixel noise added to projected patch centers.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl PipelineConfig {
    pub fn standard() -> Self {
        Self {
            architecture: Architecture::standard(),
            visual_provider: VisualProviderConfig::File,
            geometric_provider: GeometricProviderConfig::default(),
            voxel_size: 0.2,
            attention_mode: AttentionMode::Mixed,
            fusion_mode: FusionMode::Full,
            patch_matching: PatchMatchConfig::default(),
            point_matching: PointMatchConfig::default(),
            estimation: EstimationConfig::default(),
            metrics: MetricThresholds::default(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn large() -> Self {
        Self {
            architecture: Architecture::large(),
            ..Self::standard()
        }
    }

    /// Synthetic visual provider with the small architecture.
    pub fn synthetic() -> Self {
        Self {
            architecture: Architecture::synthetic(),
            visual_provider: VisualProviderConfig::Synthetic {
                length_scale: 0.3,
                seed: 0,
            },
            point_matching: PointMatchConfig {
                score_scale: Some(10.0),
                ..PointMatchConfig::default()
            },
            ..Self::standard()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "large" => Ok(Self::large()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    /// JSON object whose fields override the profile named by its optional
    /// `"profile"` key (default `"standard"`).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let obj = user
            .as_object_mut()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        let profile = match obj.remove("profile") {
            None => "standard".to_string(),
            Some(Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let mut base = serde_json::to_value(Self::profile(&profile)?)?;
        merge(&mut base, user);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.estimation.validate()?;
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Config(format!("voxel_size {}", self.voxel_size)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {}", self.noise_sigma)));
        }
        if self.patch_matching.top_k == 0 || !(self.patch_matching.similarity_scale > 0.0) {
            return Err(Error::Config("patch matching needs top_k ≥ 1 and a positive scale".into()));
        }
        let pm = &self.point_matching;
        if pm.cap == 0 || pm.iterations == 0 || pm.score_scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("point matching needs cap, iterations and scale > 0".into()));
        }
        if !(0.0..=1.0).contains(&pm.confidence_threshold) {
            return Err(Error::Config(format!("confidence threshold {}", pm.confidence_threshold)));
        }
        if let VisualProviderConfig::Synthetic { length_scale, .. } = self.visual_provider {
            let c = self.architecture.visual_channels;
            if !(length_scale > 0.0) || c < 8 || !c.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "synthetic visual provider needs a positive length scale and even channels ≥ 8, got {c}"
                )));
            }
        }
        let g = &self.geometric_provider;
        if g.neighbors == 0 || !(g.bandwidth > 0.0) {
            return Err(Error::Config("geometric provider needs neighbors ≥ 1 and bandwidth > 0".into()));
        }
        Ok(())
    }

    pub fn sigma_d(&self) -> f64 {
        self.architecture.sigma_d.unwrap_or(2.5 * self.voxel_size)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && !is_tagged(slot) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Tagged enums are replaced wholesale so variant fields never mix.
fn is_tagged(v: &Value) -> bool {
    v.get("kind").is_some()
}
