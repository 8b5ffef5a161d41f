//! Sectioned run configuration (TOML) shared by all CLI subcommands.
//! Unknown keys are rejected; every message names the offending key so
//! config failures are actionable from the shell.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, ViewSpec};
use crate::ptseg::NetworkConfig;
use crate::scenedata::SceneConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key {0}: {1}")]
    Invalid(&'static str, String),
    #[error("missing config key {0}")]
    Missing(&'static str),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Two horizon pixels [[x, y], [x, y]], left then right. Required by the
    /// geometry commands; the synth/train path derives it from [data].
    pub horizon: Option<[[f64; 2]; 2]>,
    /// Ground-region border pixels; default boxes the lower image.
    pub keypoints: Option<Vec<[f64; 2]>>,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self { f: 120.0, cx: 64.0, cy: 64.0, width: 128, height: 128, horizon: None, keypoints: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub steps: usize,
    /// Per-step target widths; defaults to the camera width for every step.
    pub widths: Option<Vec<u32>>,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self { steps: 3, widths: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub depth: usize,
    pub base_channels: usize,
    pub ptl_steps: usize,
    pub embedding_dims: usize,
    pub classes: usize,
    pub instance_head: bool,
    pub lambda_instance: f64,
    pub delta_v: f64,
    pub delta_d: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            ptl_steps: 3,
            embedding_dims: 4,
            classes: 4,
            instance_head: true,
            lambda_instance: 0.1,
            delta_v: 0.5,
            delta_d: 3.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    /// Held-out tail of the dataset used for evaluation.
    pub holdout: usize,
    pub cam_height: f64,
    pub pitch: f64,
    pub lane_count: usize,
    pub lane_spacing: f64,
    pub lane_width: f64,
    pub dash_period: f64,
    pub dash_duty: f64,
    pub curvature: f64,
    pub stop_line: bool,
    pub arrow: bool,
    pub noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 200,
            holdout: 20,
            cam_height: 1.5,
            pitch: 0.28,
            lane_count: 3,
            lane_spacing: 3.5,
            lane_width: 0.35,
            dash_period: 4.0,
            dash_duty: 0.6,
            curvature: 0.004,
            stop_line: true,
            arrow: true,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Cross-entropy weight of every non-background class (thin markings
    /// need the boost at toy scale).
    pub foreground_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 450,
            lr: 3e-3,
            beta1: 0.95,
            beta2: 0.999,
            weight_decay: 5e-4,
            foreground_weight: 6.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    pub lane_match_ratio: f64,
    pub pixel_bin: f64,
    pub meter_bin: f64,
    pub under_horizon: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 20.0,
            lane_match_ratio: 0.85,
            pixel_bin: 32.0,
            meter_bin: 5.0,
            under_horizon: false,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraSection,
    pub chain: ChainSection,
    pub network: NetworkSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.camera.f > 0.0) {
            return Err(ConfigError::Invalid("camera.f", "must be positive".into()));
        }
        if self.camera.width == 0 || self.camera.height == 0 {
            return Err(ConfigError::Invalid("camera.width/height", "must be nonzero".into()));
        }
        if self.chain.steps == 0 {
            return Err(ConfigError::Invalid("chain.steps", "must be at least 1".into()));
        }
        if let Some(w) = &self.chain.widths {
            if w.len() != self.chain.steps {
                return Err(ConfigError::Invalid(
                    "chain.widths",
                    format!("{} entries for {} steps", w.len(), self.chain.steps),
                ));
            }
        }
        if self.network.ptl_steps > self.network.depth {
            return Err(ConfigError::Invalid(
                "network.ptl_steps",
                "cannot exceed network.depth".into(),
            ));
        }
        if self.data.holdout >= self.data.count && self.data.count > 0 {
            return Err(ConfigError::Invalid(
                "data.holdout",
                "must leave at least one training sample".into(),
            ));
        }
        if !(self.data.pitch > 0.0 && self.data.pitch < std::f64::consts::FRAC_PI_2) {
            return Err(ConfigError::Invalid("data.pitch", "must lie in (0, pi/2)".into()));
        }
        Ok(())
    }

    pub fn view(&self) -> Result<ViewSpec<f64>, ConfigError> {
        let k = CameraIntrinsics::new(self.camera.f, self.camera.cx, self.camera.cy)
            .map_err(|e| ConfigError::Invalid("camera", e.to_string()))?;
        ViewSpec::new(k, self.camera.width, self.camera.height)
            .map_err(|e| ConfigError::Invalid("camera", e.to_string()))
    }

    /// Explicit horizon pixels, required by the geometry commands.
    pub fn horizon(&self) -> Result<((f64, f64), (f64, f64)), ConfigError> {
        let h = self.camera.horizon.ok_or(ConfigError::Missing("camera.horizon"))?;
        Ok(((h[0][0], h[0][1]), (h[1][0], h[1][1])))
    }

    /// Configured key points, or the scene default box when absent (needs a
    /// horizon to bound the top edge).
    pub fn keypoints(&self) -> Result<Vec<(f64, f64)>, ConfigError> {
        if let Some(kps) = &self.camera.keypoints {
            if kps.len() < 3 {
                return Err(ConfigError::Invalid("camera.keypoints", "need at least 3".into()));
            }
            return Ok(kps.iter().map(|p| (p[0], p[1])).collect());
        }
        let ((_, vy), _) = self.horizon()?;
        let bottom = (self.camera.height - 1) as f64;
        let right = (self.camera.width - 1) as f64;
        let top = vy + (bottom - vy) * 0.25;
        Ok(vec![(0.0, bottom), (right, bottom), (0.0, top), (right, top)])
    }

    pub fn chain_widths(&self) -> Vec<u32> {
        self.chain
            .widths
            .clone()
            .unwrap_or_else(|| vec![self.camera.width; self.chain.steps])
    }

    pub fn scene_config(&self, seed: u64) -> SceneConfig<f64> {
        SceneConfig {
            f: self.camera.f,
            cx: self.camera.cx,
            cy: self.camera.cy,
            width: self.camera.width,
            height: self.camera.height,
            cam_height: self.data.cam_height,
            pitch: self.data.pitch,
            lane_count: self.data.lane_count,
            lane_spacing: self.data.lane_spacing,
            lane_width: self.data.lane_width,
            dash_period: self.data.dash_period,
            dash_duty: self.data.dash_duty,
            curvature: self.data.curvature,
            stop_line: self.data.stop_line,
            arrow: self.data.arrow,
            noise: self.data.noise,
            seed,
        }
    }

    pub fn network_config(
        &self,
        input: ViewSpec<f64>,
        chain: Option<crate::geometry::PTLChain<f64>>,
        ptl_steps: usize,
    ) -> NetworkConfig<f64> {
        NetworkConfig {
            depth: self.network.depth,
            base_channels: self.network.base_channels,
            in_channels: 3,
            ptl_steps,
            classes: self.network.classes,
            embedding_dims: self.network.embedding_dims,
            instance_head: self.network.instance_head,
            lambda_instance: self.network.lambda_instance,
            delta_v: self.network.delta_v,
            delta_d: self.network.delta_d,
            input,
            chain,
        }
    }

    /// Stable hash of the serialized config, used to name run directories.
    pub fn short_hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")[..12].to_string()
    }
}
