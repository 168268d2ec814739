//! Run configuration: one JSON document with defaults for every knob,
//! overridable per-key from the command line.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pipeline variant: with scale/orientation estimation and the matching
/// augmentations, or with both disabled (s = 1, theta = 0, no geometric
/// consistency loss).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    RotScl,
    NoRotScl,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ArchConfig {
    pub backbone_channels: usize,
    pub scale_levels: usize,
    /// Scale range endpoint R; levels are log-spaced in [1/R, R].
    pub scale_range: f64,
    pub nms_window: usize,
    pub nms_temperature: f64,
    pub softargmax_temperature: f64,
    pub subpixel_window: usize,
    pub descriptor_channels: [usize; 3],
    pub descriptor_fc: usize,
    pub descriptor_dim: usize,
    /// Physical patch side in pixels at scale 1.
    pub base_support: f64,
    pub patch_size: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            backbone_channels: 16,
            scale_levels: 5,
            scale_range: std::f64::consts::SQRT_2,
            nms_window: 15,
            nms_temperature: 1.0,
            softargmax_temperature: 1.0,
            subpixel_window: 5,
            descriptor_channels: [64, 128, 256],
            descriptor_fc: 512,
            descriptor_dim: 256,
            base_support: 32.0,
            patch_size: 32,
            leaky_slope: 0.2,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    /// Border margin keeping descriptor patches inside the image.
    pub fn keypoint_margin(&self) -> usize {
        ((self.base_support * self.scale_range) / 2.0).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_levels == 0 {
            return Err(Error::Config("scale_levels must be >= 1".into()));
        }
        if self.scale_range < 1.0 {
            return Err(Error::Config("scale_range must be >= 1".into()));
        }
        if self.nms_window % 2 == 0 || self.subpixel_window % 2 == 0 {
            return Err(Error::Config("window sizes must be odd".into()));
        }
        if self.patch_size % 8 != 0 {
            return Err(Error::Config(
                "patch_size must be divisible by 8 (three stride-2 stages)".into(),
            ));
        }
        if self.nms_temperature <= 0.0 || self.softargmax_temperature <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_pair: f64,
    pub lambda_ori: f64,
    pub lambda_scale: f64,
    pub margin: f64,
    pub mining_floor: usize,
    pub mining_ceiling: usize,
    pub mining_decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pair: 0.01,
            lambda_ori: 0.1,
            lambda_scale: 0.1,
            margin: 1.0,
            mining_floor: 5,
            mining_ceiling: 64,
            mining_decay: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Keypoints extracted per image during training.
    pub keypoints: usize,
    pub pairs_per_batch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Std of the supervision Gaussians.
    pub sigma: f64,
    pub crop_size: usize,
    pub max_iterations: usize,
    pub frame_gap: usize,
    /// Pairs with fewer surviving correspondences are skipped.
    pub min_correspondences: usize,
    pub occlusion_rel_tol: f64,
    pub val_interval: usize,
    pub checkpoint_interval: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            keypoints: 512,
            pairs_per_batch: 6,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sigma: 0.5,
            crop_size: 256,
            max_iterations: 20_000,
            frame_gap: 15,
            min_correspondences: 32,
            occlusion_rel_tol: 0.05,
            val_interval: 250,
            checkpoint_interval: 1000,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub keypoints: usize,
    pub threshold_px: f64,
    /// Mutual (cross-checked) nearest-neighbor matching instead of one-way.
    pub mutual: bool,
    pub frame_gap: usize,
    pub rotation_step_deg: usize,
    /// How many pairs get a match-visualization image.
    pub viz_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            keypoints: 512,
            threshold_px: 5.0,
            mutual: false,
            frame_gap: 15,
            rotation_step_deg: 10,
            viz_pairs: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub planes: usize,
    pub texture_octaves: usize,
    /// Camera translation magnitude per frame, in scene units.
    pub motion_translation: f64,
    /// Camera rotation magnitude per frame, degrees.
    pub motion_rotation_deg: f64,
    /// Extra in-plane roll applied to every odd frame, degrees.
    pub roll_deg: f64,
    pub focal: f64,
    pub sfm_points: usize,
    /// Fraction of sequences tagged as the validation split.
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 4,
            frames_per_sequence: 6,
            image_width: 128,
            image_height: 128,
            planes: 2,
            texture_octaves: 4,
            motion_translation: 0.12,
            motion_rotation_deg: 5.0,
            roll_deg: 0.0,
            focal: 120.0,
            sfm_points: 600,
            val_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for Mode {
    fn default() -> Self {
        Mode::NoRotScl
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.train.keypoints == 0 || self.eval.keypoints == 0 {
            return Err(Error::Config("keypoint counts must be >= 1".into()));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.train.crop_size < 32 {
            return Err(Error::Config("crop_size must be >= 32".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1]".into()));
        }
        if self.eval.rotation_step_deg == 0 || 360 % self.eval.rotation_step_deg != 0 {
            return Err(Error::Config("rotation_step_deg must divide 360".into()));
        }
        Ok(())
    }

    /// Whether scale/orientation estimation and rot/scale augmentation are
    /// active.
    pub fn rot_scl(&self) -> bool {
        self.mode == Mode::RotScl
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply a `dot.path=value` override onto a JSON config document. Values
/// parse as JSON when possible and fall back to strings.
pub fn apply_override(doc: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::Config(format!(
                "override path '{path}' hits a non-object at '{part}'"
            )));
        }
        let map = cursor.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_json_pretty();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_follow_dot_paths() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut doc, "train.learning_rate", "0.0005").unwrap();
        apply_override(&mut doc, "mode", "rotscl").unwrap();
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.0005);
        assert_eq!(cfg.mode, Mode::RotScl);
    }

    #[test]
    fn margin_covers_scaled_patch() {
        let arch = ArchConfig::default();
        assert_eq!(arch.keypoint_margin(), 23);
    }
}
