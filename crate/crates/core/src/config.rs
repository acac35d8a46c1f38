use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::amm::{default_schedule, PlacementSchedule, DEFAULT_SCALE};
use crate::error::{EdtError, Result};
use crate::masking::MaskSpec;

pub const STAGES: usize = 5;
/// Stages 0..3 form the encoder, 3..5 the decoder.
pub const ENCODER_STAGES: usize = 3;

/// Inference-time attention modulation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmmConfig {
    #[serde(default = "default_amm_scale")]
    pub scale: f64,
    /// `None` selects `√((N − 1)² + 4)` per grid.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Flags per decoder stage; `None` alternates starting at block 0.
    #[serde(default)]
    pub schedule: Option<PlacementSchedule>,
}

fn default_amm_scale() -> f64 {
    DEFAULT_SCALE
}

impl Default for AmmConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_SCALE,
            radius: None,
            schedule: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub patch_size: usize,
    pub stage_blocks: [usize; STAGES],
    pub stage_dims: [usize; STAGES],
    pub stage_heads: [usize; STAGES],
    pub class_count: usize,
    pub latent_channels: usize,
    /// Spatial extent of the (square) latent.
    pub latent_size: usize,
    /// Width of the sinusoidal timestep features fed to the time MLP.
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    #[serde(default)]
    pub amm: AmmConfig,
    #[serde(default)]
    pub mask: MaskSpec,
}

fn default_time_features() -> usize {
    256
}

impl ModelConfig {
    /// Desk-scale configuration with the stage ratios of EDT-S.
    pub fn nano() -> Self {
        Self {
            name: "EDT-nano".into(),
            patch_size: 2,
            stage_blocks: [2, 2, 2, 3, 3],
            stage_dims: [24, 32, 40, 32, 24],
            stage_heads: [2, 4, 4, 4, 2],
            class_count: 8,
            latent_channels: 4,
            latent_size: 16,
            time_features: 64,
            amm: AmmConfig::default(),
            // 25% of the 2×2 second grid is the smallest non-empty mask.
            mask: MaskSpec {
                stage1_ratio_range: [0.4, 0.5],
                stage2_ratio_range: [0.25, 0.25],
            },
        }
    }

    pub fn edt_s() -> Self {
        Self::imagenet("EDT-S", [2, 2, 2, 3, 3], [312, 416, 520, 416, 312], [6, 8, 10, 8, 6])
    }

    pub fn edt_b() -> Self {
        Self::imagenet(
            "EDT-B",
            [2, 2, 2, 3, 3],
            [624, 832, 1040, 832, 624],
            [12, 16, 20, 16, 12],
        )
    }

    pub fn edt_xl() -> Self {
        Self::imagenet(
            "EDT-XL",
            [6, 4, 4, 7, 7],
            [936, 1248, 1560, 1248, 936],
            [18, 24, 30, 24, 18],
        )
    }

    fn imagenet(name: &str, blocks: [usize; 5], dims: [usize; 5], heads: [usize; 5]) -> Self {
        Self {
            name: name.into(),
            patch_size: 2,
            stage_blocks: blocks,
            stage_dims: dims,
            stage_heads: heads,
            class_count: 1000,
            latent_channels: 4,
            latent_size: 32,
            time_features: 256,
            amm: AmmConfig::default(),
            mask: MaskSpec::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "edt-nano" | "nano" => Ok(Self::nano()),
            "edt-s" | "s" => Ok(Self::edt_s()),
            "edt-b" | "b" => Ok(Self::edt_b()),
            "edt-xl" | "xl" => Ok(Self::edt_xl()),
            other => Err(EdtError::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Side of the token grid entering stage 0.
    pub fn grid_side(&self) -> usize {
        self.latent_size / self.patch_size
    }

    /// Token-grid side of each stage.
    pub fn stage_sides(&self) -> [usize; STAGES] {
        let n0 = self.grid_side();
        [n0, n0 / 2, n0 / 4, n0 / 2, n0]
    }

    pub fn stage_tokens(&self, s: usize) -> usize {
        let side = self.stage_sides()[s];
        side * side
    }

    pub fn patch_features(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }

    pub fn null_class(&self) -> usize {
        self.class_count
    }

    /// `d_{i+1} / d_i` of the two down-sampling modules.
    pub fn expansion_ratios(&self) -> [f64; 2] {
        let d = self.stage_dims;
        [d[1] as f64 / d[0] as f64, d[2] as f64 / d[1] as f64]
    }

    pub fn decoder_blocks(&self) -> [usize; 2] {
        [self.stage_blocks[3], self.stage_blocks[4]]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size, self.latent_size]
    }

    /// Configured AMM schedule, or the alternating default.
    pub fn amm_schedule(&self) -> Result<PlacementSchedule> {
        match &self.amm.schedule {
            Some(s) => {
                s.check(&self.decoder_blocks())?;
                Ok(s.clone())
            }
            None => default_schedule(&self.decoder_blocks()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EdtError::Config(format!("{}: {m}", self.name)));
        if self.patch_size == 0 || !self.latent_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "latent size {} not divisible by patch size {}",
                self.latent_size, self.patch_size
            ));
        }
        let n0 = self.grid_side();
        if n0 < 4 || !n0.is_multiple_of(4) {
            return err(format!("grid side {n0} must be a positive multiple of 4"));
        }
        for s in 0..STAGES {
            let (d, h) = (self.stage_dims[s], self.stage_heads[s]);
            if h == 0 || d == 0 || d % h != 0 {
                return err(format!("stage {s}: dim {d} not divisible by {h} heads"));
            }
            if d % 4 != 0 {
                return err(format!("stage {s}: dim {d} must be a multiple of 4"));
            }
        }
        let d = self.stage_dims;
        if d[3] != d[1] || d[4] != d[0] {
            return err(format!("stage dims {d:?} are not symmetric"));
        }
        if self.class_count == 0 || self.latent_channels == 0 {
            return err("class and channel counts must be positive".into());
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return err(format!("time features {} must be even", self.time_features));
        }
        if !(self.amm.scale.is_finite() && self.amm.scale > 0.0) {
            return err(format!("amm scale {} must be positive", self.amm.scale));
        }
        if let Some(r) = self.amm.radius {
            if !(r.is_finite() && r > 0.0) {
                return err(format!("amm radius {r} must be positive"));
            }
        }
        if let Some(s) = &self.amm.schedule {
            s.check(&self.decoder_blocks())?;
        }
        self.mask.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| EdtError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| EdtError::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| EdtError::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| EdtError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::nano(),
            ModelConfig::edt_s(),
            ModelConfig::edt_b(),
            ModelConfig::edt_xl(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn edt_s_geometry() {
        let cfg = ModelConfig::edt_s();
        assert_eq!(cfg.stage_sides(), [16, 8, 4, 8, 16]);
        assert_eq!(cfg.stage_tokens(0), 256);
        let [r1, r2] = cfg.expansion_ratios();
        assert!((r1 - 416.0 / 312.0).abs() < 1e-12);
        assert!((r2 - 1.25).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::nano()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
        let mut v = serde_json::to_value(ModelConfig::nano()).unwrap();
        v["amm"]["temperature"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = ModelConfig::nano();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::nano();
        c.stage_heads[1] = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::nano();
        c.latent_size = 12;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::nano();
        c.stage_dims[3] = 36;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::nano();
        c.amm.schedule = Some(PlacementSchedule {
            stages: vec![vec![true], vec![true]],
        });
        assert!(c.validate().is_err());
    }
}
