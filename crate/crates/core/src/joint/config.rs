use std::fmt;
use std::str::FromStr;

use super::JointError;
use crate::kv::KvMap;
use crate::nn::UNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// U-Net alone, spatial loss.
    SpatialOnly = 1,
    /// CAE alone on the frozen U-Net's joint series, temporal loss.
    TemporalOnly = 2,
    /// Both networks, weighted sum of the two losses.
    JointFinetune = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::SpatialOnly, Stage::TemporalOnly, Stage::JointFinetune];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.number() == n)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::SpatialOnly => "spatial_only",
            Stage::TemporalOnly => "temporal_only",
            Stage::JointFinetune => "joint_finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = JointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(n) = s.parse::<u8>() {
            if let Some(stage) = Stage::from_number(n) {
                return Ok(stage);
            }
        }
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| JointError::Config(format!("unknown stage `{}`", s)))
    }
}

/// Training hyper-parameters, read from a `key = value` file.
///
/// | key | default |
/// |---|---|
/// | `seed` | 7 |
/// | `steps_stage1`, `steps_stage2`, `steps_stage3` | 800, 1500, 100 |
/// | `lr_stage1`, `lr_stage2`, `lr_stage3` | 1e-3, 1e-4, 1e-4 |
/// | `w_spatial`, `w_temporal` | 10, 1 |
/// | `checkpoint_every` | 50 (0 disables periodic checkpoints) |
/// | `unet_levels`, `unet_base_channels` | 3, 8 |
/// | `record_wall_time` | true |
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: [usize; 3],
    pub lr: [f64; 3],
    pub w_spatial: f64,
    pub w_temporal: f64,
    pub checkpoint_every: usize,
    pub unet_levels: usize,
    pub unet_base_channels: usize,
    /// When false the trace's `wall_ms` column is written as 0 so traces
    /// of identical runs compare byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: [800, 1500, 100],
            lr: [1e-3, 1e-4, 1e-4],
            w_spatial: 10.0,
            w_temporal: 1.0,
            checkpoint_every: 50,
            unet_levels: 3,
            unet_base_channels: 8,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn steps(&self, stage: Stage) -> usize {
        self.steps[stage as usize - 1]
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        self.lr[stage as usize - 1]
    }

    pub fn unet_config(&self, frames: usize) -> UNetConfig {
        UNetConfig {
            in_channels: frames,
            levels: self.unet_levels,
            base_channels: self.unet_base_channels,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<(), JointError> {
        if !(self.w_spatial >= 0.0 && self.w_temporal >= 0.0) || self.w_spatial + self.w_temporal == 0.0 {
            return Err(JointError::Config(format!(
                "loss weights must be non-negative and not both zero, got {} : {}",
                self.w_spatial, self.w_temporal
            )));
        }
        if let Some(lr) = self.lr.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
            return Err(JointError::Config(format!("learning rate {} is not positive", lr)));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, JointError> {
        let d = TrainConfig::default();
        let known = [
            "seed",
            "steps_stage1",
            "steps_stage2",
            "steps_stage3",
            "lr_stage1",
            "lr_stage2",
            "lr_stage3",
            "w_spatial",
            "w_temporal",
            "checkpoint_every",
            "unet_levels",
            "unet_base_channels",
            "record_wall_time",
        ];
        if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
            return Err(JointError::Config(format!("unknown config key `{}`", k)));
        }
        let cfg = TrainConfig {
            seed: kv.parse_or("seed", d.seed)?,
            steps: [
                kv.parse_or("steps_stage1", d.steps[0])?,
                kv.parse_or("steps_stage2", d.steps[1])?,
                kv.parse_or("steps_stage3", d.steps[2])?,
            ],
            lr: [
                kv.parse_or("lr_stage1", d.lr[0])?,
                kv.parse_or("lr_stage2", d.lr[1])?,
                kv.parse_or("lr_stage3", d.lr[2])?,
            ],
            w_spatial: kv.parse_or("w_spatial", d.w_spatial)?,
            w_temporal: kv.parse_or("w_temporal", d.w_temporal)?,
            checkpoint_every: kv.parse_or("checkpoint_every", d.checkpoint_every)?,
            unet_levels: kv.parse_or("unet_levels", d.unet_levels)?,
            unet_base_channels: kv.parse_or("unet_base_channels", d.unet_base_channels)?,
            record_wall_time: kv.parse_or("record_wall_time", d.record_wall_time)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, JointError> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("seed", self.seed);
        for (i, s) in self.steps.iter().enumerate() {
            kv.insert(&format!("steps_stage{}", i + 1), s);
        }
        for (i, lr) in self.lr.iter().enumerate() {
            kv.insert(&format!("lr_stage{}", i + 1), lr);
        }
        kv.insert("w_spatial", self.w_spatial);
        kv.insert("w_temporal", self.w_temporal);
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("unet_levels", self.unet_levels);
        kv.insert("unet_base_channels", self.unet_base_channels);
        kv.insert("record_wall_time", self.record_wall_time);
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_and_defaults() {
        let cfg = TrainConfig::parse("steps_stage2 = 5\nw_temporal = 0\n").unwrap();
        assert_eq!(cfg.steps, [800, 5, 100]);
        assert_eq!(cfg.w_temporal, 0.0);
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig::parse("w_spatial = 0\nw_temporal = 0\n").is_err());
        assert!(TrainConfig::parse("w_spatial = -1\n").is_err());
        assert!(TrainConfig::parse("lr_stage1 = 0\n").is_err());
        assert!(TrainConfig::parse("stepz = 3\n").is_err());
    }

    #[test]
    fn stage_names() {
        assert_eq!("2".parse::<Stage>().unwrap(), Stage::TemporalOnly);
        assert_eq!("joint_finetune".parse::<Stage>().unwrap(), Stage::JointFinetune);
        assert!("4".parse::<Stage>().is_err());
    }
}
