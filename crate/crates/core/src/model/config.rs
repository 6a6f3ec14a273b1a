use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::layers::MobiVariParams;
use crate::pipeline::TrainSettings;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sr,
    ColorDn,
    GrayDn,
    Lle,
    Derain,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Sr, Task::ColorDn, Task::GrayDn, Task::Lle, Task::Derain];

    pub fn image_channels(self) -> usize {
        if self == Task::GrayDn {
            1
        } else {
            3
        }
    }

    pub fn default_helper(self) -> bool {
        matches!(self, Task::Sr | Task::Lle)
    }

    pub fn is_denoise(self) -> bool {
        matches!(self, Task::ColorDn | Task::GrayDn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// The four-stage restoration network.
    Ramit,
    /// Shallow conv, a run of blocks at full resolution, 1×1 head and a global residual.
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub task: Task,
    pub scale: usize,
    pub channels: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub chsa_ratio: f64,
    pub window: usize,
    /// `None` picks the task default.
    pub helper: Option<bool>,
    pub ffn_ratio: f64,
    pub mobivari: MobiVariParams,
    /// Bottleneck and H-RAMi mixers; `None` reuses `mobivari`.
    pub fuse_mobivari: Option<MobiVariParams>,
    pub hrami: bool,
    pub probe_blocks: usize,
    pub probe_shift: bool,
    pub train: TrainSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Ramit,
            task: Task::Sr,
            scale: 2,
            channels: 64,
            depths: [6, 4, 4, 6],
            heads: [4; 4],
            chsa_ratio: 0.25,
            window: 8,
            helper: None,
            ffn_ratio: 2.0,
            mobivari: MobiVariParams::default(),
            fuse_mobivari: None,
            hrami: true,
            probe_blocks: 1,
            probe_shift: false,
            train: TrainSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn sr(scale: usize) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    pub fn slim_sr(scale: usize) -> Self {
        Self {
            scale,
            channels: 48,
            depths: [8, 2, 2, 8],
            fuse_mobivari: Some(MobiVariParams {
                groups: 1,
                expansion: 2.0,
            }),
            ..Self::default()
        }
    }

    pub fn slim_lle() -> Self {
        Self {
            task: Task::Lle,
            channels: 48,
            depths: [4, 2, 2, 4],
            fuse_mobivari: Some(MobiVariParams {
                groups: 3,
                expansion: 1.2,
            }),
            ..Self::default()
        }
    }

    /// Toy single-stage network used for attribution experiments.
    pub fn probe(channels: usize, heads: usize, chsa_ratio: f64, window: usize) -> Self {
        Self {
            arch: Arch::Probe,
            task: Task::ColorDn,
            channels,
            heads: [heads; 4],
            chsa_ratio,
            window,
            ..Self::default()
        }
    }

    pub fn helper_enabled(&self) -> bool {
        self.helper.unwrap_or_else(|| self.task.default_helper())
    }

    pub fn fuse_params(&self) -> MobiVariParams {
        self.fuse_mobivari.unwrap_or(self.mobivari)
    }

    pub fn upscale(&self) -> usize {
        if self.task == Task::Sr {
            self.scale
        } else {
            1
        }
    }

    /// Side lengths of the model input must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        match self.arch {
            Arch::Ramit => 4 * self.window,
            Arch::Probe => self.window,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.task == Task::Sr && !(2..=4).contains(&self.scale) {
            return Err(ModelError::InvalidScale(self.scale));
        }
        if self.channels == 0 || self.window == 0 {
            return bad("channels and window must be positive".into());
        }
        if self.arch == Arch::Ramit {
            if self.channels % 16 != 0 {
                return bad(format!("channels {} must be divisible by 16", self.channels));
            }
            if self.depths.iter().any(|&d| d == 0) {
                return bad("every stage needs at least one block".into());
            }
        } else if self.probe_blocks == 0 {
            return bad("probe needs at least one block".into());
        }
        let stages = if self.arch == Arch::Ramit { 4 } else { 1 };
        for &l in &self.heads[..stages] {
            if l == 0 || self.channels % l != 0 {
                return bad(format!("channels {} not divisible by {l} heads", self.channels));
            }
        }
        if !(0.0..=1.0).contains(&self.chsa_ratio) {
            return bad(format!("chsa_ratio {} outside [0, 1]", self.chsa_ratio));
        }
        for p in [self.mobivari, self.fuse_params()] {
            if p.groups == 0 || p.expansion <= 0.0 {
                return bad("mobivari groups and expansion must be positive".into());
            }
        }
        if self.ffn_ratio <= 0.0 {
            return bad("ffn_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` pairs (dotted keys, JSON or bare-string values) and re-validates.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ModelError> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| ModelError::InvalidConfig(format!("override key `{key}` is not an object path")))?;
                slot = obj.entry(part.to_string()).or_insert(Value::Null);
            }
            *slot = value;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn json_error(text: &str, e: &serde_json::Error) -> ModelError {
    let offset = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    ModelError::ConfigParse {
        offset,
        message: e.to_string(),
    }
}
