//! TOML run configuration. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use afflow_core::arch::ArchSpec;
use afflow_core::guidance::{GuidanceMode, GuidanceSpec};
use afflow_core::latent::{AutoencoderConfig, LATENT_NOISE};
use afflow_core::optim::AdamWConfig;
use afflow_core::train::TrainConfig;
use afflow_core::FlowConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentSection>,
    #[serde(default)]
    pub guidance: GuidanceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `l(T)-d` shorthand. Ignored when `layers` is set.
    pub arch: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Defaults to half the width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub mlp_ratio: usize,
    pub rope_scale: f64,
    /// Defaults to the number of classes found in the training data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub condition_all_blocks: bool,
    pub alternate_orderings: bool,
    /// Token grid `[height, width]` for non-image data; defaults to one row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: "6(3)-128".into(),
            layers: None,
            width: None,
            head_dim: None,
            mlp_ratio: 4,
            rope_scale: 1.0,
            num_classes: None,
            condition_all_blocks: false,
            alternate_orderings: true,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Number of samples seen; steps = ceil(total_images / batch_size).
    pub total_images: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub cond_dropout: f64,
    pub grad_clip: f64,
    /// Input noise for data trained without an autoencoder.
    pub input_noise: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            total_images: 200_000,
            lr: opt.lr,
            lr_min: t.lr_min,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            cond_dropout: t.cond_dropout,
            grad_clip: t.grad_clip,
            input_noise: t.input_noise,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub patch: usize,
    pub hidden: usize,
    pub noise: f64,
    pub finetune_steps: u64,
    pub finetune_lr: f64,
}

impl Default for LatentSection {
    fn default() -> Self {
        LatentSection { patch: 2, hidden: 64, noise: LATENT_NOISE, finetune_steps: 500, finetune_lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub omega: f64,
    pub mode: String,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection { omega: 0.0, mode: "none".into() }
    }
}

impl GuidanceSection {
    pub fn spec(&self) -> CliResult<GuidanceSpec> {
        let mode: GuidanceMode = self.mode.parse().map_err(|e: afflow_core::Error| CliError::Validation(e.to_string()))?;
        Ok(GuidanceSpec::new(mode, self.omega)?)
    }
}

/// Shape of the data a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataShape {
    pub positions: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.layers()?;
        self.optimizer().validate()?;
        self.guidance.spec()?;
        let t = &self.train;
        if t.batch_size == 0 || t.total_images == 0 {
            return Err(CliError::Validation("batch_size and total_images must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.cond_dropout) || t.grad_clip < 0.0 || t.input_noise < 0.0 || t.lr_min < 0.0 {
            return Err(CliError::Validation("cond_dropout must lie in [0, 1]; grad_clip, input_noise and lr_min must be non-negative".into()));
        }
        if let Some(l) = &self.latent {
            if l.noise < 0.0 || l.finetune_lr <= 0.0 || l.patch == 0 {
                return Err(CliError::Validation("latent noise must be non-negative, finetune_lr and patch positive".into()));
            }
        }
        Ok(())
    }

    /// Per-block layer counts and width.
    pub fn layers(&self) -> CliResult<(Vec<usize>, usize)> {
        let m = &self.model;
        match (&m.layers, m.width) {
            (Some(l), Some(w)) => Ok((l.clone(), w)),
            (Some(_), None) => Err(CliError::Validation("model.layers needs model.width".into())),
            (None, _) => {
                let a: ArchSpec = m.arch.parse().map_err(|e: afflow_core::Error| CliError::Validation(e.to_string()))?;
                Ok((a.layers(), m.width.unwrap_or(a.width)))
            }
        }
    }

    pub fn train_steps(&self) -> u64 {
        self.train.total_images.div_ceil(self.train.batch_size as u64)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let t = &self.train;
        AdamWConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            total_steps: self.train_steps(),
            optimizer: self.optimizer(),
            lr_min: t.lr_min,
            cond_dropout: t.cond_dropout,
            grad_clip: t.grad_clip,
            input_noise: self.latent.as_ref().map_or(t.input_noise, |l| l.noise),
        }
    }

    pub fn autoencoder_config(&self, shape: DataShape) -> CliResult<Option<AutoencoderConfig>> {
        let Some(l) = &self.latent else { return Ok(None) };
        let size = (shape.positions as f64).sqrt().round() as usize;
        if shape.channels != 1 || size * size != shape.positions {
            return Err(CliError::Validation(format!(
                "latent training needs square single-channel images, got D={} C={}",
                shape.positions, shape.channels
            )));
        }
        let cfg = AutoencoderConfig { image_size: size, patch: l.patch, hidden: l.hidden };
        cfg.validate()?;
        Ok(Some(cfg))
    }

    /// Flow configuration for data of the given shape.
    pub fn flow_config(&self, shape: DataShape) -> CliResult<FlowConfig> {
        let (layers, width) = self.layers()?;
        let m = &self.model;
        let (gh, gw, c) = match self.autoencoder_config(shape)? {
            Some(ae) => (ae.grid(), ae.grid(), ae.channels()),
            None => {
                let [gh, gw] = m.grid.unwrap_or([1, shape.positions]);
                if gh * gw != shape.positions {
                    return Err(CliError::Validation(format!("grid {gh}x{gw} does not hold {} positions", shape.positions)));
                }
                (gh, gw, shape.channels)
            }
        };
        let arch = ArchSpec { deep_layers: layers.first().copied().unwrap_or(0), blocks: layers.len(), width };
        let mut cfg = FlowConfig::new(arch, gh, gw, c);
        cfg.layers = layers;
        if let Some(h) = m.head_dim {
            cfg.head_dim = h;
        }
        cfg.mlp_ratio = m.mlp_ratio;
        cfg.rope_scale = m.rope_scale;
        cfg.num_classes = m.num_classes.unwrap_or(shape.num_classes);
        cfg.condition_all_blocks = m.condition_all_blocks;
        cfg.alternate_orderings = m.alternate_orderings;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shorthand_expands() {
        let cfg = RunConfig::from_toml("[model]\narch = \"18(6)-2048\"\n").unwrap();
        assert_eq!(cfg.layers().unwrap(), (vec![18, 2, 2, 2, 2, 2], 2048));
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbatchsize = 4\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let text = "seed = 9\n[model]\narch = \"4(2)-32\"\nnum_classes = 3\n[train]\nbatch_size = 16\ntotal_images = 100\n[latent]\npatch = 2\n[guidance]\nomega = 1.5\nmode = \"proposed\"\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.train_steps(), 7);
    }

    #[test]
    fn image_shape_maps_to_latent_grid() {
        let cfg = RunConfig::from_toml("[model]\narch = \"2(2)-16\"\n[latent]\npatch = 2\n").unwrap();
        let fc = cfg.flow_config(DataShape { positions: 64, channels: 1, num_classes: 2 }).unwrap();
        assert_eq!((fc.grid_height, fc.grid_width, fc.channels, fc.num_classes), (4, 4, 4, 2));
        assert!(cfg.flow_config(DataShape { positions: 60, channels: 1, num_classes: 0 }).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[guidance]\nmode = \"loud\"\n").is_err());
        assert!(RunConfig::from_toml("[guidance]\nomega = -1.0\nmode = \"proposed\"\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
    }
}
