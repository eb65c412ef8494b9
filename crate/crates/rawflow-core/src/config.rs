//! Run configuration: one JSON document describing data generation,
//! architecture sizes, loss weights, optimizer, and the stage schedule.
//! Unknown keys are rejected, and every run writes a resolved snapshot next
//! to its outputs so results are self-describing.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data_isp::IspParams;
use crate::dlfm::{GuidanceMode, SamplerConfig};
use crate::error::{Error, Result};
use crate::nn::params::AdamConfig;
use crate::nn::unet::UNetSpec;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_pairs: usize,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    pub isp: IspParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_pairs: 200,
            height: 64,
            width: 64,
            train_fraction: 0.85,
            isp: IspParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of the shared latent grid.
    pub latent_channels: usize,
    /// Base width of the autoencoder branches (doubles per scale).
    pub dlae_base_width: usize,
    /// Base width of the velocity U-Net.
    pub velocity_base_width: usize,
    pub velocity_scales: usize,
    pub time_embed_dim: usize,
    /// Channels injected per guidance level (same at every scale).
    pub guidance_channels: usize,
    /// Base width of the cross-scale context extractor.
    pub context_base_width: usize,
    /// Seed of the frozen perceptual feature extractor.
    pub phi_seed: u64,
    /// Zero-fill decoder output convolutions so freshly built decoders
    /// predict exactly zero. The velocity head is always zero-initialized.
    pub zero_init_decoders: bool,
}

impl ModelConfig {
    /// The velocity U-Net layout implied by this configuration.
    pub fn velocity_unet_spec(&self) -> UNetSpec {
        UNetSpec {
            in_channels: self.latent_channels,
            out_channels: self.latent_channels,
            base_width: self.velocity_base_width,
            num_scales: self.velocity_scales,
            time_embed_dim: self.time_embed_dim,
            guidance_channels: vec![self.guidance_channels; self.velocity_scales],
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 16,
            dlae_base_width: 12,
            velocity_base_width: 32,
            velocity_scales: 3,
            time_embed_dim: 64,
            guidance_channels: 16,
            context_base_width: 16,
            phi_seed: crate::nn::phi::DEFAULT_PHI_SEED,
            zero_init_decoders: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Perceptual weight in the reconstruction losses.
    pub lambda1: f64,
    /// Feature-alignment weight in the RAW branch objective.
    pub lambda2: f64,
    /// Perceptual weight in the end-to-end fine-tuning loss.
    pub lambda3: f64,
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    /// Reduce-on-plateau: multiply lr by this factor...
    pub plateau_factor: f64,
    /// ...after this many consecutive non-improving validations.
    pub plateau_patience: usize,
    pub min_lr: f64,
    /// Global gradient-norm clip per optimizer step (0 disables).
    pub grad_clip: f64,
    /// Stage-3 fine-tuning starts at lr * this factor.
    pub stage3_lr_scale: f64,
    /// Backprop depth (in Euler steps) during end-to-end fine-tuning.
    pub grad_truncation_steps: usize,
    /// Parameter finiteness is asserted every this many steps.
    pub finite_check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.01,
            lambda2: 0.1,
            lambda3: 0.01,
            lr: 1e-4,
            adam: AdamConfig::default(),
            batch_size: 4,
            stage1_epochs: 30,
            stage2_epochs: 30,
            stage3_epochs: 4,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-6,
            grad_clip: 1.0,
            stage3_lr_scale: 0.1,
            grad_truncation_steps: 5,
            finite_check_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceMode::Cross,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_pairs < 2 {
            return Err(Error::config("num_pairs must be >= 2"));
        }
        let divisor = 32usize.max(8 << (self.model.velocity_scales - 1));
        if d.height % divisor != 0 || d.width % divisor != 0 || d.height < 32 || d.width < 32 {
            return Err(Error::config(format!(
                "image dims must be multiples of {divisor} and >= 32, got {}x{}",
                d.height, d.width
            )));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must be in (0,1)"));
        }
        d.isp.validate()?;
        let t = &self.train;
        for (name, l) in [("lambda1", t.lambda1), ("lambda2", t.lambda2), ("lambda3", t.lambda3)] {
            if l < 0.0 {
                return Err(Error::config(format!("{name} must be >= 0")));
            }
        }
        if !(t.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if t.stage1_epochs < 1 || t.stage2_epochs < 1 || t.stage3_epochs < 1 {
            return Err(Error::config("stage epochs must be >= 1"));
        }
        if t.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor must be in (0,1)"));
        }
        if self.sampler.steps < 1 {
            return Err(Error::config("sampler steps must be >= 1"));
        }
        if self.model.latent_channels < 1 || self.model.velocity_scales < 1 {
            return Err(Error::config("model sizes must be positive"));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config; stamped into reports.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_pretty_json().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, self.to_pretty_json()).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Parse a config file, apply dotted-path overrides, and validate. Overrides
/// must address keys that already exist; new keys are rejected just like
/// unknown keys in the file itself.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    // Fill defaults first so overrides can address keys the file omitted.
    let filled: RunConfig = serde_json::from_value(value.clone())
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    value = serde_json::to_value(&filled).expect("config serializes");
    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::config(format!("override: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_override(value: &mut serde_json::Value, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key '{dotted}'")));
    }
    let mut cur = value;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override '{dotted}': '{part}' is not an object path")))?;
        let entry = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("override '{dotted}': unknown key '{part}'")))?;
        if i == parts.len() - 1 {
            // Interpret the value as JSON when possible, else as a string.
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            *entry = parsed;
            return Ok(());
        }
        cur = entry;
    }
    unreachable!()
}
