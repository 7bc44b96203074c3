//! Run configuration: TOML file + dotted-key overrides, with every default
//! spelled out in one place.
//!
//! Overrides are `section.key=value` strings (from CLI flags); they are
//! applied onto the parsed TOML tree before deserialization, so flags always
//! win over the file and unknown keys are rejected for both sources alike.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::contrastive::PairingMode;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Window};
use crate::nn::embedder::EmbedderConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV manifest of clips (path,label,group,role).
    pub manifest: String,
    pub sample_rate: u32,
    /// Segment length in samples fed to the feature pipeline.
    pub clip_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: String::new(),
            sample_rate: 20_000,
            clip_len: 30_225,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig { n_fft: 510, hop: 128, n_mels: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// SSM state size (full N; N/2 conjugate pairs are stored).
    #[serde(rename = "N")]
    pub state_size: usize,
    pub ssm_layers: usize,
    pub ssm_enabled: bool,
    /// Stem width; the latent is 8× this.
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            state_size: 64,
            ssm_layers: 6,
            ssm_enabled: true,
            base_channels: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub method: PairingMode,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Projection output width for the bilinear similarity space.
    pub proj_dim: usize,
    /// Checkpoint every this many epochs (0 = only at the end).
    pub ckpt_every: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            method: PairingMode::Segments,
            batch: 32,
            epochs: 500,
            lr: 1e-4,
            proj_dim: 128,
            ckpt_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pitch_semitones: f32,
    pub fade_frac: f32,
    pub mask_frac: f32,
    pub shift_frac: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let spec = AugmentSpec::default();
        AugmentConfig {
            pitch_semitones: spec.pitch_semitones,
            fade_frac: spec.fade_frac,
            mask_frac: spec.mask_frac,
            shift_frac: spec.shift_frac,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewshotConfig {
    pub n_way: usize,
    pub shots: usize,
    pub ft_lr: f64,
    pub ft_epochs: usize,
    pub freeze_embedder: bool,
    /// Hidden width of the classification head.
    pub head_hidden: usize,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig {
            n_way: 5,
            shots: 5,
            ft_lr: 0.006,
            ft_epochs: 50,
            freeze_embedder: false,
            head_hidden: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub features: FeaturesConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentConfig,
    pub fewshot: FewshotConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Parse `path` (or pure defaults when None) and apply `key=value`
    /// overrides on top. Every key is validated against the schema.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: RunConfig = toml::Table::try_into(table)
            .map_err(|e| Error::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_config().validate()?;
        self.embedder_config().validate()?;
        if self.data.clip_len == 0 {
            return Err(Error::Config("data.clip_len must be positive".into()));
        }
        if self.contrastive.batch < 2 {
            return Err(Error::Config(format!(
                "contrastive.batch must be at least 2 (got {}); the loss needs in-batch negatives",
                self.contrastive.batch
            )));
        }
        if self.fewshot.n_way == 0 || self.fewshot.shots == 0 {
            return Err(Error::Config("fewshot.n_way and fewshot.shots must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            n_fft: self.features.n_fft,
            hop: self.features.hop,
            n_mels: self.features.n_mels,
            sample_rate: self.data.sample_rate,
            window: Window::Hann,
            eps: 1e-6,
        }
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            base_channels: self.model.base_channels,
            n_ssm_layers: self.model.ssm_layers,
            state_size: self.model.state_size,
            ssm_enabled: self.model.ssm_enabled,
        }
    }

    pub fn augment_spec(&self, seed: u64) -> AugmentSpec {
        AugmentSpec {
            pitch_semitones: self.augment.pitch_semitones,
            fade_frac: self.augment.fade_frac,
            mask_frac: self.augment.mask_frac,
            shift_frac: self.augment.shift_frac,
            seed,
        }
    }

    /// The resolved configuration as TOML, for echoing back to the user.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes")
    }
}

/// Apply one `section.key=value` override onto the TOML tree.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key_path, raw_value) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{spec}` is not of the form key=value"))
    })?;
    let value = parse_toml_scalar(raw_value.trim());
    let keys: Vec<&str> = key_path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override `{spec}`: `{k}` is not a section"))
            })?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Interpret an override value: bool, integer, float, then bare string.
fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_match_the_documented_values() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.data.sample_rate, 20_000);
        assert_eq!(cfg.data.clip_len, 30_225);
        assert_eq!(cfg.features.n_fft, 510);
        assert_eq!(cfg.features.hop, 128);
        assert_eq!(cfg.features.n_mels, 256);
        assert_eq!(cfg.model.state_size, 64);
        assert_eq!(cfg.model.ssm_layers, 6);
        assert!(cfg.model.ssm_enabled);
        assert_eq!(cfg.model.base_channels, 64);
        assert_eq!(cfg.contrastive.method, PairingMode::Segments);
        assert_eq!(cfg.contrastive.batch, 32);
        assert_eq!(cfg.contrastive.epochs, 500);
        assert_eq!(cfg.contrastive.lr, 1e-4);
        assert_eq!(cfg.fewshot.n_way, 5);
        assert_eq!(cfg.fewshot.shots, 5);
        assert_eq!(cfg.fewshot.ft_lr, 0.006);
        assert_eq!(cfg.fewshot.ft_epochs, 50);
        assert!(!cfg.fewshot.freeze_embedder);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn file_then_flags_compose_with_flags_winning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            "seed = 7\n[contrastive]\nmethod = \"augmentations\"\nbatch = 8\n[model]\nN = 16"
        )
        .unwrap();
        drop(f);
        let cfg = RunConfig::load(
            Some(&path),
            &["contrastive.batch=4".into(), "fewshot.shots=3".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.contrastive.method, PairingMode::Augmentations);
        assert_eq!(cfg.contrastive.batch, 4); // flag beat the file
        assert_eq!(cfg.model.state_size, 16);
        assert_eq!(cfg.fewshot.shots, 3);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::load(None, &["contrastive.temperature=0.1".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("temperature"), "{msg}");
        assert!(matches!(err, Error::Config(_)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[data]\nsample_rte = 100\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("sample_rte"), "{err}");
    }

    #[test]
    fn malformed_override_and_bad_values_error() {
        assert!(RunConfig::load(None, &["contrastive.batch".into()]).is_err());
        assert!(RunConfig::load(None, &["contrastive.batch=maybe".into()]).is_err());
        // Structural invalidity (batch of 1 can have no negatives).
        assert!(RunConfig::load(None, &["contrastive.batch=1".into()]).is_err());
    }

    #[test]
    fn resolved_config_roundtrips_through_toml() {
        let cfg = RunConfig::load(None, &["model.base_channels=16".into()]).unwrap();
        let echoed = cfg.to_toml_string();
        let reparsed: RunConfig = toml::from_str(&echoed).unwrap();
        assert_eq!(reparsed.model.base_channels, 16);
        assert_eq!(reparsed.contrastive.lr, cfg.contrastive.lr);
        assert!(echoed.contains("N = 64"));
    }
}
