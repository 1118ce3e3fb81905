//! Run configuration: one TOML tree covering model, loss, training, data
//! and evaluation settings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub projection_dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            embed_dim: 48,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            projection_dim: 32,
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "model.vision.image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        check_width("model.vision", self.embed_dim, self.heads, self.mlp_ratio, self.projection_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Zero means "take it from the dataset vocabulary".
    pub vocab_size: usize,
    pub max_length: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub projection_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            max_length: 32,
            embed_dim: 48,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            projection_dim: 32,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_length == 0 {
            return Err(Error::config("model.text.max_length must be positive"));
        }
        check_width("model.text", self.embed_dim, self.heads, self.mlp_ratio, self.projection_dim)
    }
}

fn check_width(section: &str, embed: usize, heads: usize, mlp: usize, proj: usize) -> Result<()> {
    if embed == 0 || heads == 0 || !embed.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "{section}.embed_dim {embed} not divisible by heads {heads}"
        )));
    }
    if mlp == 0 || proj == 0 {
        return Err(Error::config(format!("{section}: mlp_ratio and projection_dim must be positive")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.projection_dim != self.text.projection_dim {
            return Err(Error::config(format!(
                "projection_dim differs between vision ({}) and text ({})",
                self.vision.projection_dim, self.text.projection_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 only checkpoints at the end.
    pub eval_every: usize,
    /// Leading fraction of the pretrain split that is used.
    pub pretrain_fraction: f64,
    /// Write wall-clock fields into the metrics log (zeros otherwise).
    pub record_timing: bool,
    pub checkpoint: Option<String>,
    pub log: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            mask_ratio: 0.5,
            seed: 0,
            eval_every: 0,
            pretrain_fraction: 1.0,
            record_timing: true,
            checkpoint: None,
            log: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Draw texts at the same indices as images instead of independently.
    pub paired: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
    pub n_finetune: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub multi_label_prob: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            n_finetune: 250,
            n_test: 250,
            noise_sigma: 0.05,
            multi_label_prob: 0.2,
            seed: 2024,
            image_size: 32,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("data.n_samples must be at least 1"));
        }
        if self.n_finetune + self.n_test > self.n_samples {
            return Err(Error::config("data.n_finetune + data.n_test exceed data.n_samples"));
        }
        if !(0.0..=1.0).contains(&self.multi_label_prob) {
            return Err(Error::config("data.multi_label_prob must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("data.noise_sigma must be non-negative"));
        }
        if self.image_size < 8 {
            return Err(Error::config("data.image_size must be at least 8"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 5, 10],
            probe_epochs: 200,
            probe_lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub sampling: SamplingConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` (or the defaults) and applies dotted-path overrides such
    /// as `("loss.beta", "0.2")`.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p).map_err(Error::io(p))?,
            None => String::new(),
        };
        let mut tree: toml::Table = toml::from_str(&base).map_err(|e| Error::config(e.to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut tree, key, parse_value(raw))?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::config("train.batch_size must be at least 2"));
        }
        if !(t.learning_rate >= 0.0) || !t.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate must be finite and non-negative"));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&t.mask_ratio) {
            return Err(Error::config(format!("train.mask_ratio {} outside [0, 1)", t.mask_ratio)));
        }
        if !(t.pretrain_fraction > 0.0 && t.pretrain_fraction <= 1.0) {
            return Err(Error::config("train.pretrain_fraction must lie in (0, 1]"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks must be non-empty positive integers"));
        }
        if self.data.image_size != self.model.vision.image_size {
            return Err(Error::config(format!(
                "data.image_size {} differs from model.vision.image_size {}",
                self.data.image_size, self.model.vision.image_size
            )));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for scalars and arrays; anything else is a string.
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = tree;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossMode;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[loss]\nbeta = 0.2\ngamma = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_toml_str("[nonsense]\n").is_err());
    }

    #[test]
    fn dotted_overrides_apply() {
        let cfg = RunConfig::resolve(
            None,
            &[
                ("loss.beta".into(), "0.25".into()),
                ("loss.mode".into(), "verbatim".into()),
                ("train.mask_ratio".into(), "0.75".into()),
                ("eval.ks".into(), "[1, 3]".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.beta, 0.25);
        assert_eq!(cfg.loss.mode, LossMode::Verbatim);
        assert_eq!(cfg.train.mask_ratio, 0.75);
        assert_eq!(cfg.eval.ks, vec![1, 3]);
        assert!(RunConfig::resolve(None, &[("loss.nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn invariants_enforced() {
        let bad = [
            "[train]\nbatch_size = 1\n",
            "[train]\nmask_ratio = 1.0\n",
            "[model.vision]\npatch_size = 5\n",
            "[model.vision]\nheads = 5\n",
            "[model.text]\nprojection_dim = 16\n",
            "[loss]\ntemperature_T = 0.0\n",
        ];
        for b in bad {
            assert!(RunConfig::from_toml_str(b).is_err(), "{b}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}
