//! Run configuration: TOML file with one section per module, plus two
//! override layers. CLI flags override file values; `CFCDC_*` environment
//! variables override both. Env keys use `CFCDC_<SECTION>_<FIELD>` (e.g.
//! `CFCDC_OPTIM_LR`); `CFCDC_SEED` covers the top-level seed.

use std::path::Path;

use cfcdc_core::encoder::EncoderConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("environment variable {name}: cannot parse {value:?} as {expected}")]
    BadEnv { name: String, value: String, expected: &'static str },
    #[error("unknown environment override {name}")]
    UnknownEnv { name: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        // Desk-scale encoder: big enough to overfit the synthetic task,
        // small enough that staged training stays in the minutes range.
        EncoderSection {
            n_layers: 1,
            hidden_dim: 64,
            n_heads: 2,
            ffn_dim: 128,
            dropout_rate: 0.2,
            max_seq_len: 48,
        }
    }
}

impl EncoderSection {
    pub fn to_encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            dropout_rate: self.dropout_rate,
            max_seq_len: self.max_seq_len,
            vocab_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IfcdSection {
    pub enabled: bool,
    pub lstm_dim: usize,
}

impl Default for IfcdSection {
    fn default() -> Self {
        IfcdSection { enabled: true, lstm_dim: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdropSection {
    pub lambda: f64,
    pub mu: f64,
    pub one_sided: bool,
}

impl Default for RdropSection {
    fn default() -> Self {
        RdropSection { lambda: 0.5, mu: 0.5, one_sided: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FgmSection {
    pub enabled: bool,
    pub epsilon: f64,
}

impl Default for FgmSection {
    fn default() -> Self {
        FgmSection { enabled: false, epsilon: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Stop a stage early once train-split candidate accuracy reaches this.
    pub early_stop_acc: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection { lr: 2e-3, batch_size: 16, epochs: 30, clip_norm: 5.0, early_stop_acc: 0.999 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotingSection {
    pub alpha: f64,
}

impl Default for VotingSection {
    fn default() -> Self {
        VotingSection { alpha: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgSection {
    pub k: usize,
}

impl Default for EgSection {
    fn default() -> Self {
        EgSection { k: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub ifcd: IfcdSection,
    pub rdrop: RdropSection,
    pub fgm: FgmSection,
    pub optim: OptimSection,
    pub voting: VotingSection,
    pub eg: EgSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Apply `CFCDC_*` overrides from the process environment.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        let vars: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with("CFCDC_"))
            .collect();
        self.apply_env_pairs(&vars)
    }

    pub fn apply_env_pairs(&mut self, vars: &[(String, String)]) -> Result<(), ConfigError> {
        for (name, value) in vars {
            let key = name.strip_prefix("CFCDC_").unwrap_or(name).to_ascii_lowercase();
            self.apply_override(&key, name, value)?;
        }
        Ok(())
    }

    fn apply_override(&mut self, key: &str, name: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(
            name: &str,
            value: &str,
            expected: &'static str,
        ) -> Result<T, ConfigError> {
            value.trim().parse().map_err(|_| ConfigError::BadEnv {
                name: name.to_string(),
                value: value.to_string(),
                expected,
            })
        }
        fn flag(name: &str, value: &str) -> Result<bool, ConfigError> {
            match value.trim().to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" => Ok(false),
                _ => Err(ConfigError::BadEnv {
                    name: name.to_string(),
                    value: value.to_string(),
                    expected: "boolean",
                }),
            }
        }
        match key {
            "seed" => self.seed = num(name, value, "integer")?,
            "encoder_n_layers" => self.encoder.n_layers = num(name, value, "integer")?,
            "encoder_hidden_dim" => self.encoder.hidden_dim = num(name, value, "integer")?,
            "encoder_n_heads" => self.encoder.n_heads = num(name, value, "integer")?,
            "encoder_ffn_dim" => self.encoder.ffn_dim = num(name, value, "integer")?,
            "encoder_dropout_rate" => self.encoder.dropout_rate = num(name, value, "number")?,
            "encoder_max_seq_len" => self.encoder.max_seq_len = num(name, value, "integer")?,
            "ifcd_enabled" => self.ifcd.enabled = flag(name, value)?,
            "ifcd_lstm_dim" => self.ifcd.lstm_dim = num(name, value, "integer")?,
            "rdrop_lambda" => self.rdrop.lambda = num(name, value, "number")?,
            "rdrop_mu" => self.rdrop.mu = num(name, value, "number")?,
            "rdrop_one_sided" => self.rdrop.one_sided = flag(name, value)?,
            "fgm_enabled" => self.fgm.enabled = flag(name, value)?,
            "fgm_epsilon" => self.fgm.epsilon = num(name, value, "number")?,
            "optim_lr" => self.optim.lr = num(name, value, "number")?,
            "optim_batch_size" => self.optim.batch_size = num(name, value, "integer")?,
            "optim_epochs" => self.optim.epochs = num(name, value, "integer")?,
            "optim_clip_norm" => self.optim.clip_norm = num(name, value, "number")?,
            "optim_early_stop_acc" => self.optim.early_stop_acc = num(name, value, "number")?,
            "voting_alpha" => self.voting.alpha = num(name, value, "number")?,
            "eg_k" => self.eg.k = num(name, value, "integer")?,
            _ => return Err(ConfigError::UnknownEnv { name: name.to_string() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.encoder;
        if e.n_layers == 0 || e.hidden_dim == 0 || e.n_heads == 0 || e.ffn_dim == 0 {
            return Err(ConfigError::Invalid("encoder dimensions must be positive".into()));
        }
        if e.hidden_dim % e.n_heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "hidden_dim {} not divisible by n_heads {}",
                e.hidden_dim, e.n_heads
            )));
        }
        if !(0.0..1.0).contains(&e.dropout_rate) {
            return Err(ConfigError::Invalid("dropout_rate must be in [0,1)".into()));
        }
        if e.max_seq_len < 8 {
            return Err(ConfigError::Invalid("max_seq_len must be at least 8".into()));
        }
        if self.ifcd.enabled && self.ifcd.lstm_dim == 0 {
            return Err(ConfigError::Invalid("lstm_dim must be positive".into()));
        }
        if self.optim.batch_size == 0 || self.optim.epochs == 0 {
            return Err(ConfigError::Invalid("batch_size and epochs must be positive".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.optim.clip_norm > 0.0) {
            return Err(ConfigError::Invalid("lr and clip_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.voting.alpha) {
            return Err(ConfigError::Invalid("voting alpha must be in [0,1]".into()));
        }
        if self.eg.k == 0 {
            return Err(ConfigError::Invalid("eg k must be at least 1".into()));
        }
        if !(self.fgm.epsilon > 0.0) {
            return Err(ConfigError::Invalid("fgm epsilon must be positive".into()));
        }
        Ok(())
    }
}
