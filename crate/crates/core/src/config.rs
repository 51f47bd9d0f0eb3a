//! Model and training configuration, with the UTF-8 key=value text format
//! used inside checkpoints and accepted as config files (JSON also accepted).

use crate::error::{Error, Result};

/// Decoder-only transformer topology. `binarize = false` builds the
/// full-precision twin used as teacher and for ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub initializer_range: f32,
    pub binarize: bool,
}

pub const RMS_EPS: f32 = 1e-5;
pub const ROPE_BASE: f32 = 10000.0;

impl ModelConfig {
    /// Desk-scale default: 4 layers, hidden 128, 4 heads, intermediate 352,
    /// byte-level vocab 259, context 256.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden_size: 128,
            n_heads: 4,
            n_kv_heads: 4,
            intermediate_size: 352,
            vocab_size: 259,
            max_seq_len: 256,
            initializer_range: 0.02,
            binarize: true,
        }
    }

    /// 130M-class shape: 12 layers, hidden 768, 12 heads, intermediate 2048.
    pub fn size_130m() -> Self {
        ModelConfig {
            n_layers: 12,
            hidden_size: 768,
            n_heads: 12,
            n_kv_heads: 12,
            intermediate_size: 2048,
            vocab_size: 32000,
            max_seq_len: 2048,
            initializer_range: 0.02,
            binarize: true,
        }
    }

    /// 1.3B-class shape: 24 layers, hidden 2048, 32 heads, intermediate 5632.
    pub fn size_1_3b() -> Self {
        ModelConfig {
            n_layers: 24,
            hidden_size: 2048,
            n_heads: 32,
            n_kv_heads: 32,
            intermediate_size: 5632,
            vocab_size: 32000,
            max_seq_len: 2048,
            initializer_range: 0.02,
            binarize: true,
        }
    }

    /// 7B-class shape: 32 layers, hidden 4096, 32 heads, intermediate 11008.
    pub fn size_7b() -> Self {
        ModelConfig {
            n_layers: 32,
            hidden_size: 4096,
            n_heads: 32,
            n_kv_heads: 32,
            intermediate_size: 11008,
            vocab_size: 32000,
            max_seq_len: 2048,
            initializer_range: 0.02,
            binarize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.n_kv_heads != self.n_heads {
            return Err(Error::Config(
                "n_kv_heads must equal n_heads (no grouped-query attention)".into(),
            ));
        }
        if (self.hidden_size / self.n_heads) % 2 != 0 {
            return Err(Error::Config("head dimension must be even for rotary".into()));
        }
        if self.max_seq_len < 1 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.n_layers == 0 || self.intermediate_size == 0 {
            return Err(Error::Config("layers and intermediate size must be nonzero".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_layers" => self.n_layers = parse(key, value)?,
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_kv_heads" => self.n_kv_heads = parse(key, value)?,
            "intermediate_size" => self.intermediate_size = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "initializer_range" => self.initializer_range = parse(key, value)?,
            "binarize" => self.binarize = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model config key: {key}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "model.n_layers = {}\nmodel.hidden_size = {}\nmodel.n_heads = {}\nmodel.n_kv_heads = {}\nmodel.intermediate_size = {}\nmodel.vocab_size = {}\nmodel.max_seq_len = {}\nmodel.initializer_range = {}\nmodel.binarize = {}\n",
            self.n_layers,
            self.hidden_size,
            self.n_heads,
            self.n_kv_heads,
            self.intermediate_size,
            self.vocab_size,
            self.max_seq_len,
            self.initializer_range,
            self.binarize
        )
    }
}

/// Loss-spike detection rule: spike when loss > factor × median of the last
/// `window` losses for `patience` consecutive steps, or on any non-finite
/// loss or gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeConfig {
    pub window: usize,
    pub factor: f32,
    pub patience: usize,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig {
            window: 100,
            factor: 3.0,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f32,
    pub final_lr: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub clip_norm: f32,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub spike: SpikeConfig,
    pub checkpoint_every: usize,
    /// Sign snapshots for the flip-flop ratio are taken every this many steps.
    pub ff_interval: usize,
    /// 1 forces the strict single-threaded mode; 0 leaves it to the kernel
    /// defaults. Results are bit-identical either way.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            final_lr: 3e-5,
            warmup_steps: 2000,
            total_steps: 20000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch_tokens: 8192,
            seq_len: 256,
            seed: 0,
            spike: SpikeConfig::default(),
            checkpoint_every: 250,
            ff_interval: 10,
            threads: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults scaled to a toy run: warmup is a tenth of the total steps,
    /// capped at the paper-scale 2000.
    pub fn for_total_steps(total_steps: usize) -> Self {
        TrainConfig {
            total_steps,
            warmup_steps: (total_steps / 10).clamp(1, 2000),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 < final_lr <= peak_lr, got {} and {}",
                self.final_lr, self.peak_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if self.batch_tokens < self.seq_len {
            return Err(Error::Config("batch_tokens must be >= seq_len".into()));
        }
        if self.spike.window < 2 || self.spike.patience == 0 {
            return Err(Error::Config("spike window >= 2 and patience >= 1".into()));
        }
        if self.checkpoint_every == 0 || self.ff_interval == 0 {
            return Err(Error::Config("checkpoint_every and ff_interval must be > 0".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "final_lr" => self.final_lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch_tokens" => self.batch_tokens = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "spike_window" => self.spike.window = parse(key, value)?,
            "spike_factor" => self.spike.factor = parse(key, value)?,
            "spike_patience" => self.spike.patience = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "ff_interval" => self.ff_interval = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown train config key: {key}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "train.peak_lr = {}\ntrain.final_lr = {}\ntrain.warmup_steps = {}\ntrain.total_steps = {}\ntrain.adam_beta1 = {}\ntrain.adam_beta2 = {}\ntrain.adam_eps = {}\ntrain.clip_norm = {}\ntrain.batch_tokens = {}\ntrain.seq_len = {}\ntrain.seed = {}\ntrain.spike_window = {}\ntrain.spike_factor = {}\ntrain.spike_patience = {}\ntrain.checkpoint_every = {}\ntrain.ff_interval = {}\ntrain.threads = {}\n",
            self.peak_lr,
            self.final_lr,
            self.warmup_steps,
            self.total_steps,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.clip_norm,
            self.batch_tokens,
            self.seq_len,
            self.seed,
            self.spike.window,
            self.spike.factor,
            self.spike.patience,
            self.checkpoint_every,
            self.ff_interval,
            self.threads
        )
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value {value:?} for key {key}")))
}

/// Parse a `model.…` / `train.…` key=value block (as stored in checkpoints),
/// starting from the given defaults.
pub fn parse_kv_block(
    text: &str,
    mut model: ModelConfig,
    mut train: TrainConfig,
) -> Result<(ModelConfig, TrainConfig)> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if let Some(k) = key.strip_prefix("model.") {
            model.set(k, value)?;
        } else if let Some(k) = key.strip_prefix("train.") {
            train.set(k, value)?;
        } else {
            return Err(Error::Config(format!("unknown config section in key {key}")));
        }
    }
    Ok((model, train))
}

/// Parse a config file: JSON (`{"model": {...}, "train": {...}}`) when the
/// first non-space byte is `{`, the key=value block format otherwise.
pub fn parse_config_file(
    text: &str,
    model: ModelConfig,
    train: TrainConfig,
) -> Result<(ModelConfig, TrainConfig)> {
    if text.trim_start().starts_with('{') {
        parse_json_block(text, model, train)
    } else {
        parse_kv_block(text, model, train)
    }
}

fn parse_json_block(
    text: &str,
    mut model: ModelConfig,
    mut train: TrainConfig,
) -> Result<(ModelConfig, TrainConfig)> {
    let v: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
    for (section, fields) in obj {
        let fields = fields.as_object().ok_or_else(|| {
            Error::Config(format!("section {section:?} must be an object"))
        })?;
        for (key, value) in fields {
            let value = match value {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            match section.as_str() {
                "model" => model.set(key, &value)?,
                "train" => train.set(key, &value)?,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown config section {section:?} (expected model/train)"
                    )))
                }
            }
        }
    }
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let m = ModelConfig::toy();
        let t = TrainConfig::for_total_steps(5000);
        let text = format!("{}{}", m.to_kv(), t.to_kv());
        let (m2, t2) = parse_kv_block(&text, ModelConfig::size_7b(), TrainConfig::default()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(t, t2);
    }

    #[test]
    fn json_config_parses() {
        let text = r#"{"model": {"n_layers": 2, "hidden_size": 64}, "train": {"seed": 9}}"#;
        let (m, t) = parse_config_file(text, ModelConfig::toy(), TrainConfig::default()).unwrap();
        assert_eq!(m.n_layers, 2);
        assert_eq!(m.hidden_size, 64);
        assert_eq!(t.seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_kv_block("model.bogus = 1\n", ModelConfig::toy(), TrainConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut m = ModelConfig::toy();
        m.n_heads = 3;
        assert!(m.validate().is_err());
        let mut t = TrainConfig::default();
        t.warmup_steps = t.total_steps;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::default();
        t.final_lr = 0.0;
        assert!(t.validate().is_err());
    }
}
