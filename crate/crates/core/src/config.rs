//! Flat `key = value` run configuration.
//!
//! Every tunable has a dotted key (`model.d_model`, `train.peak_lr`, ...).
//! Files hold one assignment per line with `#` comments; later assignments
//! win, so command-line overrides are applied on top of a file. The resolved
//! configuration serializes back to the same format and is stored in every
//! checkpoint, which makes each run reproducible from its snapshot.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{pack, synth_markov, tokenize, PackedCorpus, Vocab};
use crate::corruption::{MaskStrategy, NoiseSchedule};
use crate::error::{LabError, Result};
use crate::inference::DecodeConfig;
use crate::markov::MarkovSource;
use crate::model::ModelConfig;
use crate::objectives::{LossNorm, Objective, ObjectiveConfig};
use crate::trainer::{LrSchedule, TrainConfig};
use crate::weighting::ScoreConvention;

/// Where training text comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Three-symbol noisy cycle with the given advance probability.
    Cycle3,
    /// Two-state chain with the given stay probability.
    TwoState,
    /// UTF-8 text file, tokenized byte by byte.
    Text,
}

impl DataSource {
    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Cycle3 => "cycle3",
            DataSource::TwoState => "two_state",
            DataSource::Text => "text",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "cycle3" => Some(DataSource::Cycle3),
            "two_state" => Some(DataSource::TwoState),
            "text" => Some(DataSource::Text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Advance (cycle3) or stay (two_state) probability.
    pub markov_param: f64,
    /// Tokens synthesized from a Markov source.
    pub tokens: usize,
    pub path: Option<PathBuf>,
    pub seq_len: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Cycle3,
            markov_param: 0.96,
            tokens: 256_000,
            path: None,
            seq_len: 64,
            val_fraction: 0.05,
            seed: 7,
        }
    }
}

impl DataConfig {
    /// The generating chain for synthetic sources.
    pub fn markov_source(&self) -> Result<Option<MarkovSource>> {
        Ok(match self.source {
            DataSource::Cycle3 => Some(MarkovSource::noisy_cycle3(self.markov_param)?),
            DataSource::TwoState => Some(MarkovSource::two_state(self.markov_param)?),
            DataSource::Text => None,
        })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        match self.source {
            DataSource::Cycle3 => Vocab::symbolic(3),
            DataSource::TwoState => Vocab::symbolic(2),
            DataSource::Text => Ok(Vocab::BYTE_LEVEL),
        }
    }

    /// Token stream before packing.
    pub fn token_stream(&self) -> Result<Vec<crate::corpus::TokenId>> {
        match self.markov_source()? {
            Some(src) => synth_markov(&src, self.tokens, None, self.seed),
            None => {
                let path = self.path.as_ref().ok_or_else(|| LabError::InvalidValue {
                    key: "data.path".into(),
                    value: String::new(),
                    reason: "required when data.source = text".into(),
                })?;
                let text = std::fs::read_to_string(path)?;
                Ok(tokenize(&text))
            }
        }
    }

    pub fn load(&self) -> Result<(Vocab, PackedCorpus)> {
        let vocab = self.vocab()?;
        let corpus = pack(&self.token_stream()?, self.seq_len, self.seed, self.val_fraction, &vocab)?;
        Ok((vocab, corpus))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabConfig {
    /// `vocab_size` and `attn_mode` are derived from the data source and
    /// objective; see [`LabConfig::model_config`].
    pub model: ModelConfig,
    pub data: DataConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

/// Keys under this prefix record run state and are ignored on load.
pub const STATE_PREFIX: &str = "state.";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.n_layers", "transformer blocks"),
    ("model.n_heads", "attention heads"),
    ("model.d_model", "residual width"),
    ("model.d_ff", "feed-forward width"),
    ("model.max_len", "position table size"),
    ("data.source", "cycle3 | two_state | text"),
    ("data.markov_param", "advance (cycle3) or stay (two_state) probability"),
    ("data.tokens", "tokens synthesized from a Markov source"),
    ("data.path", "text file for data.source = text"),
    ("data.seq_len", "training sequence length L"),
    ("data.val_fraction", "share of packed sequences held out"),
    ("data.seed", "seed for synthesis and the split"),
    ("objective.name", "card | arm | mdlm | bd3lm"),
    ("objective.masking", "false trains CARD on clean inputs"),
    ("objective.block_size", "BD3LM block size"),
    ("objective.mdlm_eps", "lower bound of the MDLM noise time"),
    ("objective.loss_norm", "count | weight_sum | sequence"),
    ("corruption.strategy", "soft_tail | strict_tail | uniform | block:<K>"),
    ("corruption.tail_factor", "window-to-mask-count ratio (lambda)"),
    ("corruption.schedule", "noise schedule (linear)"),
    ("weighting.decay", "score decay p"),
    ("weighting.base", "smoothing base beta"),
    ("weighting.convention", "prefix | prefix_decayed | inclusive | inclusive_boosted"),
    ("train.steps", "optimizer steps"),
    ("train.batch_size", "sequences per step"),
    ("train.peak_lr", "peak learning rate"),
    ("train.warmup_steps", "linear warmup steps"),
    ("train.lr_schedule", "cosine | constant"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam epsilon"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.grad_clip", "global gradient-norm clip"),
    ("train.ema_decay", "EMA decay or none"),
    ("train.seed", "seed for init, batches and corruption"),
    ("train.eval_every", "validation interval in steps (0: end only)"),
    ("train.eval_sequences", "validation sequence cap (0: all)"),
    ("train.log_every", "training-loss logging interval"),
    ("train.epochs", "if non-zero, passes over the data instead of steps"),
    ("train.log_wall_time", "record wall time in metrics (breaks byte-identical logs)"),
    ("decode.block_size", "decoding block size K"),
    ("decode.threshold", "commit threshold tau"),
    ("decode.max_iters", "iteration limit T_max per block"),
    ("decode.max_new_tokens", "tokens to generate"),
    ("decode.temperature", "sampling temperature (0: greedy)"),
    ("decode.seed", "sampling seed"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| LabError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> LabError {
    LabError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() }
}

/// Wraps a parse error from one of the domain enums with the key it came from.
fn with_key<T>(key: &str, value: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| bad(key, value, e.to_string()))
}

impl LabConfig {
    /// Assigns one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        macro_rules! num {
            () => {
                parse_value(key, v)?
            };
        }
        match key {
            "model.n_layers" => self.model.n_layers = num!(),
            "model.n_heads" => self.model.n_heads = num!(),
            "model.d_model" => self.model.d_model = num!(),
            "model.d_ff" => self.model.d_ff = num!(),
            "model.max_len" => self.model.max_len = num!(),
            "data.source" => {
                self.data.source =
                    DataSource::parse(v).ok_or_else(|| bad(key, v, "expected cycle3, two_state or text"))?
            }
            "data.markov_param" => self.data.markov_param = num!(),
            "data.tokens" => self.data.tokens = num!(),
            "data.path" => self.data.path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.seq_len" => self.data.seq_len = num!(),
            "data.val_fraction" => self.data.val_fraction = num!(),
            "data.seed" => self.data.seed = num!(),
            "objective.name" => self.objective.objective = with_key(key, v, Objective::parse(v))?,
            "objective.masking" => self.objective.masking = num!(),
            "objective.block_size" => self.objective.block_size = num!(),
            "objective.mdlm_eps" => self.objective.mdlm_eps = num!(),
            "objective.loss_norm" => self.objective.loss_norm = with_key(key, v, LossNorm::parse(v))?,
            "corruption.strategy" => self.objective.corruption.strategy = with_key(key, v, MaskStrategy::parse(v))?,
            "corruption.tail_factor" => self.objective.corruption.tail_factor = num!(),
            "corruption.schedule" => {
                if v != "linear" {
                    return Err(bad(key, v, "only linear is supported"));
                }
                self.objective.corruption.schedule = NoiseSchedule::Linear;
            }
            "weighting.decay" => self.objective.weighting.decay = num!(),
            "weighting.base" => self.objective.weighting.base = num!(),
            "weighting.convention" => {
                self.objective.weighting.convention = with_key(key, v, ScoreConvention::parse(v))?
            }
            "train.steps" => self.train.steps = num!(),
            "train.batch_size" => self.train.batch_size = num!(),
            "train.peak_lr" => self.train.peak_lr = num!(),
            "train.warmup_steps" => self.train.warmup_steps = num!(),
            "train.lr_schedule" => self.train.lr_schedule = with_key(key, v, LrSchedule::parse(v))?,
            "train.beta1" => self.train.beta1 = num!(),
            "train.beta2" => self.train.beta2 = num!(),
            "train.adam_eps" => self.train.adam_eps = num!(),
            "train.weight_decay" => self.train.weight_decay = num!(),
            "train.grad_clip" => self.train.grad_clip = num!(),
            "train.ema_decay" => {
                self.train.ema_decay = if v == "none" { None } else { Some(num!()) };
            }
            "train.seed" => self.train.seed = num!(),
            "train.eval_every" => self.train.eval_every = num!(),
            "train.eval_sequences" => self.train.eval_sequences = num!(),
            "train.log_every" => self.train.log_every = num!(),
            "train.epochs" => self.train.epochs = num!(),
            "train.log_wall_time" => self.train.log_wall_time = num!(),
            "decode.block_size" => self.decode.block_size = num!(),
            "decode.threshold" => self.decode.threshold = num!(),
            "decode.max_iters" => self.decode.max_iters = num!(),
            "decode.max_new_tokens" => self.decode.max_new_tokens = num!(),
            "decode.temperature" => self.decode.temperature = num!(),
            "decode.seed" => self.decode.seed = num!(),
            _ => return Err(LabError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        let o = &self.objective;
        let t = &self.train;
        let g = &self.decode;
        let values: Vec<String> = vec![
            m.n_layers.to_string(),
            m.n_heads.to_string(),
            m.d_model.to_string(),
            m.d_ff.to_string(),
            m.max_len.to_string(),
            d.source.name().into(),
            d.markov_param.to_string(),
            d.tokens.to_string(),
            d.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            d.seq_len.to_string(),
            d.val_fraction.to_string(),
            d.seed.to_string(),
            o.objective.name().into(),
            o.masking.to_string(),
            o.block_size.to_string(),
            o.mdlm_eps.to_string(),
            o.loss_norm.name().into(),
            o.corruption.strategy.name(),
            o.corruption.tail_factor.to_string(),
            "linear".into(),
            o.weighting.decay.to_string(),
            o.weighting.base.to_string(),
            o.weighting.convention.name().into(),
            t.steps.to_string(),
            t.batch_size.to_string(),
            t.peak_lr.to_string(),
            t.warmup_steps.to_string(),
            t.lr_schedule.name().into(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.adam_eps.to_string(),
            t.weight_decay.to_string(),
            t.grad_clip.to_string(),
            t.ema_decay.map(|x| x.to_string()).unwrap_or_else(|| "none".into()),
            t.seed.to_string(),
            t.eval_every.to_string(),
            t.eval_sequences.to_string(),
            t.log_every.to_string(),
            t.epochs.to_string(),
            t.log_wall_time.to_string(),
            g.block_size.to_string(),
            g.threshold.to_string(),
            g.max_iters.to_string(),
            g.max_new_tokens.to_string(),
            g.temperature.to_string(),
            g.seed.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped;
    /// `state.*` keys are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| LabError::Format {
                what: "config",
                reason: format!("line {}: expected `key = value`, got `{raw}`", i + 1),
            })?;
            let k = k.trim();
            if k.starts_with(STATE_PREFIX) {
                continue;
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| LabError::Format {
                what: "override",
                reason: format!("expected key=value, got `{o}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Resolved configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Model shape with the vocabulary and attention pattern filled in.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size: self.data.vocab()?.size,
            attn_mode: self.objective.objective.attn_mode(self.objective.block_size),
            ..self.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section against the others.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        let d = &self.data;
        if d.seq_len < 2 {
            return Err(bad("data.seq_len", &d.seq_len.to_string(), "must be at least 2"));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(bad("data.val_fraction", &d.val_fraction.to_string(), "must lie in [0, 1)"));
        }
        if d.source != DataSource::Text && !(d.markov_param > 0.0 && d.markov_param < 1.0) {
            return Err(bad("data.markov_param", &d.markov_param.to_string(), "must lie in (0, 1)"));
        }
        self.objective.validate(d.seq_len, model.max_len)?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }
}

impl Display for LabConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text())
    }
}
