//! Flat `key = value` run configuration with documented defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::pipeline::spans::DecodeMode;
use crate::pipeline::train::TrainConfig;
use crate::reduced_bias::ResidualMode;

/// Where the embedding table comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmbeddingSource {
    #[default]
    Scratch,
    File,
}

impl FromStr for EmbeddingSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(EmbeddingSource::Scratch),
            "file" => Ok(EmbeddingSource::File),
            _ => Err(Error::Config(format!("embeddings must be scratch or file, got {s:?}"))),
        }
    }
}

impl fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingSource::Scratch => "scratch",
            EmbeddingSource::File => "file",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Use the test split for validation (for corpora without one).
    pub valid_from_test: bool,
    pub embeddings: EmbeddingSource,
    pub embedding_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Every key with its default and a one-line description, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("d_model", "64", "embedding and encoder width"),
    ("z_dim", "64", "shared representation width (must equal d_model)"),
    ("v_dim", "128", "value width"),
    ("n_ema_head", "64", "EMA heads (must divide d_model)"),
    ("chunk_size", "8", "local-stage chunk width; 0 disables chunking"),
    ("h_lstm", "64", "BiLSTM hidden size per direction"),
    ("attention", "hema", "encoder block: hema or naive"),
    ("attn_fn", "reduced_laplace", "softmax, laplace or reduced_laplace"),
    ("silu_variant", "derivative", "output activation: derivative (σ + x·σ·(1−σ)) or standard (x·σ)"),
    ("daleth", "auto", "score scale; auto means sqrt(z_dim)"),
    ("rel_bias_window", "16", "relative position bias window"),
    ("batch_norm_fidelity", "false", "normalize over positions instead of features"),
    ("reduced_bias_mode", "dynamic", "residual gating: off, static or dynamic"),
    ("rb_static_alpha", "1", "branch weight in static mode"),
    ("rb_static_beta", "1", "skip weight in static mode"),
    ("gate_momentum", "0.9", "gradient cache momentum in dynamic mode"),
    ("head", "crf", "output head: crf or token"),
    ("strict_bio", "false", "forbid invalid BIO transitions in the CRF"),
    ("lr", "0.001", "Adam learning rate"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator epsilon"),
    ("batch_size", "16", "sentences per update"),
    ("seed", "42", "seed for initialization and shuffling"),
    ("max_epochs", "100", "epoch budget"),
    ("patience", "10", "epochs without validation F1 gain before stopping"),
    ("decode_mode", "lenient", "span decoding for metrics: strict or lenient"),
    ("train_path", "", "training corpus (required for training)"),
    ("valid_path", "", "validation corpus"),
    ("test_path", "", "test corpus"),
    ("valid_from_test", "false", "use the test corpus as the validation split"),
    ("embeddings", "scratch", "scratch or file"),
    ("embedding_path", "", "word2vec-style text vectors (required when embeddings=file)"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Shortest text that parses back to the same value.
fn show_f64(x: f64) -> String {
    if x != 0.0 && !(1e-4..1e16).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Assign one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "d_model" => e.d_model = parse(key, v)?,
            "z_dim" => e.z_dim = parse(key, v)?,
            "v_dim" => e.v_dim = parse(key, v)?,
            "n_ema_head" => e.n_ema_head = parse(key, v)?,
            "chunk_size" => e.chunk_size = parse(key, v)?,
            "h_lstm" => self.model.h_lstm = parse(key, v)?,
            "attention" => e.attention = parse_enum(key, v)?,
            "attn_fn" => e.attn_fn = parse_enum(key, v)?,
            "silu_variant" => e.silu = parse_enum(key, v)?,
            "daleth" => e.daleth = if v == "auto" { None } else { Some(parse(key, v)?) },
            "rel_bias_window" => e.rel_bias_window = parse(key, v)?,
            "batch_norm_fidelity" => e.batch_norm_fidelity = parse_bool(key, v)?,
            "reduced_bias_mode" => e.residual = parse_enum(key, v)?,
            "rb_static_alpha" => e.static_alpha = parse(key, v)?,
            "rb_static_beta" => e.static_beta = parse(key, v)?,
            "gate_momentum" => t.gate_momentum = parse(key, v)?,
            "head" => self.model.head = parse_enum(key, v)?,
            "strict_bio" => self.model.strict_bio = parse_bool(key, v)?,
            "lr" => t.adam.lr = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "decode_mode" => t.decode_mode = parse_enum(key, v)?,
            "train_path" => d.train_path = opt_path(v),
            "valid_path" => d.valid_path = opt_path(v),
            "test_path" => d.test_path = opt_path(v),
            "valid_from_test" => d.valid_from_test = parse_bool(key, v)?,
            "embeddings" => d.embeddings = parse_enum(key, v)?,
            "embedding_path" => d.embedding_path = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of one key, formatted so that `set` reads it back.
    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.model.encoder;
        let t = &self.train;
        let d = &self.data;
        Some(match key {
            "d_model" => e.d_model.to_string(),
            "z_dim" => e.z_dim.to_string(),
            "v_dim" => e.v_dim.to_string(),
            "n_ema_head" => e.n_ema_head.to_string(),
            "chunk_size" => e.chunk_size.to_string(),
            "h_lstm" => self.model.h_lstm.to_string(),
            "attention" => e.attention.to_string(),
            "attn_fn" => e.attn_fn.to_string(),
            "silu_variant" => e.silu.to_string(),
            "daleth" => e.daleth.map_or("auto".into(), show_f64),
            "rel_bias_window" => e.rel_bias_window.to_string(),
            "batch_norm_fidelity" => e.batch_norm_fidelity.to_string(),
            "reduced_bias_mode" => match e.residual {
                ResidualMode::Classic => "off".into(),
                m => m.to_string(),
            },
            "rb_static_alpha" => show_f64(e.static_alpha),
            "rb_static_beta" => show_f64(e.static_beta),
            "gate_momentum" => show_f64(t.gate_momentum),
            "head" => self.model.head.to_string(),
            "strict_bio" => self.model.strict_bio.to_string(),
            "lr" => show_f64(t.adam.lr),
            "beta1" => show_f64(t.adam.beta1),
            "beta2" => show_f64(t.adam.beta2),
            "adam_eps" => show_f64(t.adam.eps),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "decode_mode" => match t.decode_mode {
                DecodeMode::Strict => "strict".into(),
                DecodeMode::Lenient => "lenient".into(),
            },
            "train_path" => show_path(&d.train_path),
            "valid_path" => show_path(&d.valid_path),
            "test_path" => show_path(&d.test_path),
            "valid_from_test" => d.valid_from_test.to_string(),
            "embeddings" => d.embeddings.to_string(),
            "embedding_path" => show_path(&d.embedding_path),
            _ => return None,
        })
    }

    /// Parse a config file body; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: None,
                line: i + 1,
                msg: format!("expected key = value, found {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                source_name: None,
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text).map_err(|e| e.with_source_name(&path.display().to_string()))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Make relative corpus and embedding paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.train_path, &mut d.valid_path, &mut d.test_path, &mut d.embedding_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if self.model.h_lstm == 0 {
            return Err(Error::Config("h_lstm: must be positive".into()));
        }
        self.train.validate()?;
        if self.data.embeddings == EmbeddingSource::File && self.data.embedding_path.is_none() {
            return Err(Error::Config("embedding_path: required when embeddings = file".into()));
        }
        Ok(())
    }

    /// The effective configuration, every key included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    /// `(key, self, other)` for every key whose values differ.
    pub fn diff(&self, other: &RunConfig) -> Vec<(String, String, String)> {
        KEYS.iter()
            .filter_map(|(k, _, _)| {
                let (a, b) = (self.get(k)?, other.get(k)?);
                (a != b).then(|| (k.to_string(), a, b))
            })
            .collect()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
            seed: 42,
            max_epochs: 100,
            patience: 10,
            gate_momentum: 0.9,
            decode_mode: DecodeMode::Lenient,
        }
    }
}
