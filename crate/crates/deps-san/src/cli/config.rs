//! Flat key=value config files.
//!
//! One assignment per line, `#` starts a comment, blank lines are skipped.
//! Keys mirror the encoder, training, and sparsing config fields; unknown
//! keys are errors so typos cannot silently fall back to defaults. Values
//! parsed here override defaults, and command-line flags override both.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::encoder::{DsMode, MAX_LAYERS};
use crate::scaling::SparsingMode;
use crate::toytask::TrainConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for {key}: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
}

/// Optional settings gathered from a config file or flags; `apply` writes
/// the present ones onto a TrainConfig (whose `model` holds the encoder
/// settings).
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Overrides {
    pub n_layers: Option<usize>,
    pub deps_layers: Option<BTreeSet<usize>>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub sigma: Option<f64>,
    pub dropout: Option<f64>,
    pub max_len: Option<usize>,
    pub ds_mode: Option<DsMode>,
    pub sparsing: Option<SparsingMode>,
    pub k: Option<u32>,
    pub q: Option<f64>,
    pub sparsing_seed: Option<u64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub min_seq_len: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub vocab: Option<usize>,
    pub seed: Option<u64>,
}

/// Layer sets accept comma-separated indices and inclusive ranges:
/// "1,2,3", "1-3", "1,3-5", or "none" for the empty set.
fn parse_layer_set(value: &str) -> Result<BTreeSet<usize>, String> {
    let trimmed = value.trim();
    if trimmed.is_empty() || trimmed == "none" {
        return Ok(BTreeSet::new());
    }
    let mut layers = BTreeSet::new();
    for part in trimmed.split(',') {
        let part = part.trim();
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: usize = lo
            .parse()
            .map_err(|_| format!("{part:?} is not a layer index or range"))?;
        let hi: usize = hi
            .parse()
            .map_err(|_| format!("{part:?} is not a layer index or range"))?;
        if lo == 0 || hi < lo {
            return Err(format!("{part:?} is not a valid 1-based range"));
        }
        // bound before materializing the range: no config here can have
        // more layers than this, and huge ranges must not allocate
        if hi > MAX_LAYERS {
            return Err(format!("layer index {hi} exceeds the limit of {MAX_LAYERS}"));
        }
        layers.extend(lo..=hi);
    }
    Ok(layers)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl Overrides {
    pub fn parse(text: &str) -> Result<Overrides, ConfigError> {
        let mut out = Overrides::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: content.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |reason: String| ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason,
            };
            match key {
                "n_layers" => out.n_layers = Some(parse_as(key, value, line)?),
                "deps_layers" => {
                    out.deps_layers = Some(parse_layer_set(value).map_err(bad)?);
                }
                "n_heads" => out.n_heads = Some(parse_as(key, value, line)?),
                "d_model" => out.d_model = Some(parse_as(key, value, line)?),
                "d_ff" => out.d_ff = Some(parse_as(key, value, line)?),
                "sigma" => out.sigma = Some(parse_as(key, value, line)?),
                "dropout" => out.dropout = Some(parse_as(key, value, line)?),
                "max_len" => out.max_len = Some(parse_as(key, value, line)?),
                "ds_mode" => {
                    out.ds_mode = Some(match value {
                        "gauss" => DsMode::Gauss,
                        "ones" => DsMode::Ones,
                        other => return Err(bad(format!("{other:?} is not gauss|ones"))),
                    });
                }
                "sparsing" => {
                    out.sparsing = Some(match value {
                        "none" => SparsingMode::None,
                        "rs" => SparsingMode::Rs,
                        "wink" => SparsingMode::Wink,
                        other => return Err(bad(format!("{other:?} is not none|rs|wink"))),
                    });
                }
                "k" => out.k = Some(parse_as(key, value, line)?),
                "q" => out.q = Some(parse_as(key, value, line)?),
                "sparsing_seed" => out.sparsing_seed = Some(parse_as(key, value, line)?),
                "steps" => out.steps = Some(parse_as(key, value, line)?),
                "batch_size" => out.batch_size = Some(parse_as(key, value, line)?),
                "lr" => out.lr = Some(parse_as(key, value, line)?),
                "min_seq_len" => out.min_seq_len = Some(parse_as(key, value, line)?),
                "max_seq_len" => out.max_seq_len = Some(parse_as(key, value, line)?),
                "vocab" => out.vocab = Some(parse_as(key, value, line)?),
                "seed" => out.seed = Some(parse_as(key, value, line)?),
                other => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: other.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        let m = &mut cfg.model;
        if let Some(v) = self.n_layers {
            m.n_layers = v;
        }
        if let Some(v) = &self.deps_layers {
            m.deps_layers = v.clone();
        }
        if let Some(v) = self.n_heads {
            m.n_heads = v;
        }
        if let Some(v) = self.d_model {
            m.d_model = v;
        }
        if let Some(v) = self.d_ff {
            m.d_ff = v;
        }
        if let Some(v) = self.sigma {
            m.sigma = v;
        }
        if let Some(v) = self.dropout {
            m.dropout = v;
        }
        if let Some(v) = self.max_len {
            m.max_len = v;
        }
        if let Some(v) = self.ds_mode {
            m.ds_mode = v;
        }
        if let Some(v) = self.sparsing {
            m.sparsing.mode = v;
        }
        if let Some(v) = self.k {
            m.sparsing.k = v;
        }
        if let Some(v) = self.q {
            m.sparsing.q = v;
        }
        if let Some(v) = self.sparsing_seed {
            m.sparsing.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.min_seq_len {
            cfg.min_seq_len = v;
        }
        if let Some(v) = self.max_seq_len {
            cfg.max_seq_len = v;
        }
        if let Some(v) = self.vocab {
            cfg.vocab = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}
