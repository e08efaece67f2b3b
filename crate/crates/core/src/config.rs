//! `key=value` configuration text, shared by config files and checkpoint
//! metadata. Floats are written in shortest round-trip form, so a config
//! survives a write/read cycle exactly.

use crate::attention::{LfConfig, MetricMode, SigmaMode};
use crate::error::{Error, Result};
use crate::geometry::{ScaleMode, ScaleSchedule};
use crate::model::{InputSpec, ViTConfig};
use crate::training::{LrSchedule, TrainConfig};

/// One `key=value` line with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into entries, skipping blank lines and `#` comments.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1))
        })?;
        out.push(Entry {
            line: i + 1,
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn image_fields(cfg: &ViTConfig) -> (usize, usize, usize) {
    match cfg.input {
        InputSpec::Image {
            size,
            patch,
            channels,
        } => (size, patch, channels),
        InputSpec::Tokens { .. } => (32, 4, 3),
    }
}

fn token_fields(cfg: &ViTConfig) -> (usize, usize) {
    match cfg.input {
        InputSpec::Tokens { len, vocab } => (len, vocab),
        InputSpec::Image { .. } => (16, 4),
    }
}

/// Applies one model key. Returns `Ok(false)` for keys it does not own.
pub fn set_model_key(cfg: &mut ViTConfig, key: &str, value: &str) -> Result<bool> {
    let lf = || cfg.lf.unwrap_or_default();
    match key {
        "input" => {
            cfg.input = match value {
                "image" => {
                    let (size, patch, channels) = image_fields(cfg);
                    InputSpec::Image {
                        size,
                        patch,
                        channels,
                    }
                }
                "tokens" => {
                    let (len, vocab) = token_fields(cfg);
                    InputSpec::Tokens { len, vocab }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "input: expected image or tokens, got {value:?}"
                    )))
                }
            }
        }
        "image_size" | "patch_size" | "channels" => {
            let (mut size, mut patch, mut channels) = image_fields(cfg);
            let v = parse(key, value)?;
            match key {
                "image_size" => size = v,
                "patch_size" => patch = v,
                _ => channels = v,
            }
            cfg.input = InputSpec::Image {
                size,
                patch,
                channels,
            };
        }
        "seq_len" | "vocab" => {
            let (mut len, mut vocab) = token_fields(cfg);
            let v = parse(key, value)?;
            if key == "seq_len" {
                len = v;
            } else {
                vocab = v;
            }
            cfg.input = InputSpec::Tokens { len, vocab };
        }
        "d_model" => cfg.d_model = parse(key, value)?,
        "heads" => cfg.heads = parse(key, value)?,
        "layers" => cfg.layers = parse(key, value)?,
        "mlp_ratio" => cfg.mlp_ratio = parse(key, value)?,
        "classes" => cfg.classes = parse(key, value)?,
        "mechanism" => cfg.position.mechanism = value.parse()?,
        "scale_mode" => {
            cfg.position.scale_mode = match value {
                "bounded" => ScaleMode::bounded(),
                "free" => ScaleMode::Free,
                _ => {
                    return Err(Error::Config(format!(
                        "scale_mode: expected bounded or free, got {value:?}"
                    )))
                }
            }
        }
        "alpha" => {
            let alpha: f64 = parse(key, value)?;
            if alpha.is_nan() || alpha <= 0.0 {
                return Err(Error::Config(format!(
                    "alpha must be positive, got {value}"
                )));
            }
            cfg.position.scale_mode = ScaleMode::Bounded { alpha };
        }
        "scale_schedule" => {
            cfg.position.schedule = match value {
                "linear" => ScaleSchedule::Linear,
                "log" => ScaleSchedule::Log {
                    base: match cfg.position.schedule {
                        ScaleSchedule::Log { base } => base,
                        ScaleSchedule::Linear => 2.0,
                    },
                },
                _ => {
                    return Err(Error::Config(format!(
                        "scale_schedule: expected linear or log, got {value:?}"
                    )))
                }
            }
        }
        "log_base" => {
            let base: f64 = parse(key, value)?;
            if base.is_nan() || base <= 1.0 {
                return Err(Error::Config(format!(
                    "log_base must exceed 1, got {value}"
                )));
            }
            cfg.position.schedule = ScaleSchedule::Log { base };
        }
        "learn_theta" => cfg.position.learn_theta = parse_bool(key, value)?,
        "lf" => cfg.lf = parse_bool(key, value)?.then(lf),
        "lf_sigma_mode" => {
            let sigma_mode = match value {
                "shared" => SigmaMode::Shared,
                "per-position" => SigmaMode::PerPosition,
                _ => {
                    return Err(Error::Config(format!(
                        "lf_sigma_mode: expected shared or per-position, got {value:?}"
                    )))
                }
            };
            cfg.lf = Some(LfConfig { sigma_mode, ..lf() });
        }
        "lf_metric" => {
            let metric = match value {
                "identity" => MetricMode::Identity,
                "learned" => MetricMode::Learned,
                _ => {
                    return Err(Error::Config(format!(
                        "lf_metric: expected identity or learned, got {value:?}"
                    )))
                }
            };
            cfg.lf = Some(LfConfig { metric, ..lf() });
        }
        "lf_sigma0" => {
            let sigma0: f64 = parse(key, value)?;
            if sigma0.is_nan() || sigma0 <= 0.0 {
                return Err(Error::Config(format!(
                    "lf_sigma0 must be positive, got {value}"
                )));
            }
            cfg.lf = Some(LfConfig { sigma0, ..lf() });
        }
        "lf_renormalize" => {
            let renormalize = parse_bool(key, value)?;
            cfg.lf = Some(LfConfig {
                renormalize,
                ..lf()
            });
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Entries that rebuild `cfg` through [`set_model_key`].
pub fn model_entries(cfg: &ViTConfig) -> Vec<(String, String)> {
    let mut out: Vec<(&str, String)> = Vec::new();
    match cfg.input {
        InputSpec::Image {
            size,
            patch,
            channels,
        } => {
            out.push(("input", "image".into()));
            out.push(("image_size", size.to_string()));
            out.push(("patch_size", patch.to_string()));
            out.push(("channels", channels.to_string()));
        }
        InputSpec::Tokens { len, vocab } => {
            out.push(("input", "tokens".into()));
            out.push(("seq_len", len.to_string()));
            out.push(("vocab", vocab.to_string()));
        }
    }
    out.push(("d_model", cfg.d_model.to_string()));
    out.push(("heads", cfg.heads.to_string()));
    out.push(("layers", cfg.layers.to_string()));
    out.push(("mlp_ratio", cfg.mlp_ratio.to_string()));
    out.push(("classes", cfg.classes.to_string()));
    out.push(("mechanism", cfg.position.mechanism.to_string()));
    match cfg.position.scale_mode {
        ScaleMode::Bounded { alpha } => {
            out.push(("scale_mode", "bounded".into()));
            out.push(("alpha", format!("{alpha:?}")));
        }
        ScaleMode::Free => out.push(("scale_mode", "free".into())),
    }
    match cfg.position.schedule {
        ScaleSchedule::Linear => out.push(("scale_schedule", "linear".into())),
        ScaleSchedule::Log { base } => {
            out.push(("scale_schedule", "log".into()));
            out.push(("log_base", format!("{base:?}")));
        }
    }
    out.push(("learn_theta", cfg.position.learn_theta.to_string()));
    out.push(("lf", cfg.lf.is_some().to_string()));
    if let Some(lf) = cfg.lf {
        let sigma = match lf.sigma_mode {
            SigmaMode::Shared => "shared",
            SigmaMode::PerPosition => "per-position",
        };
        let metric = match lf.metric {
            MetricMode::Identity => "identity",
            MetricMode::Learned => "learned",
        };
        out.push(("lf_sigma_mode", sigma.into()));
        out.push(("lf_metric", metric.into()));
        out.push(("lf_sigma0", format!("{:?}", lf.sigma0)));
        out.push(("lf_renormalize", lf.renormalize.to_string()));
    }
    out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Applies one training key. Returns `Ok(false)` for keys it does not own.
pub fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch" => cfg.batch = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "lr" => cfg.optimizer.lr = parse(key, value)?,
        "beta1" => cfg.optimizer.beta1 = parse(key, value)?,
        "beta2" => cfg.optimizer.beta2 = parse(key, value)?,
        "eps" => cfg.optimizer.eps = parse(key, value)?,
        "weight_decay" => cfg.optimizer.weight_decay = parse(key, value)?,
        "lr_schedule" => {
            cfg.schedule = match value {
                "constant" => LrSchedule::Constant,
                "cosine" => LrSchedule::Cosine {
                    warmup_epochs: match cfg.schedule {
                        LrSchedule::Cosine { warmup_epochs } => warmup_epochs,
                        LrSchedule::Constant => 5,
                    },
                },
                _ => {
                    return Err(Error::Config(format!(
                        "lr_schedule: expected constant or cosine, got {value:?}"
                    )))
                }
            }
        }
        "warmup_epochs" => {
            cfg.schedule = LrSchedule::Cosine {
                warmup_epochs: parse(key, value)?,
            }
        }
        "subset" => cfg.subset = Some(parse(key, value)?),
        "augment" => cfg.augment = parse_bool(key, value)?,
        "record_wall_time" => cfg.record_wall_time = parse_bool(key, value)?,
        "max_steps" => cfg.max_steps = Some(parse(key, value)?),
        "eval_batch" => cfg.eval_batch = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Rebuilds a model config from entries, rejecting unknown keys.
pub fn model_from_entries<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<ViTConfig> {
    let mut cfg = ViTConfig::default();
    for (k, v) in entries {
        if !set_model_key(&mut cfg, k, v)? {
            return Err(Error::Config(format!("unknown model key {k:?}")));
        }
    }
    Ok(cfg)
}

/// Applies a config file over `model` and `train`. Errors name the
/// offending line.
pub fn apply_config(text: &str, model: &mut ViTConfig, train: &mut TrainConfig) -> Result<()> {
    for e in parse_entries(text)? {
        let at = |err: Error| {
            Error::Config(format!(
                "line {}: {}",
                e.line,
                err.to_string()
                    .trim_start_matches("invalid configuration: ")
            ))
        };
        let known = set_model_key(model, &e.key, &e.value).map_err(at)?
            || set_train_key(train, &e.key, &e.value).map_err(at)?;
        if !known {
            return Err(Error::Config(format!(
                "line {}: unknown key {:?}",
                e.line, e.key
            )));
        }
    }
    Ok(())
}
