//! Checkpoint files.
//!
//! Layout: the magic `RFCK`, a version byte, a little-endian `u32` metadata
//! length, UTF-8 metadata, then every parameter as little-endian `f64` in
//! metadata order. The metadata has four sections:
//!
//! ```text
//! [config]
//! d_model=128
//! [params]
//! embed.weight<TAB>weight<TAB>48,128
//! [state]
//! step=390
//! [metrics]
//! test_acc=0.41
//! ```

use std::fs;
use std::path::Path;

use crate::config::{model_entries, model_from_entries};
use crate::error::{Error, Result};
use crate::model::{ViTConfig, Vit};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u8 = 1;
const HEADER: usize = 9;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub params: ParamStore,
    pub step: u64,
    pub metrics: Vec<(String, String)>,
}

fn corrupt(offset: usize, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset: offset as u64,
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::from("[config]\n");
        for (k, v) in model_entries(&self.config) {
            meta.push_str(&format!("{k}={v}\n"));
        }
        meta.push_str("[params]\n");
        for (_, p) in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            meta.push_str(&format!("{}\t{}\t{}\n", p.name, p.group, dims.join(",")));
        }
        meta.push_str(&format!("[state]\nstep={}\n[metrics]\n", self.step));
        for (k, v) in &self.metrics {
            meta.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::with_capacity(HEADER + meta.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt(0, "bad magic, expected RFCK"));
        }
        match bytes.get(4) {
            None => return Err(corrupt(4, "missing version byte")),
            Some(&VERSION) => {}
            Some(v) => return Err(corrupt(4, format!("unsupported version {v}"))),
        }
        let len_bytes: [u8; 4] = bytes
            .get(5..HEADER)
            .ok_or_else(|| corrupt(5, "truncated metadata length"))?
            .try_into()
            .expect("four bytes");
        let meta_len = u32::from_le_bytes(len_bytes) as usize;
        let meta = bytes.get(HEADER..HEADER + meta_len).ok_or_else(|| {
            corrupt(
                HEADER,
                format!("metadata declares {meta_len} bytes, file ends first"),
            )
        })?;
        let meta = std::str::from_utf8(meta)
            .map_err(|e| corrupt(HEADER + e.valid_up_to(), "metadata is not UTF-8"))?;

        let mut section = "";
        let mut config = Vec::new();
        let mut specs = Vec::new();
        let mut step = None;
        let mut metrics = Vec::new();
        for line in meta.lines() {
            if line.starts_with('[') {
                section = line;
                continue;
            }
            let bad = |what: &str| corrupt(HEADER, format!("{what}: {line:?}"));
            match section {
                "[config]" | "[state]" | "[metrics]" => {
                    let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed entry"))?;
                    match section {
                        "[config]" => config.push((k, v)),
                        "[state]" if k == "step" => {
                            step = Some(v.parse::<u64>().map_err(|_| bad("bad step"))?)
                        }
                        "[state]" => return Err(bad("unknown state key")),
                        _ => metrics.push((k.to_string(), v.to_string())),
                    }
                }
                "[params]" => {
                    let mut parts = line.split('\t');
                    let (Some(name), Some(group), Some(dims), None) =
                        (parts.next(), parts.next(), parts.next(), parts.next())
                    else {
                        return Err(bad("malformed parameter line"));
                    };
                    let group: ParamGroup = group.parse().map_err(|_| bad("unknown group"))?;
                    let dims = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("bad dimensions"))?;
                    specs.push((name, group, dims));
                }
                _ => return Err(bad("content outside a section")),
            }
        }
        let config = model_from_entries(config).map_err(|e| corrupt(HEADER, e.to_string()))?;
        let step = step.ok_or_else(|| corrupt(HEADER, "missing step"))?;

        let payload_start = HEADER + meta_len;
        let payload = &bytes[payload_start..];
        let want: usize = specs
            .iter()
            .map(|(_, _, d)| d.iter().product::<usize>() * 8)
            .sum();
        if payload.len() != want {
            return Err(corrupt(
                payload_start + payload.len().min(want),
                format!("payload is {} bytes, parameters need {want}", payload.len()),
            ));
        }
        let mut params = ParamStore::new();
        let mut at = 0;
        for (name, group, dims) in specs {
            let n: usize = dims.iter().product();
            let data = payload[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let value =
                Tensor::new(dims, data).map_err(|e| corrupt(payload_start + at, e.to_string()))?;
            params
                .add(name, group, value)
                .map_err(|e| corrupt(HEADER, e.to_string()))?;
            at += 8 * n;
        }
        Ok(Checkpoint {
            config,
            params,
            step,
            metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn metric(&self, key: &str) -> Option<&str> {
        self.metrics
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Rebuilds the model, checking that the stored parameters are exactly
    /// the ones the configuration defines.
    pub fn model(&self) -> Result<(Vit, ParamStore)> {
        let (vit, mut store) = Vit::new(self.config, 0)?;
        if store.len() != self.params.len() {
            return Err(corrupt(
                HEADER,
                format!(
                    "config defines {} parameters, file has {}",
                    store.len(),
                    self.params.len()
                ),
            ));
        }
        for (_, p) in self.params.iter() {
            let id = store
                .find(&p.name)
                .ok_or_else(|| corrupt(HEADER, format!("unexpected parameter {}", p.name)))?;
            if store.get(id).group != p.group {
                return Err(corrupt(HEADER, format!("{} has group {}", p.name, p.group)));
            }
            store
                .set_value(id, p.value.clone())
                .map_err(|e| corrupt(HEADER, e.to_string()))?;
        }
        Ok((vit, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LfConfig;
    use crate::model::InputSpec;

    fn sample() -> Checkpoint {
        let cfg = ViTConfig {
            input: InputSpec::Image {
                size: 8,
                patch: 4,
                channels: 3,
            },
            d_model: 8,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            classes: 10,
            lf: Some(LfConfig::default()),
            ..ViTConfig::default()
        };
        let (_, params) = Vit::new(cfg, 4).unwrap();
        Checkpoint {
            config: cfg,
            params,
            step: 12,
            metrics: vec![("test_acc".into(), "0.5".into())],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.step, 12);
        assert_eq!(back.metric("test_acc"), Some("0.5"));
        let (_, store) = back.model().unwrap();
        for (id, p) in ck.params.iter() {
            assert_eq!(store.value(id).data(), p.value.data());
        }
    }

    #[test]
    fn metadata_lists_each_parameter_once() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let meta_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let meta = std::str::from_utf8(&bytes[9..9 + meta_len]).unwrap();
        let listed: Vec<&str> = meta
            .split("[params]\n")
            .nth(1)
            .unwrap()
            .split("[state]")
            .next()
            .unwrap()
            .lines()
            .map(|l| l.split('\t').next().unwrap())
            .collect();
        let names: Vec<&str> = ck.params.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(listed, names);
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint { offset: 4, .. })
        ));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(short),
            Err(Error::Checkpoint { .. })
        ));
    }
}
