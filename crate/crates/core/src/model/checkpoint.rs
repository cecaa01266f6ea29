//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "FVKCKPT1"
//! header_len   u32 LE
//! header       header_len bytes of UTF-8, one `key=value` per line
//! data         f32 LE, every parameter in manifest order
//! ```
//!
//! Header keys, in the order they are written:
//! `model.in_channels`, `model.out_channels`, `model.depth`,
//! `model.base_channels`, `model.dropout_p`, `model.dropout_sites`,
//! `train.step`, `input.height`, `input.width`, then one
//! `param=<name> <d0>,<d1>,...` line per tensor.

use std::fs;
use std::path::Path;

use super::config::{DropoutSites, UNetConfig};
use super::params::{manifest, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FVKCKPT1";
const MAGIC_FAMILY: &[u8; 7] = b"FVKCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub params: ParameterSet<f32>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// (height, width) the network was trained at.
    pub input_size: (usize, usize),
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_against(&self.config)?;
        let c = &self.config;
        let mut header = String::new();
        let mut kv = |k: &str, v: String| {
            header.push_str(k);
            header.push('=');
            header.push_str(&v);
            header.push('\n');
        };
        kv("model.in_channels", c.in_channels.to_string());
        kv("model.out_channels", c.out_channels.to_string());
        kv("model.depth", c.depth.to_string());
        kv("model.base_channels", c.base_channels.to_string());
        kv("model.dropout_p", c.dropout_p.to_string());
        kv("model.dropout_sites", c.dropout_sites.as_str().to_string());
        kv("train.step", self.step.to_string());
        kv("input.height", self.input_size.0.to_string());
        kv("input.width", self.input_size.1.to_string());
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
            kv("param", format!("{name} {}", dims.join(",")));
        }
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Parameter("checkpoint header exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Corrupt(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(if &bytes[..7] == MAGIC_FAMILY {
                Error::Format(format!("unsupported checkpoint version {:?}", bytes[7] as char))
            } else {
                Error::Format("not a checkpoint (bad magic)".into())
            });
        }
        let len_bytes: [u8; 4] = bytes
            .get(8..12)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Corrupt("missing header length".into()))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))?;
        let header = std::str::from_utf8(header)
            .map_err(|_| Error::Corrupt("header is not UTF-8".into()))?;
        let parsed = Header::parse(header)?;

        let specs = manifest(&parsed.config);
        if specs.len() != parsed.params.len() {
            return Err(Error::Corrupt(format!(
                "header lists {} parameters, configuration requires {}",
                parsed.params.len(),
                specs.len()
            )));
        }
        for (spec, (name, dims)) in specs.iter().zip(&parsed.params) {
            if spec.name != *name {
                return Err(Error::Corrupt(format!(
                    "expected parameter {} but header lists {name}",
                    spec.name
                )));
            }
            if spec.dims != *dims {
                return Err(Error::Corrupt(format!(
                    "parameter {name} has header shape {dims:?}, configuration requires {:?}",
                    spec.dims
                )));
            }
        }

        let data = &bytes[12 + header_len..];
        let total: usize = specs.iter().map(|s| s.dims.iter().product::<usize>()).sum();
        if data.len() != 4 * total {
            return Err(Error::Corrupt(format!(
                "parameter data is {} bytes, manifest requires {}",
                data.len(),
                4 * total
            )));
        }
        let mut floats = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let entries = parsed
            .params
            .into_iter()
            .map(|(name, dims)| {
                let n = dims.iter().product();
                let t = Tensor::new(&dims, floats.by_ref().take(n).collect())?;
                Ok((name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            config: parsed.config,
            params: ParameterSet::from_entries(entries)?,
            step: parsed.step,
            input_size: parsed.input_size,
        })
    }
}

struct Header {
    config: UNetConfig,
    step: u64,
    input_size: (usize, usize),
    params: Vec<(String, Vec<usize>)>,
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Corrupt(format!("bad header field {what}"));
        let mut config = UNetConfig::default();
        let mut step = None;
        let (mut height, mut width) = (None, None);
        let mut params = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("malformed header line {line:?}")))?;
            if key != "param" && !seen.insert(key) {
                return Err(Error::Corrupt(format!("duplicate header key {key}")));
            }
            let num = || value.parse::<usize>().map_err(|_| bad(key));
            match key {
                "model.in_channels" => config.in_channels = num()?,
                "model.out_channels" => config.out_channels = num()?,
                "model.depth" => config.depth = num()?,
                "model.base_channels" => config.base_channels = num()?,
                "model.dropout_p" => config.dropout_p = value.parse().map_err(|_| bad(key))?,
                "model.dropout_sites" => {
                    config.dropout_sites = DropoutSites::parse(value).map_err(|_| bad(key))?
                }
                "train.step" => step = Some(value.parse::<u64>().map_err(|_| bad(key))?),
                "input.height" => height = Some(num()?),
                "input.width" => width = Some(num()?),
                "param" => {
                    let (name, dims) = value.split_once(' ').ok_or_else(|| bad(value))?;
                    let dims = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Corrupt(format!("parameter {name} has malformed shape {dims:?}")))?;
                    params.push((name.to_string(), dims));
                }
                other => return Err(Error::Corrupt(format!("unknown header key {other}"))),
            }
        }
        for key in [
            "model.in_channels",
            "model.out_channels",
            "model.depth",
            "model.base_channels",
            "model.dropout_p",
            "model.dropout_sites",
        ] {
            if !seen.contains(key) {
                return Err(Error::Corrupt(format!("header is missing {key}")));
            }
        }
        config
            .validate()
            .map_err(|e| Error::Corrupt(format!("header configuration invalid: {e}")))?;
        Ok(Header {
            config,
            step: step.ok_or_else(|| Error::Corrupt("header is missing train.step".into()))?,
            input_size: (
                height.ok_or_else(|| Error::Corrupt("header is missing input.height".into()))?,
                width.ok_or_else(|| Error::Corrupt("header is missing input.width".into()))?,
            ),
            params,
        })
    }
}

/// Writes the checkpoint in one piece; on error nothing is left half written
/// in place of an existing file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
