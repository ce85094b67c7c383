//! Parameter checkpoints.
//!
//! Layout: a UTF-8 header of `key=value` lines starting with the format tag
//! and ending with `end`, followed by a little-endian `u64` parameter count
//! and that many little-endian `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, LossKind, ModelSpec, ParamVector};

pub const FORMAT_TAG: &str = "fms-ckpt/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamVector,
    /// Free-form metadata (round, seed, config hash, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        if params.dim() != spec.param_count() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model needs {}",
                params.dim(),
                spec.param_count()
            )));
        }
        Ok(Self {
            spec,
            params,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(FORMAT_TAG);
        out.push('\n');
        out.push_str(&format!("input_dim={}\n", self.spec.input_dim()));
        let dims: Vec<String> = self.spec.layer_dims().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("layer_dims={}\n", dims.join(",")));
        out.push_str(&format!("activation={}\n", self.spec.activation().name()));
        out.push_str(&format!("loss={}\n", self.spec.loss().name()));
        out.push_str(&format!("param_count={}\n", self.params.dim()));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k}={}\n", v.replace('\n', " ")));
        }
        out.push_str("end\n");
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&(self.params.dim() as u64).to_le_bytes());
        for v in self.params.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let version = |m: String| Error::Version(m);
        let mut pos = 0;
        let mut header = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| version("truncated checkpoint header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| version("header is not UTF-8".into()))?;
            pos += nl + 1;
            if header.is_empty() && line != FORMAT_TAG {
                return Err(version(format!(
                    "unsupported checkpoint format {line:?}, expected {FORMAT_TAG}"
                )));
            }
            if line == "end" {
                break;
            }
            header.push(line.to_string());
        }

        let mut fields = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in &header[1..] {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| version(format!("malformed header line {line:?}")))?;
            match k.strip_prefix("meta.") {
                Some(mk) => {
                    meta.insert(mk.to_string(), v.to_string());
                }
                None => {
                    fields.insert(k.to_string(), v.to_string());
                }
            }
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| version(format!("header is missing {k}")));
        let parse_usize = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| version(format!("header field {k} is not an integer")))
        };
        let input_dim = parse_usize("input_dim")?;
        let layer_dims = field("layer_dims")?
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| version("header field layer_dims is malformed".into()))?;
        let activation = Activation::parse(field("activation")?)
            .ok_or_else(|| version("unknown activation in checkpoint".into()))?;
        let loss = LossKind::parse(field("loss")?).ok_or_else(|| version("unknown loss in checkpoint".into()))?;
        let param_count = parse_usize("param_count")?;
        let spec = ModelSpec::new(input_dim, layer_dims, activation, loss)
            .map_err(|e| version(format!("checkpoint describes an invalid model: {e}")))?;

        let count_bytes: [u8; 8] = bytes
            .get(pos..pos + 8)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| version("truncated checkpoint body".into()))?;
        let count = u64::from_le_bytes(count_bytes) as usize;
        pos += 8;
        if count != param_count || count != spec.param_count() {
            return Err(version(format!(
                "checkpoint stores {count} parameters, header says {param_count}, model needs {}",
                spec.param_count()
            )));
        }
        let body = &bytes[pos..];
        if body.len() != count * 8 {
            return Err(version("checkpoint body has the wrong length".into()));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            spec,
            params: ParamVector::new(values),
            meta,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it against the expected model.
    pub fn load_for(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.spec != spec {
            return Err(Error::Version(format!(
                "checkpoint {} was written for a different model ({:?} vs {:?})",
                path.display(),
                ckpt.spec,
                spec
            )));
        }
        Ok(ckpt)
    }
}
