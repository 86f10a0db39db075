//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "BINOCKPT" | version | meta_len | meta (UTF-8 `key = value` lines)
//! count | { name_len | name | ndim | dims... | f32 LE data }*
//! ```

use std::path::Path;

use super::EncoderConfig;
use crate::harness::config::KvEcho;
use crate::tensor::{ParamSet, Tensor};
use crate::{BinoError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BINOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(BinoError::Data("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| BinoError::Data("checkpoint string is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Collects every tensor under `prefix/` into a parameter set, in stored order.
    pub fn params(&self, prefix: &str) -> Result<ParamSet<f32>> {
        let lead = format!("{prefix}/");
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.insert(rest, t.clone());
            }
        }
        if out.is_empty() {
            return Err(BinoError::Data(format!("checkpoint has no '{prefix}' parameters")));
        }
        Ok(out)
    }

    pub fn set_encoder_config(&mut self, cfg: &EncoderConfig) {
        for (k, v) in cfg.echo() {
            self.set_meta(format!("encoder.{k}"), v);
        }
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let mut cfg = EncoderConfig::default();
        let mut seen = false;
        for (k, v) in &self.meta {
            if let Some(rest) = k.strip_prefix("encoder.") {
                seen |= cfg.set(rest, v)?;
            }
        }
        if !seen {
            return Err(BinoError::Data("checkpoint carries no encoder config".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(BinoError::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(BinoError::Data(format!("unsupported checkpoint version {version}")));
        }
        let meta_text = r.str()?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| BinoError::Data(format!("bad checkpoint meta line '{line}'")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| BinoError::Data("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| BinoError::Data(format!("tensor '{name}': {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(BinoError::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| BinoError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| BinoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| BinoError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;
    use crate::fusion::TokenGeometry;

    #[test]
    fn byte_identical_round_trip() {
        let cfg = EncoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            geometry: TokenGeometry::new(8, 8, 4, 4).unwrap(),
            ..Default::default()
        };
        let enc = Encoder::new(cfg.clone()).unwrap();
        let mut ck = Checkpoint::new();
        ck.set_encoder_config(&cfg);
        ck.set_meta("step", "17");
        ck.push_params("student", &enc.init_params(1));
        ck.push_params("teacher", &enc.init_params(2));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.encoder_config().unwrap(), cfg);
        assert_eq!(back.params("teacher").unwrap().tensors(), enc.init_params(2).tensors());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
        let mut bytes = Checkpoint::new().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes.truncate(10);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
