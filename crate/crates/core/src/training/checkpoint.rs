//! Binary checkpoint format.
//!
//! ```text
//! magic      b"SSLF"
//! version    u16
//! kind       u8            1 = unet, 2 = backbone, 3 = classifier
//! config     u32 length + UTF-8 JSON (configuration and training metadata)
//! count      u32
//! tensors    count x { u32 length + UTF-8 name, u8 rank, rank x u64 dim, f32 data }
//! checksum   u64           FNV-1a over every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SSLF";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    UNet = 1,
    Backbone = 2,
    Classifier = 3,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::UNet => "unet",
            ModelKind::Backbone => "backbone",
            ModelKind::Classifier => "classifier",
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::UNet),
            2 => Some(ModelKind::Backbone),
            3 => Some(ModelKind::Classifier),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Self-describing JSON: `{"config": ..., "metadata": ...}`.
    pub echo: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(kind: ModelKind, config: Value, metadata: Value) -> Self {
        Self {
            kind,
            echo: serde_json::json!({ "config": config, "metadata": metadata }),
            tensors: Vec::new(),
        }
    }

    pub fn config(&self) -> &Value {
        &self.echo["config"]
    }

    pub fn metadata(&self) -> &Value {
        &self.echo["metadata"]
    }

    /// Appends every parameter and buffer of `store`, named `<prefix>.<name>`
    /// (bare names when `prefix` is empty).
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, p) in store.iter() {
            let full = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
            self.tensors.push((full, p.value.clone().with_requires_grad(false)));
        }
    }

    /// Loads the tensors under `prefix` into `store`; names and shapes must match.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        fn strip<'a>(prefix: &str, name: &'a str) -> Option<&'a str> {
            if prefix.is_empty() {
                (!name.starts_with("adam.")).then_some(name)
            } else {
                name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.'))
            }
        }
        let selected: Vec<(&str, &Tensor<f32>)> =
            self.tensors.iter().filter_map(|(n, t)| strip(prefix, n).map(|s| (s, t))).collect();
        store.load_values(selected)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect_kind(&self, expected: ModelKind) -> Result<()> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: expected.name(),
                found: self.kind.name(),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        let echo = serde_json::to_vec(&self.echo).expect("JSON values serialize");
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(&echo);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    fn parse_body(r: &mut Reader<'_>) -> Result<Self> {
        let tag = r.u8("model kind")?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown model kind tag {tag}")))?;
        let echo: Value = serde_json::from_str(r.string("config echo")?)?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?.to_string();
            let rank = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated { what: "tensor data" })?;
            let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated { what: "tensor data" })?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { kind, echo, tensors })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic").map(|m| m.try_into().unwrap())?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        if bytes.len() < r.pos + 8 {
            return Err(Error::Truncated { what: "checksum" });
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a64(payload);
        let mut body = Reader { bytes: payload, pos: r.pos };
        if stored != computed {
            // A structurally short file is reported as truncation.
            return Err(match Self::parse_body(&mut body) {
                Err(e @ Error::Truncated { .. }) => e,
                _ => Error::Checksum { stored, computed },
            });
        }
        let ck = Self::parse_body(&mut body)?;
        if body.pos != payload.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len() - body.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(ModelKind::UNet, json!({"depth": 2}), json!({"epoch": 3}));
        ck.tensors.push(("a.weight".into(), Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.1 - 0.2)));
        ck.tensors.push(("b".into(), Tensor::new(vec![1], vec![f32::MIN_POSITIVE]).unwrap()));
        ck
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::BadMagic { .. })));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::UnsupportedVersion { found: 9, .. })));
        let mut b = bytes.clone();
        let last_data = bytes.len() - 9;
        b[last_data] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 20]), Err(Error::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn kind_check() {
        let ck = sample();
        assert!(ck.expect_kind(ModelKind::UNet).is_ok());
        assert!(matches!(
            ck.expect_kind(ModelKind::Backbone),
            Err(Error::KindMismatch { expected: "backbone", found: "unet" })
        ));
    }
}
