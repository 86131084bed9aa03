//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"IA2UCKPT"                          magic
//! u32 len, bytes                       version string, currently "ia2u-checkpoint/1"
//! u32 len, bytes                       component tag ("classifier", "fen", ...)
//! u64                                  training step counter
//! u32 len, bytes                       run configuration, UTF-8 `key = value` lines
//! u32                                  parameter count
//!   u32 len, bytes                     parameter name
//!   u32 rank, rank × u32               shape
//!   numel × f32                        values
//! u32                                  CRC-32 of every preceding byte
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IA2UCKPT";
pub const VERSION: &str = "ia2u-checkpoint/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    pub config: RunConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(component: &str, config: RunConfig, step: u64) -> Self {
        Self {
            component: component.to_string(),
            config,
            step,
            params: Vec::new(),
        }
    }

    /// Append every parameter of `store`, prefixing names with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.named() {
            self.params.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Load every parameter of `store` from entries named `prefix + name`.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let named: Vec<(&str, &Tensor<f32>)> = self
            .params
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n, t)))
            .collect();
        store.load_named(named.iter().copied())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_str(&mut out, VERSION);
        put_str(&mut out, &self.component);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.string()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION.to_string(),
                found: version,
            });
        }
        if bytes.len() < r.pos + 4 {
            return Err(Error::CorruptCheckpoint("truncated".into()));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or altered file)".into()));
        }
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: r.pos,
        };
        let component = r.string()?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = RunConfig::from_text(&r.string()?)?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("rank {} for `{}`", rank, name)));
            }
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != r.bytes.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Self {
            component,
            config,
            step,
            params,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated: need {} bytes at offset {}, {} left",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("fen", RunConfig::default(), 42);
        ck.params.push((
            "a.weight".into(),
            Tensor::from_vec(&[2, 2], alloc::vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7]).unwrap(),
        ));
        ck.params.push(("b".into(), Tensor::from_vec(&[1], alloc::vec![7.0]).unwrap()));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.component, "fen");
        assert_eq!(back.step, 42);
        assert_eq!(back.config, ck.config);
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(&back.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().encode();
        for cut in [3, 20, bytes.len() - 1] {
            let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().encode();
        // version string starts after magic + u32 length
        bytes[8 + 4 + VERSION.len() - 1] = b'9';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::VersionMismatch { .. })));
    }
}
