//! Checkpoint file format.
//!
//! ```text
//! ORMLLM-CKPT v1\n
//! # <key>\t<value>\n                                  (zero or more metadata lines)
//! <name>\t<d0>x<d1>..\t<offset>\t<0|1>\t<fnv64 hex>\n  (one per tensor)
//! \n
//! <little-endian f64 payload>
//! ```
//!
//! Offsets are relative to the payload start, in manifest order, with no
//! gaps. The trailing field is an FNV-1a hash of each tensor's payload
//! bytes, so single-byte corruption is detected on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &str = "ORMLLM-CKPT v1\n";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self { meta: Vec::new(), params }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::from(MAGIC);
        for (k, v) in &self.meta {
            head.push_str(&format!("# {k}\t{v}\n"));
        }
        let mut payload = Vec::with_capacity(self.params.num_values() * 8);
        for (name, t) in self.params.iter() {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let shape = t
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            head.push_str(&format!(
                "{name}\t{shape}\t{offset}\t{}\t{:016x}\n",
                u8::from(t.requires_grad),
                fnv1a(&payload[offset..])
            ));
        }
        head.push('\n');
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC.as_bytes()) {
            return Err(bad("missing magic header"));
        }
        let mut pos = MAGIC.len();
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|e| pos + e)
                .ok_or_else(|| bad("manifest not terminated by a blank line"))?;
            let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("manifest is not UTF-8"))?;
            pos = end + 1;
            if line.is_empty() {
                break;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('\t').ok_or_else(|| bad(format!("bad metadata line `{line}`")))?;
                meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("manifest line has {} fields: `{line}`", f.len())));
            }
            let shape = f[1]
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("bad shape `{}` for `{}`", f[1], f[0])))?;
            let offset: usize = f[2].parse().map_err(|_| bad(format!("bad offset for `{}`", f[0])))?;
            let trainable = match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(format!("bad trainable flag for `{}`", f[0]))),
            };
            let sum = u64::from_str_radix(f[4], 16).map_err(|_| bad(format!("bad checksum for `{}`", f[0])))?;
            entries.push((f[0].to_string(), shape, offset, trainable, sum));
        }
        let payload = &bytes[pos..];
        let mut params = ParamStore::new();
        let mut expected = 0usize;
        for (name, shape, offset, trainable, sum) in entries {
            if offset != expected {
                return Err(bad(format!("`{name}` at offset {offset}, expected {expected}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(bad(format!("payload truncated inside `{name}`")));
            }
            let raw = &payload[offset..end];
            if fnv1a(raw) != sum {
                return Err(bad(format!("payload checksum mismatch for `{name}`")));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?.with_grad(trainable));
            expected = end;
        }
        if expected != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - expected)));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
