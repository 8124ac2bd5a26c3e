//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout: a UTF-8 header
//!
//! ```text
//! UNIMP-CKPT 1
//! meta <key> <value>          (zero or more)
//! param <name> <0|1> <dims>   (dims comma-separated; 0|1 = trainable)
//! end
//! ```
//!
//! followed by every parameter's values as little-endian `f64`, in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::table::write_atomic;

const MAGIC: &str = "UNIMP-CKPT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter `{name}`");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_bytes(&self, meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut header = String::from(MAGIC);
        header.push('\n');
        for (k, v) in meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "param {} {} {}\n",
                p.name,
                u8::from(p.trainable),
                dims.join(",")
            ));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamSet, BTreeMap<String, String>)> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let end_marker = b"\nend\n";
        let pos = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad("missing `end` line"))?;
        let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| bad("header is not UTF-8"))?;
        let mut payload = &bytes[pos + end_marker.len()..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("bad magic line"));
        }
        let mut meta = BTreeMap::new();
        let mut specs = Vec::new();
        for line in lines {
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                (Some("param"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad(&format!("malformed param line `{line}`")));
                    }
                    let dims = f[2]
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                        .collect::<Result<Vec<_>>>()?;
                    specs.push((f[0].to_string(), f[1] == "1", dims));
                }
                _ => return Err(bad(&format!("unexpected header line `{line}`"))),
            }
        }
        let mut set = ParamSet::new();
        for (name, trainable, dims) in specs {
            let len: usize = dims.iter().product();
            if payload.len() < len * 8 {
                return Err(bad("payload truncated"));
            }
            let data = payload[..len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[len * 8..];
            set.push(name, Tensor::new(dims, data)?, trainable);
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok((set, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &BTreeMap<String, String>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes(meta))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ParamSet, BTreeMap<String, String>)> {
        ParamSet::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_is_bit_exact() {
        let mut set = ParamSet::new();
        set.push("a.w", Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(), true);
        set.push("frozen", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let mut meta = BTreeMap::new();
        meta.insert("dim".to_string(), "8".to_string());
        meta.insert("note".to_string(), "two words".to_string());
        let (back, meta_back) = ParamSet::from_bytes(&set.to_bytes(&meta)).unwrap();
        assert_eq!(meta_back, meta);
        for (a, b) in set.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut set = ParamSet::new();
        set.push("w", Tensor::scalar(1.0), true);
        let mut bytes = set.to_bytes(&BTreeMap::new());
        bytes.pop();
        assert!(matches!(ParamSet::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
