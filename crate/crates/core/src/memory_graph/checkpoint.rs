//! Checkpoint container: a text manifest followed by one blob of
//! little-endian f64 values.
//!
//! ```text
//! ntm-checkpoint 1
//! meta variant ntm2
//! meta iteration 250
//! tensor controller.l0.input.weight 100x129 0 12900
//! ...
//! blob 823648
//! <raw bytes>
//! ```
//!
//! Tensor lines carry name, shape (`x`-separated, `scalar` for rank 0), byte
//! offset into the blob and element count, in blob order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "ntm-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::from(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("unencodable meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(bad(format!("unencodable tensor name {name:?}")));
            }
            let shape = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("tensor {name} {shape} {offset} {}\n", t.len()));
            offset += t.len() * 8;
        }
        header.push_str(&format!("blob {offset}\n"));
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("manifest is not UTF-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("missing checkpoint magic line"));
        }
        let mut meta = Vec::new();
        let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let blob_len = loop {
            let line = next_line()?;
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad manifest line {line:?}")))?;
            match tag {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad(format!("bad tensor line {line:?}")));
                    }
                    let shape = if f[1] == "scalar" {
                        Vec::new()
                    } else {
                        f[1].split('x')
                            .map(|d| d.parse().map_err(|_| bad(format!("bad shape {:?}", f[1]))))
                            .collect::<Result<Vec<usize>>>()?
                    };
                    let offset = f[2].parse().map_err(|_| bad(format!("bad offset {:?}", f[2])))?;
                    let count = f[3].parse().map_err(|_| bad(format!("bad count {:?}", f[3])))?;
                    entries.push((f[0].to_string(), shape, offset, count));
                }
                "blob" => break rest.parse::<usize>().map_err(|_| bad("bad blob length"))?,
                _ => return Err(bad(format!("unknown manifest tag {tag:?}"))),
            }
        };
        let blob = &bytes[pos..];
        if blob.len() != blob_len {
            return Err(bad(format!("blob has {} bytes, manifest says {blob_len}", blob.len())));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset, count) in entries {
            let end = offset + count * 8;
            if end > blob.len() {
                return Err(bad(format!("tensor {name} runs past the blob")));
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
