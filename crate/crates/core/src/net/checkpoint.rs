//! Binary checkpoint format, little-endian:
//!
//! ```text
//! "SELC" | version u32 | tensor count u32
//! per tensor: name_len u32 | name | rank u32 | dims u32×rank | f32×numel
//! aux count u32
//! per aux entry: name_len u32 | name | byte_len u32 | bytes
//! crc32 u32 over everything above
//! ```
//!
//! The aux section carries the architecture text (`arch`) and, for resumable
//! training runs, the optimiser state (`train_state`).

use std::path::Path;

use super::{ArchSpec, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SELC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus named auxiliary blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub aux: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new(params: ParamSet<f32>) -> Self {
        Self {
            params,
            aux: Vec::new(),
        }
    }

    pub fn aux(&self, name: &str) -> Option<&[u8]> {
        self.aux.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn set_aux(&mut self, name: &str, bytes: Vec<u8>) {
        match self.aux.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = bytes,
            None => self.aux.push((name.to_string(), bytes)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let tensors = self.params.tensors();
        put_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut aux = vec![("arch".to_string(), self.params.arch().to_text().into_bytes())];
        aux.extend(self.aux.iter().filter(|(n, _)| n != "arch").cloned());
        put_u32(&mut out, aux.len() as u32);
        for (name, bytes) in &aux {
            put_str(&mut out, name);
            put_u32(&mut out, bytes.len() as u32);
            out.extend_from_slice(bytes);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses a checkpoint; when `expected` is given every tensor must match
    /// its shape.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ArchSpec>) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor {
                name,
                grad: vec![0.0; n],
                dims,
                data,
            });
        }
        let mut aux = Vec::new();
        let n_aux = r.u32()? as usize;
        for _ in 0..n_aux {
            let name = r.string()?;
            let len = r.u32()? as usize;
            aux.push((name, r.take(len)?.to_vec()));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes before checksum".into()));
        }
        let stored_arch = match aux.iter().find(|(n, _)| n == "arch") {
            Some((_, b)) => Some(ArchSpec::parse(
                std::str::from_utf8(b).map_err(|_| Error::Checkpoint("arch entry is not UTF-8".into()))?,
            )?),
            None => None,
        };
        let arch = match (expected, stored_arch) {
            (Some(e), _) => e.clone(),
            (None, Some(a)) => a,
            (None, None) => ArchSpec::default(),
        };
        check_shapes(&arch, &tensors)?;
        aux.retain(|(n, _)| n != "arch");
        Ok(Self {
            params: ParamSet::from_tensors(arch, tensors),
            aux,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ArchSpec>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

fn check_shapes(arch: &ArchSpec, tensors: &[Tensor<f32>]) -> Result<()> {
    let want = arch.tensor_shapes();
    for (i, (name, dims)) in want.iter().enumerate() {
        let layer = name.split('.').next().unwrap_or(name).to_string();
        match tensors.get(i) {
            Some(t) if &t.name == name && &t.dims == dims => {}
            Some(t) => {
                return Err(Error::ShapeMismatch {
                    layer,
                    expected: format!("{name} {dims:?}"),
                    found: format!("{} {:?}", t.name, t.dims),
                })
            }
            None => {
                return Err(Error::ShapeMismatch {
                    layer,
                    expected: format!("{name} {dims:?}"),
                    found: "missing".into(),
                })
            }
        }
    }
    if tensors.len() > want.len() {
        let t = &tensors[want.len()];
        return Err(Error::ShapeMismatch {
            layer: t.name.split('.').next().unwrap_or(&t.name).to_string(),
            expected: "no further tensors".into(),
            found: format!("{} {:?}", t.name, t.dims),
        });
    }
    Ok(())
}

pub fn save_checkpoint(params: &ParamSet<f32>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(params.clone()).save(path)
}

/// Loads parameters using the architecture recorded in the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    Ok(Checkpoint::load(path, None)?.params)
}

/// Loads parameters that must match `arch` exactly.
pub fn load_checkpoint_for(path: impl AsRef<Path>, arch: &ArchSpec) -> Result<ParamSet<f32>> {
    Ok(Checkpoint::load(path, Some(arch))?.params)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
