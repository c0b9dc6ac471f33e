//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "HGCNETCK" | version u32
//! spec: len u32, utf-8 bytes
//! epoch u32
//! rng: seed [u8; 32], stream u64, word position u128
//! meta count u32, each: name len u32, name, value f64
//! blob count u32, each: name len u32, name, rank u32, dims u32 x rank, data f32 x prod(dims)
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGCNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().dims().iter().map(|&d| d as u32).collect(),
            data: t.data().to_vec(),
        }
    }

    pub fn from_slice(name: impl Into<String>, data: &[f32]) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len() as u32],
            data: data.to_vec(),
        }
    }

    /// Interpret as a tensor of the expected shape.
    pub fn to_tensor(&self, expected: Shape4) -> Result<Tensor<f32>> {
        let want: Vec<u32> = expected.dims().iter().map(|&d| d as u32).collect();
        if self.dims != want {
            return Err(Error::Format(format!(
                "blob '{}' has shape {:?}, expected {:?}",
                self.name, self.dims, want
            )));
        }
        Tensor::new(expected, self.data.clone())
    }

    pub fn to_vec(&self, expected_len: usize) -> Result<Vec<f32>> {
        if self.dims != [expected_len as u32] {
            return Err(Error::Format(format!(
                "blob '{}' has shape {:?}, expected [{expected_len}]",
                self.name, self.dims
            )));
        }
        Ok(self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Network spec as `key = value` text.
    pub spec: String,
    pub epoch: u32,
    pub rng: RngState,
    pub meta: Vec<(String, f64)>,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no blob '{name}'")))
    }

    pub fn meta(&self, name: &str) -> Result<f64> {
        self.meta
            .iter()
            .find(|(n, _)| n == name)
            .map(|m| m.1)
            .ok_or_else(|| Error::Format(format!("checkpoint has no meta value '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.spec);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (name, v) in &self.meta {
            put_str(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            put_str(&mut out, &b.name);
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for d in &b.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let spec = r.string()?;
        let epoch = r.u32()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let meta_count = r.u32()?;
        let mut meta = Vec::new();
        for _ in 0..meta_count {
            let name = r.string()?;
            let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            meta.push((name, v));
        }
        let blob_count = r.u32()?;
        let mut blobs = Vec::new();
        for _ in 0..blob_count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let len = len
                .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::Format(format!(
                        "blob '{name}' at byte offset {}: dims {dims:?} exceed file",
                        r.pos
                    ))
                })?;
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blobs.push(Blob { name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes at offset {}",
                r.remaining(),
                r.pos
            )));
        }
        Ok(Self {
            spec,
            epoch,
            rng: RngState { seed, stream, word_pos },
            meta,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "unexpected end of checkpoint at byte offset {} (needed {n} bytes)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("invalid utf-8 string at byte offset {at}")))
    }
}
