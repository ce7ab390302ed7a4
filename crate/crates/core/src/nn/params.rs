use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAILCK01";

/// One named, fixed-shape array of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter arrays plus a monotonically increasing training-step counter.
///
/// Array order is insertion order and is part of the checkpoint layout, so two
/// stores built the same way serialize identically.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    arrays: Vec<Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> usize {
        debug_assert!(
            self.index_of(&tensor.name).is_none(),
            "duplicate array {}",
            tensor.name
        );
        self.arrays.push(tensor);
        self.arrays.len() - 1
    }

    pub fn arrays(&self) -> &[Tensor] {
        &self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.arrays.iter().position(|a| a.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn at(&self, index: usize) -> &Tensor {
        &self.arrays[index]
    }

    /// Mutable access to an array's values. Shapes are never exposed mutably.
    pub fn data_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.arrays[index].data
    }

    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Serializes to the checkpoint layout: magic, step, metadata, manifest, payload.
    ///
    /// ```text
    /// "SAILCK01"
    /// u64 step | u32 meta_len | meta (UTF-8 JSON) | u32 n_arrays
    /// per array: u32 name_len | name | u32 ndim | u64 dims[ndim] | u64 byte_offset
    /// payload: little-endian f32 values, arrays back to back
    /// ```
    pub fn to_checkpoint_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (a.len() * 4) as u64;
        }
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| r.fail("metadata is not UTF-8"))?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.fail("array name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let payload = r.rest();
        let mut arrays = Vec::with_capacity(n);
        for (name, shape, offset) in manifest {
            let len: usize = shape.iter().product();
            let end = offset + len * 4;
            if end > payload.len() {
                return Err(Error::Format {
                    kind: "checkpoint",
                    reason: format!("array `{name}` overruns payload"),
                });
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(Tensor { name, shape, data });
        }
        Ok((Self { arrays, step }, meta))
    }

    /// Writes the checkpoint, creating missing parent directories.
    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_checkpoint_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    /// SHA-256 over names, shapes and raw values (the step counter is excluded).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.arrays {
            h.update(a.name.as_bytes());
            for &d in &a.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &a.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient buffers laid out parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub arrays: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            arrays: store.arrays().iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for a in &mut self.arrays {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Little-endian cursor shared by the binary file readers.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            kind,
        }
    }

    pub(crate) fn fail(&self, reason: &str) -> Error {
        Error::Format {
            kind: self.kind,
            reason: format!("{reason} (byte {})", self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
