//! Little-endian binary checkpoint format.
//!
//! ```text
//! magic            8 bytes  "LOWSHOT\0"
//! version          u32
//! descriptor       u32 latent_dim, u32 base_width, u32 resolution, u32 channels
//! record count     u32
//!   name length    u32, name bytes (UTF-8)
//!   dtype          u8 (1 = f32, 2 = f64)
//!   rank           u32, then `rank` × u64 extents
//!   values         product(extents) raw little-endian values
//! metadata count   u32
//!   key            u32 length + bytes
//!   value          u32 length + bytes
//! end marker       4 bytes "END\0"
//! ```
//!
//! Decoder leaves are stored under `decoder/<leaf>`, latent codes under
//! `latent/<index>` and optimizer buffers under `optim/<buffer>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::decoder::{DecoderParams, Descriptor, LatentCode};
use crate::engine::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LOWSHOT\0";
pub const END_MARKER: &[u8; 4] = b"END\0";
pub const FORMAT_VERSION: u32 = 1;

const DECODER_PREFIX: &str = "decoder/";
const LATENT_PREFIX: &str = "latent/";
const OPTIM_PREFIX: &str = "optim/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub decoder: DecoderParams<T>,
    pub latents: Vec<LatentCode<T>>,
    /// Named optimizer buffers (see `optim::Optimizer::state_records`).
    pub optimizer: Vec<(String, Tensor<T>)>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(decoder: DecoderParams<T>, latents: Vec<LatentCode<T>>) -> Self {
        Self {
            decoder,
            latents,
            optimizer: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let d = &self.decoder.descriptor;
        for v in [d.latent_dim, d.base_width, d.resolution, d.channels] {
            put_u32(&mut out, v as u32);
        }
        let mut records: Vec<(String, &Tensor<T>)> = Vec::new();
        for leaf in self.decoder.params.leaves() {
            records.push((format!("{DECODER_PREFIX}{}", leaf.name), &leaf.tensor));
        }
        let latent_tensors: Vec<Tensor<T>> = self.latents.iter().map(LatentCode::to_tensor).collect();
        for (i, t) in latent_tensors.iter().enumerate() {
            records.push((format!("{LATENT_PREFIX}{i:05}"), t));
        }
        for (name, t) in &self.optimizer {
            records.push((format!("{OPTIM_PREFIX}{name}"), t));
        }
        put_u32(&mut out, records.len() as u32);
        for (name, t) in records {
            put_str(&mut out, &name);
            out.push(T::DTYPE_TAG);
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(END_MARKER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let descriptor = Descriptor {
            latent_dim: r.u32()? as usize,
            base_width: r.u32()? as usize,
            resolution: r.u32()? as usize,
            channels: r.u32()? as usize,
        };
        descriptor
            .validate()
            .map_err(|e| Error::Incompatible(format!("embedded descriptor invalid: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut latents = Vec::new();
        let mut optimizer = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let data: Vec<T> = match tag {
                t if t == T::DTYPE_TAG => {
                    let width = std::mem::size_of::<T>();
                    r.take(len * width)?.chunks_exact(width).map(T::read_le).collect()
                }
                1 => r
                    .take(len * 4)?
                    .chunks_exact(4)
                    .map(|c| T::from_f32(f32::read_le(c)))
                    .collect(),
                other => {
                    return Err(Error::Incompatible(format!(
                        "tensor `{name}` has dtype tag {other}, cannot load without loss of precision"
                    )))
                }
            };
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Parse(format!("tensor `{name}`: {e}")))?;
            if let Some(leaf) = name.strip_prefix(DECODER_PREFIX) {
                params.push(leaf, tensor, true)?;
            } else if name.starts_with(LATENT_PREFIX) {
                latents.push(LatentCode::new(tensor.into_data()));
            } else if let Some(buf) = name.strip_prefix(OPTIM_PREFIX) {
                optimizer.push((buf.to_string(), tensor));
            } else {
                return Err(Error::Parse(format!("unknown record `{name}`")));
            }
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.take(4)? != END_MARKER {
            return Err(Error::Parse("missing end marker".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let decoder = DecoderParams { descriptor, params };
        decoder.validate()?;
        if let Some(z) = latents.iter().find(|z| z.dim() != descriptor.latent_dim) {
            return Err(Error::Incompatible(format!(
                "latent code of dimension {} in a k={} checkpoint",
                z.dim(),
                descriptor.latent_dim
            )));
        }
        Ok(Self {
            decoder,
            latents,
            optimizer,
            metadata,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and rejects files whose architecture differs from `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &Descriptor) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.decoder.descriptor != expected {
            return Err(Error::Incompatible(format!(
                "checkpoint descriptor {:?} differs from expected {expected:?}",
                ck.decoder.descriptor
            )));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint<T: Scalar>(
    theta: &DecoderParams<T>,
    latents: &[LatentCode<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    Checkpoint::new(theta.clone(), latents.to_vec()).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(DecoderParams<T>, Vec<LatentCode<T>>)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.decoder, ck.latents))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("non UTF-8 name".into()))
    }
}
