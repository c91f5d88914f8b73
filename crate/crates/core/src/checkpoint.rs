//! Little-endian binary checkpoints.
//!
//! Layout: magic `FCLK`, version `u32`, `num_items u64`, `dim u64`, encoder
//! `u8` (0 = id, 1 = mean_seq), the item table and then the projection as
//! row-major `f64`, then `count u64` private vectors each prefixed by its
//! client id as `u64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderKind, Matrix, ModelParams, SharedParams};

const MAGIC: &[u8; 4] = b"FCLK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderKind,
    pub params: ModelParams,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let shared = &self.params.shared;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut out, shared.num_items() as u64);
        put_u64(&mut out, shared.dim() as u64);
        out.push(match self.encoder {
            EncoderKind::Id => 0,
            EncoderKind::MeanSeq => 1,
        });
        put_f64s(&mut out, shared.item_table.as_slice());
        put_f64s(&mut out, shared.projection.as_slice());
        put_u64(&mut out, self.params.user_vectors.len() as u64);
        for (id, v) in self.params.user_vectors.iter().enumerate() {
            put_u64(&mut out, id as u64);
            put_f64s(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let num_items = r.usize()?;
        let dim = r.usize()?;
        let encoder = match r.take(1)?[0] {
            0 => EncoderKind::Id,
            1 => EncoderKind::MeanSeq,
            other => return Err(Error::Checkpoint(format!("unknown encoder tag {other}"))),
        };
        let item_table = Matrix::from_vec(num_items, dim, r.f64s(num_items * dim)?)?;
        let projection = Matrix::from_vec(dim, dim, r.f64s(dim * dim)?)?;
        let count = r.usize()?;
        let mut user_vectors = Vec::with_capacity(count.min(1 << 20));
        for expected in 0..count {
            let id = r.usize()?;
            if id != expected {
                return Err(Error::Checkpoint(format!("client {id} out of order")));
            }
            user_vectors.push(r.f64s(dim)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            encoder,
            params: ModelParams {
                shared: SharedParams {
                    item_table,
                    projection,
                },
                user_vectors,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("size {v} too large")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
