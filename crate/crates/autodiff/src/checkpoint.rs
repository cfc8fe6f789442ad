//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! "PCKP" | u32 version
//! u32 n_params   { u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data[prod(dims)] }
//! u32 n_momentum { same record layout }
//! RNG: u8 seed[32], u64 stream, u128 word_pos
//! u32 epoch
//! ```

use std::io::{Read, Write};

use crate::error::{NnError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Position of a counter-based generator: its seed, stream and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<NamedTensor>,
    pub momentum: Vec<NamedTensor>,
    pub rng: RngState,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_table(w, &self.params)?;
        write_table(w, &self.momentum)?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let params = read_table(r)?;
        let momentum = read_table(r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut b16 = [0u8; 16];
        r.read_exact(&mut b16)?;
        let epoch = read_u32(r)?;
        Ok(Self {
            params,
            momentum,
            rng: RngState { seed, stream: u64::from_le_bytes(b8), word_pos: u128::from_le_bytes(b16) },
            epoch,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let ck = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", cur.len())));
        }
        Ok(ck)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_table<W: Write>(w: &mut W, table: &[NamedTensor]) -> Result<()> {
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    for t in table {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| NnError::Checkpoint("tensor name too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(NnError::Checkpoint(format!("tensor {} data does not match its shape", t.name)));
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_table<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut nd = [0u8; 1];
        r.read_exact(&mut nd)?;
        let shape = (0..nd[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}
