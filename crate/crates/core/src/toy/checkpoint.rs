//! Binary checkpoint of a [`ToyModel`], little-endian throughout:
//!
//! ```text
//! "CKPT" | u8 version=1 | u8 flags (bit 0: adapter present) | u16 reserved=0
//! u32 dim_music | u32 dim_speech | u32 dim_text | u32 dim | u64 optimizer step
//! u32 tensor_count, then per tensor: u32 name_len | name | u32 rows | u32 cols
//! f64 values of every tensor, then every first moment, then every second moment
//! ```
//!
//! The last tensor is always `gamma` (1 x 2: kernel, temporal).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::toy::model::{
    Linear, ModelDims, ToyModel, ADAPTER_BIAS, ADAPTER_WEIGHT, GAMMA, TEXT_BIAS, TEXT_WEIGHT,
};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u8 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format("value exceeds u32".into()))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &ToyModel) -> Result<Vec<u8>> {
    let gamma = [model.gamma_kernel, model.gamma_temporal];
    let mut table: Vec<(&str, usize, usize, &[f64])> = model
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.rows, t.cols, t.values))
        .collect();
    table.push((GAMMA, 1, 2, &gamma));
    if model.moments.len() != table.len() {
        return Err(Error::Data(
            "optimizer state does not match parameters".into(),
        ));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(model.adapter.is_some() as u8);
    buf.extend_from_slice(&0u16.to_le_bytes());
    for d in [
        model.dims.music,
        model.dims.speech,
        model.dims.text,
        model.dims.dim,
    ] {
        put_u32(&mut buf, d)?;
    }
    buf.extend_from_slice(&model.step.to_le_bytes());
    put_u32(&mut buf, table.len())?;
    for (name, rows, cols, _) in &table {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, *rows)?;
        put_u32(&mut buf, *cols)?;
    }
    let blobs = table
        .iter()
        .map(|t| t.3)
        .chain(model.moments.iter().map(|m| m.0.as_slice()))
        .chain(model.moments.iter().map(|m| m.1.as_slice()));
    for blob in blobs {
        for x in blob {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let has_adapter = r.take(1)?[0] & 1 == 1;
    r.take(2)?;
    let dims = ModelDims {
        music: r.u32()?,
        speech: r.u32()?,
        text: r.u32()?,
        dim: r.u32()?,
    };
    let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let count = r.u32()?;
    let mut shapes = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rows = r.u32()?;
        let cols = r.u32()?;
        shapes.push((name, rows, cols));
    }

    let mut expected: Vec<(&str, usize, usize)> = Vec::new();
    if has_adapter {
        expected.push((ADAPTER_WEIGHT, dims.music + dims.speech, dims.dim));
        expected.push((ADAPTER_BIAS, 1, dims.dim));
    }
    expected.push((TEXT_WEIGHT, dims.text, dims.dim));
    expected.push((TEXT_BIAS, 1, dims.dim));
    expected.push((GAMMA, 1, 2));
    let matches = shapes.len() == expected.len()
        && shapes
            .iter()
            .zip(&expected)
            .all(|((n, r0, c0), (en, r1, c1))| n == en && r0 == r1 && c0 == c1);
    if !matches {
        return Err(Error::Format(format!("unexpected tensor table {shapes:?}")));
    }

    let sizes: Vec<usize> = shapes.iter().map(|(_, r, c)| r * c).collect();
    let values = sizes
        .iter()
        .map(|&n| r.f64s(n))
        .collect::<Result<Vec<_>>>()?;
    let firsts = sizes
        .iter()
        .map(|&n| r.f64s(n))
        .collect::<Result<Vec<_>>>()?;
    let seconds = sizes
        .iter()
        .map(|&n| r.f64s(n))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if values.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Data("checkpoint holds non-finite parameters".into()));
    }

    let mut values = values.into_iter();
    let adapter = if has_adapter {
        let weight = values.next().unwrap();
        let bias = values.next().unwrap();
        Some(Linear {
            in_dim: dims.music + dims.speech,
            out_dim: dims.dim,
            weight,
            bias,
        })
    } else {
        None
    };
    let text = Linear {
        in_dim: dims.text,
        out_dim: dims.dim,
        weight: values.next().unwrap(),
        bias: values.next().unwrap(),
    };
    let gamma = values.next().unwrap();
    Ok(ToyModel {
        dims,
        adapter,
        text,
        gamma_kernel: gamma[0],
        gamma_temporal: gamma[1],
        moments: firsts.into_iter().zip(seconds).collect(),
        step,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    decode_checkpoint(&fs::read(path)?)
}
