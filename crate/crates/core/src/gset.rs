//! Flat binary serialization of a [`GradientSet`].
//!
//! Layout (little-endian): magic `GSET`, `u32 d`, `u32 n`, then `d * n` f64
//! values column by column, then `n` ids, each a `u32` byte length followed by
//! UTF-8 bytes.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::selection::{GradientSet, SampleId};

pub const MAGIC: &[u8; 4] = b"GSET";

pub fn encode(g: &GradientSet) -> Result<Vec<u8>> {
    let d = u32::try_from(g.dim()).map_err(|_| Error::Framing("dimension exceeds u32".into()))?;
    let n = u32::try_from(g.count()).map_err(|_| Error::Framing("count exceeds u32".into()))?;
    let mut out = Vec::with_capacity(12 + 8 * g.dim() * g.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for j in 0..g.count() {
        for v in g.column(j) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for id in g.ids() {
        let bytes = id.as_str().as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| Error::Framing("id too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<GradientSet> {
    let mut cur = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Framing(format!("bad magic {magic:?}")));
    }
    let d = read_u32(&mut cur)? as usize;
    let n = read_u32(&mut cur)? as usize;
    let payload = d
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Framing("payload size overflow".into()))?;
    if cur.len() < payload {
        return Err(Error::Framing("truncated gradient payload".into()));
    }
    let mut columns = Array2::zeros((d, n));
    for j in 0..n {
        for i in 0..d {
            let mut b = [0u8; 8];
            read_exact(&mut cur, &mut b)?;
            columns[[i, j]] = f64::from_le_bytes(b);
        }
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut cur)? as usize;
        if cur.len() < len {
            return Err(Error::Framing("truncated id".into()));
        }
        let (s, rest) = cur.split_at(len);
        let s = std::str::from_utf8(s).map_err(|e| Error::Framing(format!("id is not UTF-8: {e}")))?;
        ids.push(SampleId::new(s));
        cur = rest;
    }
    if !cur.is_empty() {
        return Err(Error::Framing(format!("{} trailing bytes", cur.len())));
    }
    GradientSet::from_unit_columns(columns, ids)
}

pub fn write_to(g: &GradientSet, w: &mut impl Write) -> Result<()> {
    w.write_all(&encode(g)?)?;
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<GradientSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

fn read_exact(cur: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if cur.len() < out.len() {
        return Err(Error::Framing("unexpected end of blob".into()));
    }
    let (head, rest) = cur.split_at(out.len());
    out.copy_from_slice(head);
    *cur = rest;
    Ok(())
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
