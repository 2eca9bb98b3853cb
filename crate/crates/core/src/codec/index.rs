//! Delta/varint coding of the stored `(k, pixel)` pairs.
//!
//! Pairs are flattened to `k·n + pixel`; the first key and each following
//! gap is written as a little-endian base-128 varint.

use crate::{Error, Result};

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8 & 0x7f) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

/// Reads one varint at `*pos`, advancing it.
pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v: u64 = 0;
    for shift in (0..64).step_by(7) {
        let Some(&b) = bytes.get(*pos) else {
            return Err(Error::IndexCodec("truncated varint".into()));
        };
        *pos += 1;
        let payload = u64::from(b & 0x7f);
        if shift == 63 && payload > 1 {
            return Err(Error::IndexCodec("varint overflows 64 bits".into()));
        }
        v |= payload << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::IndexCodec("varint longer than 10 bytes".into()))
}

pub fn encode_keys(keys: &[u64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(keys.len() + 4);
    let mut prev: Option<u64> = None;
    for &key in keys {
        let gap = match prev {
            None => key,
            Some(p) if key > p => key - p,
            Some(p) => return Err(Error::IndexCodec(format!("keys not strictly increasing: {p} then {key}"))),
        };
        write_varint(&mut out, gap);
        prev = Some(key);
    }
    Ok(out)
}

/// Decodes exactly `count` keys; trailing bytes are an error.
pub fn decode_keys(bytes: &[u8], count: usize) -> Result<Vec<u64>> {
    let mut keys = Vec::with_capacity(count);
    let mut pos = 0;
    let mut prev: Option<u64> = None;
    for _ in 0..count {
        let gap = read_varint(bytes, &mut pos)?;
        let key = match prev {
            None => gap,
            Some(_) if gap == 0 => return Err(Error::IndexCodec("zero gap between keys".into())),
            Some(p) => p.checked_add(gap).ok_or_else(|| Error::IndexCodec("key overflows 64 bits".into()))?,
        };
        keys.push(key);
        prev = Some(key);
    }
    if pos != bytes.len() {
        return Err(Error::IndexCodec(format!("{} bytes left after {count} keys", bytes.len() - pos)));
    }
    Ok(keys)
}

pub fn flatten(k: usize, pixel: usize, n_pixels: usize) -> u64 {
    (k * n_pixels + pixel) as u64
}

pub fn encode_indices(pairs: &[(usize, usize)], n_pixels: usize) -> Result<Vec<u8>> {
    if let Some(&(k, p)) = pairs.iter().find(|&&(_, p)| p >= n_pixels) {
        return Err(Error::IndexCodec(format!("pixel {p} at frequency {k} outside 0..{n_pixels}")));
    }
    let keys: Vec<u64> = pairs.iter().map(|&(k, p)| flatten(k, p, n_pixels)).collect();
    encode_keys(&keys)
}

pub fn decode_indices(bytes: &[u8], count: usize, n_pixels: usize) -> Result<Vec<(usize, usize)>> {
    if n_pixels == 0 {
        return Err(Error::IndexCodec("no pixels".into()));
    }
    let n = n_pixels as u64;
    Ok(decode_keys(bytes, count)?
        .into_iter()
        .map(|key| ((key / n) as usize, (key % n) as usize))
        .collect())
}
