//! Binary archive layout, little-endian throughout.
//!
//! ```text
//! header   magic "HSPA", version u16, flags u16, n_lat u32, n_lon u32,
//!          n_time u32, ratio f64, variant u8, seed u64, pairs u32,
//!          index_len u32, latitudes f64[n_lat], longitudes f64[n_lon],
//!          land mask bitmap (flag bit 0, LSB first)
//! model    mu0, Re mu1, Im mu1, theta[3n] (pixel-major), u0..u3 [4K], kappa [K]   (f32)
//! index    index_len bytes of delta/varint keys k·n + pixel
//! values   per key: Re (f32), then Im (f32) unless k is 0 or the Nyquist index
//! ```

use num_complex::Complex64;

use super::index::{decode_keys, encode_keys};
use crate::gridio::Grid;
use crate::select::Variant;
use crate::spectral::{half_len, is_real_frequency};
use crate::specmodel::{FittedModel, MeanModel, SpectralBasis, ThetaField};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HSPA";
pub const VERSION: u16 = 1;
const FLAG_MASK: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub grid: Grid,
    pub n_time: usize,
    pub ratio: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl ArchiveHeader {
    pub fn n_pixels(&self) -> usize {
        self.grid.n_pixels()
    }

    pub fn n_freq(&self) -> usize {
        half_len(self.n_time)
    }

    /// Size of the header on disk.
    pub fn encoded_len(&self) -> usize {
        let mask = if self.grid.land_mask().is_some() { self.n_pixels().div_ceil(8) } else { 0 };
        4 + 2 + 2 + 4 * 3 + 8 + 1 + 8 + 4 + 4 + 8 * (self.grid.n_lat() + self.grid.n_lon()) + mask
    }

    /// Size of the model block on disk.
    pub fn model_len(&self) -> usize {
        4 * (3 + 3 * self.n_pixels() + 5 * self.n_freq())
    }

    /// Byte limit `⌊4nT/ratio⌋`.
    pub fn capacity(&self) -> usize {
        (4.0 * (self.n_pixels() * self.n_time) as f64 / self.ratio).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedArchive {
    pub header: ArchiveHeader,
    /// Parameters as stored, i.e. already single precision.
    pub model: FittedModel,
    pub kappa: Vec<f64>,
    /// Sorted flattened keys `k·n + pixel`.
    pub keys: Vec<u64>,
    /// Stored coefficients in key order, single precision.
    pub values: Vec<Complex64>,
}

fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

impl CompressedArchive {
    pub fn n_pairs(&self) -> usize {
        self.keys.len()
    }

    pub fn pair(&self, i: usize) -> (usize, usize) {
        let n = self.header.n_pixels() as u64;
        ((self.keys[i] / n) as usize, (self.keys[i] % n) as usize)
    }

    /// Stored pairs per frequency.
    pub fn counts_per_frequency(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.n_freq()];
        for i in 0..self.keys.len() {
            counts[self.pair(i).0] += 1;
        }
        counts
    }

    fn check(&self) -> Result<()> {
        let h = &self.header;
        let (n, kk) = (h.n_pixels(), h.n_freq());
        if self.model.theta.theta.len() != n
            || self.model.basis.n_freq() != kk
            || self.model.basis.u.iter().any(|u| u.len() != kk)
            || self.kappa.len() != kk
        {
            return Err(Error::CorruptArchive("model block does not match the header".into()));
        }
        if self.keys.len() != self.values.len() {
            return Err(Error::CorruptArchive("index and value counts differ".into()));
        }
        if self.keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CorruptArchive("index keys not strictly increasing".into()));
        }
        if self.keys.last().is_some_and(|&k| k >= (n * kk) as u64) {
            return Err(Error::CorruptArchive("index key beyond the last frequency".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let h = &self.header;
        let index = encode_keys(&self.keys)?;
        let mut out = Vec::with_capacity(h.encoded_len() + h.model_len() + index.len() + 8 * self.values.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if h.grid.land_mask().is_some() { FLAG_MASK } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for v in [h.grid.n_lat(), h.grid.n_lon(), h.n_time] {
            out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::Shape("dimension exceeds u32".into()))?.to_le_bytes());
        }
        out.extend_from_slice(&h.ratio.to_le_bytes());
        out.push(match h.variant {
            Variant::Sequential => 0,
            Variant::Distributed => 1,
        });
        out.extend_from_slice(&h.seed.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        for v in h.grid.latitudes().iter().chain(h.grid.longitudes()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(mask) = h.grid.land_mask() {
            let mut bits = vec![0u8; mask.len().div_ceil(8)];
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
        }

        let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        let m = &self.model;
        put(m.mean.mu0);
        put(m.mean.mu1.re);
        put(m.mean.mu1.im);
        for t in &m.theta.theta {
            t.iter().for_each(|&v| put(v));
        }
        for u in std::iter::once(&m.basis.u0).chain(m.basis.u.iter()) {
            u.iter().for_each(|&v| put(v));
        }
        self.kappa.iter().for_each(|&v| put(v));

        out.extend_from_slice(&index);
        let n = h.n_pixels() as u64;
        for (&key, v) in self.keys.iter().zip(&self.values) {
            out.extend_from_slice(&(v.re as f32).to_le_bytes());
            if !is_real_frequency((key / n) as usize, h.n_time) {
                out.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptArchive("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let flags = r.u16()?;
        let n_lat = r.u32()? as usize;
        let n_lon = r.u32()? as usize;
        let n_time = r.u32()? as usize;
        let ratio = r.f64()?;
        let variant = match r.take(1)?[0] {
            0 => Variant::Sequential,
            1 => Variant::Distributed,
            v => return Err(Error::CorruptArchive(format!("unknown variant {v}"))),
        };
        let seed = r.u64()?;
        let n_pairs = r.u32()? as usize;
        let index_len = r.u32()? as usize;
        let lats = (0..n_lat).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let lons = (0..n_lon).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let n = n_lat * n_lon;
        let mask = if flags & FLAG_MASK != 0 {
            let bits = r.take(n.div_ceil(8))?;
            Some((0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect())
        } else {
            None
        };
        if flags & !FLAG_MASK != 0 {
            return Err(Error::CorruptArchive(format!("unknown flags {flags:#x}")));
        }
        let grid = Grid::new(lats, lons, mask).map_err(|e| Error::CorruptArchive(format!("grid: {e}")))?;
        if !(ratio > 0.0 && ratio.is_finite()) || n_time < 4 {
            return Err(Error::CorruptArchive("invalid ratio or series length".into()));
        }
        let header = ArchiveHeader {
            grid,
            n_time,
            ratio,
            variant,
            seed,
        };

        let kk = header.n_freq();
        let mu = [r.f32()?, r.f32()?, r.f32()?];
        let theta = (0..n)
            .map(|_| Ok([r.f32()?, r.f32()?, r.f32()?]))
            .collect::<Result<Vec<_>>>()?;
        let mut vecs = Vec::with_capacity(5);
        for _ in 0..5 {
            vecs.push((0..kk).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
        }
        let kappa = vecs.pop().expect("five vectors");
        let u3 = vecs.pop().expect("five vectors");
        let u2 = vecs.pop().expect("five vectors");
        let u1 = vecs.pop().expect("five vectors");
        let u0 = vecs.pop().expect("five vectors");
        let model = FittedModel {
            mean: MeanModel {
                mu0: mu[0],
                mu1: Complex64::new(mu[1], mu[2]),
            },
            basis: SpectralBasis { u0, u: [u1, u2, u3] },
            theta: ThetaField { theta },
        };

        let keys = decode_keys(r.take(index_len)?, n_pairs).map_err(|e| Error::CorruptArchive(e.to_string()))?;
        let mut values = Vec::with_capacity(n_pairs);
        for &key in &keys {
            let k = (key / n as u64) as usize;
            if k >= kk {
                return Err(Error::CorruptArchive(format!("key {key} beyond the last frequency")));
            }
            let re = r.f32()?;
            let im = if is_real_frequency(k, n_time) { 0.0 } else { r.f32()? };
            values.push(Complex64::new(re, im));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptArchive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            header,
            model,
            kappa,
            keys,
            values,
        })
    }

    /// Rounds every number to what the file can hold.
    pub fn quantized(mut self) -> Self {
        let m = &mut self.model;
        m.mean.mu0 = f32_round(m.mean.mu0);
        m.mean.mu1 = Complex64::new(f32_round(m.mean.mu1.re), f32_round(m.mean.mu1.im));
        m.theta = m.theta.quantized();
        m.basis = m.basis.quantized();
        self.kappa.iter_mut().for_each(|k| *k = f32_round(*k));
        self.values
            .iter_mut()
            .for_each(|v| *v = Complex64::new(f32_round(v.re), f32_round(v.im)));
        self
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptArchive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(self.array()?)))
    }
}
