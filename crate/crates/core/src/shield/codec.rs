//! Binary wire format for shields. Layout is pinned in docs/formats.md; the
//! bytes are deterministic functions of the shield's logical state so equal
//! shields always produce equal files.

use thiserror::Error;

use super::{BloomShield, BoundedShield, ParametricShield, Shield, ShieldKey, TabularShield};

pub const MAGIC: &[u8; 4] = b"SHLD";
pub const FORMAT_VERSION: u16 = 1;

const VARIANT_TABULAR: u8 = 0;
const VARIANT_BOUNDED: u8 = 1;
const VARIANT_BLOOM: u8 = 2;
const VARIANT_PARAMETRIC: u8 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShieldCodecError {
    #[error("stream too short while reading {0}")]
    Truncated(&'static str),
    #[error("bad magic {0:02x?}, expected \"SHLD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported shield format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("unknown shield variant tag {0}")]
    UnknownVariant(u8),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

impl Shield {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        match self {
            Shield::Tabular(s) => {
                out.push(VARIANT_TABULAR);
                write_keyset(&mut out, s.len() as u64, s.iter());
            }
            Shield::Bounded(s) => {
                out.push(VARIANT_BOUNDED);
                out.extend_from_slice(&(s.capacity() as u64).to_le_bytes());
                write_keyset(&mut out, s.len() as u64, s.iter_by_recency());
            }
            Shield::Bloom(s) => {
                out.push(VARIANT_BLOOM);
                out.extend_from_slice(&s.m().to_le_bytes());
                out.extend_from_slice(&u64::from(s.k()).to_le_bytes());
                out.extend_from_slice(&s.inserted().to_le_bytes());
                out.extend_from_slice(s.bit_bytes());
            }
            Shield::Parametric(s) => {
                out.push(VARIANT_PARAMETRIC);
                out.extend_from_slice(&(s.state_width() as u16).to_le_bytes());
                out.extend_from_slice(&(s.action_count() as u16).to_le_bytes());
                out.extend_from_slice(&s.threshold().to_le_bytes());
                out.extend_from_slice(&s.bias().to_le_bytes());
                out.extend_from_slice(&(s.weights().len() as u64).to_le_bytes());
                for w in s.weights() {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Shield, ShieldCodecError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(ShieldCodecError::BadMagic([
                magic[0], magic[1], magic[2], magic[3],
            ]));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(ShieldCodecError::UnsupportedVersion(version));
        }
        let variant = r.u8("variant tag")?;
        let shield = match variant {
            VARIANT_TABULAR => {
                let mut s = TabularShield::new();
                for key in read_keyset(&mut r)? {
                    s.record(key);
                }
                Shield::Tabular(s)
            }
            VARIANT_BOUNDED => {
                let capacity = r.u64("capacity")?;
                if capacity == 0 {
                    return Err(ShieldCodecError::Malformed("bounded capacity zero"));
                }
                let keys = read_keyset(&mut r)?;
                if keys.len() as u64 > capacity {
                    return Err(ShieldCodecError::Malformed("more keys than capacity"));
                }
                let mut s = BoundedShield::new(capacity as usize);
                for key in keys {
                    // Least-recent first on the wire, so insertion order
                    // reproduces the recency order exactly.
                    s.record(key);
                }
                Shield::Bounded(s)
            }
            VARIANT_BLOOM => {
                let m = r.u64("bloom m")?;
                let k = r.u64("bloom k")?;
                let n = r.u64("bloom n")?;
                if m == 0 || k == 0 {
                    return Err(ShieldCodecError::Malformed("bloom m and k must be positive"));
                }
                if k > u64::from(u32::MAX) {
                    return Err(ShieldCodecError::Malformed("bloom k out of range"));
                }
                let nbytes = usize::try_from(m.div_ceil(8))
                    .map_err(|_| ShieldCodecError::Malformed("bloom m out of range"))?;
                let bits = r.take(nbytes, "bloom bit array")?.to_vec();
                Shield::Bloom(BloomShield::from_parts(bits, m, k as u32, n))
            }
            VARIANT_PARAMETRIC => {
                let state_width = r.u16("state width")? as usize;
                let action_count = r.u16("action count")? as usize;
                let threshold = r.f64("threshold")?;
                let bias = r.f64("bias")?;
                let count = r.u64("weight count")? as usize;
                if count != state_width * 8 + action_count {
                    return Err(ShieldCodecError::Malformed(
                        "weight count disagrees with feature layout",
                    ));
                }
                let mut weights = Vec::with_capacity(count);
                for _ in 0..count {
                    weights.push(r.f64("weight")?);
                }
                Shield::Parametric(ParametricShield::from_parts(
                    weights,
                    bias,
                    threshold,
                    state_width,
                    action_count,
                ))
            }
            other => return Err(ShieldCodecError::UnknownVariant(other)),
        };
        if r.pos != bytes.len() {
            return Err(ShieldCodecError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(shield)
    }
}

fn write_keyset<'a>(out: &mut Vec<u8>, count: u64, keys: impl Iterator<Item = &'a ShieldKey>) {
    out.extend_from_slice(&count.to_le_bytes());
    let mut width_slot = out.len();
    out.extend_from_slice(&0u16.to_le_bytes());
    let mut width: Option<usize> = None;
    for key in keys {
        let bytes = key.to_bytes();
        match width {
            None => {
                width = Some(bytes.len());
                let w = u16::try_from(bytes.len()).expect("key width fits u16");
                out[width_slot..width_slot + 2].copy_from_slice(&w.to_le_bytes());
            }
            Some(w) => assert_eq!(w, bytes.len(), "shield holds uniform-width keys"),
        }
        out.extend_from_slice(&bytes);
    }
    let _ = &mut width_slot;
}

fn read_keyset(r: &mut Reader) -> Result<Vec<ShieldKey>, ShieldCodecError> {
    let count = r.u64("key count")?;
    let width = r.u16("key width")? as usize;
    if count > 0 && width < 2 {
        return Err(ShieldCodecError::Malformed("key width below minimum"));
    }
    let mut keys = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let raw = r.take(width, "key bytes")?;
        let key = ShieldKey::from_bytes(raw)
            .map_err(|_| ShieldCodecError::Malformed("undecodable key"))?;
        keys.push(key);
    }
    Ok(keys)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ShieldCodecError> {
        if self.buf.len() - self.pos < n {
            return Err(ShieldCodecError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ShieldCodecError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ShieldCodecError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ShieldCodecError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, ShieldCodecError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
