//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "KDLT"  u16 version
//! u32 × 8 config: input_height input_width channels max_seq_len
//!                 alphabet_size first_conv_stride stem0 stem1
//! u32 tensor count, then per tensor:
//!   u16 name length, name (UTF-8), u8 rank, u32 × rank dims, f32 × numel
//! u64 FNV-1a of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::recognizer::{NamedTensor, Recognizer, RecognizerConfig};

pub const MAGIC: &[u8; 4] = b"KDLT";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 6;
const CHECKSUM_LEN: usize = 8;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn config_fields(c: &RecognizerConfig) -> [usize; 8] {
    [
        c.input_height,
        c.input_width,
        c.channels,
        c.max_seq_len,
        c.alphabet_size,
        c.first_conv_stride,
        c.stem_channels[0],
        c.stem_channels[1],
    ]
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &Recognizer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in config_fields(model.config()) {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, model.weights().len())?;
    for w in model.weights() {
        let name = w.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract("tensor name too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = w.tensor.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Contract("tensor rank too large".into()))?);
        for &d in shape {
            put_u32(&mut out, d)?;
        }
        for v in w.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Recognizer> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing KDLT magic".into()));
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch (stored {stored:016x}, computed {actual:016x})"
        )));
    }

    let mut r = Reader {
        bytes: body,
        pos: HEADER_LEN,
    };
    let mut f = [0usize; 8];
    for v in f.iter_mut() {
        *v = r.u32()?;
    }
    let config = RecognizerConfig {
        input_height: f[0],
        input_width: f[1],
        channels: f[2],
        max_seq_len: f[3],
        alphabet_size: f[4],
        first_conv_stride: f[5],
        stem_channels: [f[6], f[7]],
    };
    let count = r.u32()?;
    let mut weights = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
        weights.push(NamedTensor { name, tensor });
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Recognizer::from_weights(config, weights)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save(model: &Recognizer, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Recognizer> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Recognizer {
        Recognizer::new(RecognizerConfig::student(), 17).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_bit_flips_are_corruption() {
        let bytes = encode(&model()).unwrap();
        for cut in [7, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn magic_and_version_are_checked() {
        let mut bytes = encode(&model()).unwrap();
        bytes[4..6].copy_from_slice(&99u16.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedVersion { found: 99, expected: 1 })
        ));
        assert!(matches!(decode(b"PNG\x89rest"), Err(Error::Format(_))));
        assert!(matches!(decode(b""), Err(Error::Format(_))));
    }
}
