//! `DRFM` patch feature map files.
//!
//! Layout (little-endian): magic `DRFM`, version `u32 = 1`, `H' u32`,
//! `W' u32`, `C u32`, dtype `u8` (0 = f32), 3 reserved bytes, then
//! `H'·W'·C` f32 values ordered row (v), column (u), channel.

use std::path::Path;

use super::{FeatureSource, PatchFeatureMap};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DRFM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const DTYPE_F32: u8 = 0;

pub fn encode(map: &PatchFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.channels as u32).to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0u8; 3]);
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<PatchFeatureMap> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader);
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader);
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (h, w, c) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let dtype = bytes[20];
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Malformed {
            format: "DRFM",
            reason: format!("zero dimension {h}×{w}×{c}"),
        });
    }
    let count = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::Malformed {
            format: "DRFM",
            reason: "dimension overflow".into(),
        })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count * 4 {
        return Err(Error::TruncatedData);
    }
    if payload.len() > count * 4 {
        return Err(Error::Malformed {
            format: "DRFM",
            reason: format!("{} trailing bytes", payload.len() - count * 4),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    PatchFeatureMap::new(h, w, c, data, FeatureSource::File)
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<PatchFeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_feature_map(path: impl AsRef<Path>, map: &PatchFeatureMap) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PatchFeatureMap {
        let data = (0..2 * 3 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();
        PatchFeatureMap::new(2, 3, 4, data, FeatureSource::Synthetic).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.drfm");
        let mut m = sample();
        m.data[5] = f32::from_bits(0x7f7f_ffff);
        save_feature_map(&p, &m).unwrap();
        let back = load_feature_map(&p).unwrap();
        assert_eq!((back.height, back.width, back.channels), (2, 3, 4));
        assert!(back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.source, FeatureSource::File);
    }

    #[test]
    fn header_fields_little_endian() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"DRFM");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[4, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &[0, 0, 0, 0]);
        assert_eq!(bytes.len(), 24 + 24 * 4);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::BadMagic { .. })));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode(&bad_version), Err(Error::UnsupportedVersion(2))));
        let mut bad_dtype = good.clone();
        bad_dtype[20] = 1;
        assert!(matches!(decode(&bad_dtype), Err(Error::UnsupportedDtype(1))));
        assert!(matches!(decode(&good[..10]), Err(Error::TruncatedHeader)));
        let err = decode(&good[..good.len() - 2]).unwrap_err();
        assert_eq!(err.to_string(), "truncated tensor data");
        let mut long = good.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn dinov2_small_sized_payload_accepted() {
        // 46·46·384 f32 values
        let n = 46 * 46 * 384;
        let m = PatchFeatureMap::new(46, 46, 384, vec![0.25; n], FeatureSource::Exported).unwrap();
        let bytes = encode(&m);
        assert_eq!(bytes.len(), HEADER_LEN + n * 4);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.cell(45, 45).len(), 384);
    }
}
