//! `.vvol` volume files.
//!
//! Little-endian layout: magic `VVOL1\0`, `u32` nx, ny, nz, `f32` spacing
//! x, y, z, `u8` unit tag (0 = HU, 1 = normalized, 2 = probability), one
//! reserved byte, then `nx * ny * nz` `f32` values with x fastest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Unit, Volume};

pub const MAGIC: &[u8; 6] = b"VVOL1\0";
const HEADER_LEN: usize = 6 + 12 + 12 + 2;

pub fn encode(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(MAGIC);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(v.unit().tag());
    out.push(0);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(6) as usize, u32_at(10) as usize, u32_at(14) as usize];
    let spacing = [f32_at(18), f32_at(22), f32_at(26)];
    let unit = Unit::from_tag(bytes[30])
        .ok_or_else(|| Error::format(path, format!("unknown unit tag {}", bytes[30])))?;
    let n = voxel_count(dims);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), 4 * n),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, spacing, unit, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(v)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Builds an HU volume from 16-bit scanner values.
pub fn hu_from_i16(dims: [usize; 3], spacing: [f32; 3], values: &[i16]) -> Result<Volume> {
    Volume::new(
        dims,
        spacing,
        Unit::Hu,
        values.iter().map(|&v| v as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let v = Volume::filled([2, 3, 4], [1.0, 0.5, 2.0], Unit::Prob, 1.0).unwrap();
        let bytes = encode(&v);
        let p = Path::new("x.vvol");

        let mut bad = bytes.clone();
        bad[0] = b'W';
        assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));

        assert!(matches!(
            decode(&bytes[..bytes.len() - 1], p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode(&bytes[..10], p), Err(Error::Format { .. })));
        assert_eq!(decode(&bytes, p).unwrap(), v);
    }

    #[test]
    fn header_layout() {
        let v = Volume::filled([1, 1, 1], [1.0; 3], Unit::Normalized, 0.5).unwrap();
        let b = encode(&v);
        assert_eq!(b.len(), 32 + 4);
        assert_eq!(&b[..6], b"VVOL1\0");
        assert_eq!(b[30], 1);
        assert_eq!(&b[32..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vvol");
        let v = hu_from_i16([2, 2, 1], [0.7, 0.7, 2.5], &[-1000, 0, 40, 3000]).unwrap();
        write(&path, &v).unwrap();
        assert_eq!(read(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            dims in (1usize..6, 1usize..6, 1usize..6),
            seed in any::<u64>(),
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let n = voxel_count(dims);
            let data: Vec<f32> = (0..n)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 11) as f64 / (1u64 << 53) as f64) as f32)
                .collect();
            let v = Volume::new(dims, [0.3, 1.0, 2.2], Unit::Normalized, data).unwrap();
            let back = decode(&encode(&v), Path::new("p")).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
