//! `CMCT` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CMCT"  u32 version (=1)  u32 entry_count
//! per entry: u16 name_len, name (UTF-8), u32 rank, u32 × rank dims, f32 × numel payload
//! ```
//!
//! Values are narrowed to `f32` on write.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CmcError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMCT";
pub const VERSION: u32 = 1;

pub fn write_entries<W: Write>(mut out: W, entries: &[(String, Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| CmcError::Format(format!("entry name too long: {} bytes", bytes.len())))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_entries<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CmcError::Format(format!("bad magic {:?}", magic)));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(CmcError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CmcError::Format(format!("entry name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(read_u32(&mut input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        input.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CmcError::Format(format!("entry {name}: {e}")))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_entries(&mut buf, entries)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    read_entries(bytes.as_slice())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_entries(&mut buf, &[("ab".into(), t)]).unwrap();
        let expect: Vec<u8> = [
            &b"CMCT"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &2u16.to_le_bytes(),
            b"ab",
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
            &(-2.5f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(matches!(read_entries(&b"XXXX\x01\0\0\0\0\0\0\0"[..]), Err(CmcError::Format(_))));
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_entries(&mut buf, &[("x".into(), t)]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_entries(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact_for_f32_values(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed as f64 + i as f64 * 0.37).sin() * 100.0) as f32 as f64)
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_entries(&mut buf, &[("w".into(), t.clone()), ("ü".into(), t.clone())]).unwrap();
            let back = read_entries(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[1].0, "ü");
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
