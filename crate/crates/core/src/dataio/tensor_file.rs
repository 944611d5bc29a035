//! GRT1 tensor files: `"GRT1"`, rank as `u32` LE, each extent as `u32` LE,
//! then the values as `f64` LE in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GRT1";

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let rank = u32::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds u32".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&rank.to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parses one tensor from `bytes`, which must hold exactly one tensor.
pub fn read_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Format("truncated header".into()))?;
    if &word != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&word))));
    }
    r.read_exact(&mut word).map_err(|_| Error::Format("truncated header".into()))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank.saturating_mul(4) > r.len() {
        return Err(Error::Format(format!("rank {rank} exceeds file size")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        r.read_exact(&mut word).expect("length checked");
        let e = u32::from_le_bytes(word) as usize;
        numel = numel
            .checked_mul(e)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        shape.push(e);
    }
    if r.len() != numel * 8 {
        return Err(Error::Format(format!("{} payload bytes for {numel} values", r.len())));
    }
    let data = r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut rng = SeededRng::new(8);
        let t = Tensor::new(vec![8, 4, 4], (0..128).map(|_| rng.normal()).collect()).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&buf).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn vector_file_size() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::from_vec(vec![1.5; 12])).unwrap();
        assert_eq!(buf.len(), 108);
        assert_eq!(&buf[..8], b"GRT1\x01\x00\x00\x00");
        assert_eq!(&buf[8..12], &12u32.to_le_bytes());
    }

    #[test]
    fn malformed_files_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let mut bad = buf.clone();
        bad[3] = b'0';
        assert!(matches!(read_tensor(&bad), Err(Error::Format(m)) if m.contains("magic")));
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        assert!(read_tensor(&buf[..6]).is_err());
        let mut huge = b"GRT1".to_vec();
        huge.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(read_tensor(&huge).is_err());
        let mut big_rank = b"GRT1".to_vec();
        big_rank.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(read_tensor(&big_rank).is_err());
    }
}
