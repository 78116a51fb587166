//! RDT1 binary tensor files.
//!
//! Layout: magic `RDT1`, one `u8` rank, `rank` little-endian `u32` extents,
//! then the row-major payload as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const RDT_MAGIC: &[u8; 4] = b"RDT1";

pub fn write_tensor_to<T: Scalar, W: Write>(tensor: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(RDT_MAGIC)?;
    let rank = u8::try_from(tensor.rank()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255")
    })?;
    w.write_all(&[rank])?;
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
        })?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one tensor; `origin` names the source in error messages.
pub fn read_tensor_from<T: Scalar, R: Read>(mut r: R, origin: &Path) -> Result<Tensor<T>> {
    let fmt = |msg: String| Error::format(origin, msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| fmt(format!("truncated header: {e}")))?;
    if &magic != RDT_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|e| fmt(format!("truncated header: {e}")))?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut e = [0u8; 4];
        r.read_exact(&mut e)
            .map_err(|e| fmt(format!("truncated extents: {e}")))?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(fmt(format!("invalid shape {shape:?}")));
    }
    let n = numel_of(&shape);
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| fmt(format!("truncated payload for shape {shape:?}: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

pub fn write_tensor<T: Scalar>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path).map_err(|e| Error::format(path, format!("cannot open: {e}")))?;
    read_tensor_from(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        let mut expected = b"RDT1".to_vec();
        expected.push(2);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        assert!(read_tensor_from::<f32, _>(&b"RDT2\x01\x01\0\0\0"[..], p).is_err());
        let t = Tensor::<f32>::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        buf.pop();
        let err = read_tensor_from::<f32, _>(&buf[..], p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x3f7f_ffff)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&t, &mut buf).unwrap();
            let back: Tensor<f32> = read_tensor_from(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
