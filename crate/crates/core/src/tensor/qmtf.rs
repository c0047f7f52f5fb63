//! QMTF binary tensor files.
//!
//! Layout, all little-endian: magic bytes `QMTF`, u32 version (= 1), u32
//! rank, u64 dims[rank], then the row-major payload as 64-bit floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QMTF";
pub const VERSION: u32 = 1;

pub fn write<F: Scalar, W: Write>(mut w: W, t: &Tensor<F>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read<F: Scalar, R: Read>(mut r: R) -> Result<Tensor<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::TensorFile(format!("bad magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::TensorFile(format!("unsupported version {}", version)));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::TensorFile(format!("implausible rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b8)?;
        data.push(F::from_f64(f64::from_le_bytes(b8)));
    }
    // A trailing byte means the file does not match its header.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::TensorFile("trailing bytes after payload".into()));
    }
    Tensor::from_vec(shape, data)
}

pub fn write_file<F: Scalar>(path: &Path, t: &Tensor<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_file<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_pinned() {
        let t = Tensor::<f64>::from_vec(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"QMTF");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1u64.to_le_bytes());
        assert_eq!(&buf[20..28], &2u64.to_le_bytes());
        assert_eq!(&buf[28..36], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 28 + 16);
    }

    #[test]
    fn rejects_corrupt_magic() {
        let t = Tensor::<f64>::scalar(3.0);
        let mut buf = Vec::new();
        write(&mut buf, &t).unwrap();
        buf[0] = b'X';
        assert!(read::<f64, _>(&buf[..]).is_err());
    }
}
