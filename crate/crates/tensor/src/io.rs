//! `PDT1` raw tensor files.
//!
//! Layout: magic `PDT1`, `u8` dtype (0 = f32), `u8` rank, `rank × u32` LE
//! extents, then the row-major LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDT1";
pub const DTYPE_F32: u8 = 0;

pub fn write_pdt1<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.ndim())
        .map_err(|_| TensorError::Format(format!("rank {} exceeds 255", t.ndim())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[DTYPE_F32, rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| TensorError::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_pdt1<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != DTYPE_F32 {
        return Err(TensorError::Format(format!("unsupported dtype code {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pdt1(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_pdt1(BufReader::new(File::open(path)?))
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_pdt1(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}
