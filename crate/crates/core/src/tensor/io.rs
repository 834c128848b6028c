//! MCT1 binary container: `b"MCT1"`, rank as u32 LE, each extent as u32 LE,
//! then the row-major data as f64 LE.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MCT1_MAGIC: &[u8; 4] = b"MCT1";

pub fn write_mct1<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    w.write_all(MCT1_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mct1<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MCT1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}
