//! Little-endian binary read/write helpers shared by the model file
//! formats. Every multi-byte value is explicitly little-endian so files
//! round-trip bit-exact across platforms.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_bits().to_le_bytes())?;
    Ok(())
}

pub fn write_f64_slice<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    write_u64(w, vs.len() as u64)?;
    for &v in vs {
        write_f64(w, v)?;
    }
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(f64::from_bits(u64::from_le_bytes(buf)))
}

pub fn read_f64_vec<R: Read>(r: &mut R, expect_len: usize) -> Result<Vec<f64>> {
    let len = read_u64(r)? as usize;
    if len != expect_len {
        return Err(Error::ModelFile(format!(
            "tensor length {len} does not match expected {expect_len}"
        )));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    if &buf != magic {
        return Err(Error::ModelFile(format!(
            "bad magic {:?}, expected {:?}",
            buf,
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::ModelFile("file truncated".into())
    } else {
        Error::Io(e)
    }
}
