//! Middlebury `.flo` optical-flow file format: 4-byte magic "PIEH",
//! little-endian 32-bit width and height, then row-major interleaved
//! 32-bit float (u, v) pairs.

use crate::observer::FlowField;
use std::io::{self, Read, Write};

pub const FLO_MAGIC: [u8; 4] = *b"PIEH";

#[derive(Debug, thiserror::Error)]
pub enum FloError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes (expected \"PIEH\")")]
    BadMagic,
    #[error("implausible dimensions {0}x{1}")]
    BadDims(i32, i32),
}

pub fn read_flo<R: Read>(mut r: R) -> Result<FlowField, FloError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FLO_MAGIC {
        return Err(FloError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let width = i32::from_le_bytes(b4);
    r.read_exact(&mut b4)?;
    let height = i32::from_le_bytes(b4);
    if width <= 0 || height <= 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(FloError::BadDims(width, height));
    }
    let (w, h) = (width as usize, height as usize);
    let mut uv = vec![[0.0f32; 2]; w * h];
    let mut buf = vec![0u8; w * 8];
    for row in 0..h {
        r.read_exact(&mut buf)?;
        for col in 0..w {
            let u = f32::from_le_bytes(buf[8 * col..8 * col + 4].try_into().unwrap());
            let v = f32::from_le_bytes(buf[8 * col + 4..8 * col + 8].try_into().unwrap());
            uv[row * w + col] = [u, v];
        }
    }
    Ok(FlowField::from_vectors(w, h, uv))
}

pub fn write_flo<W: Write>(mut w: W, field: &FlowField) -> Result<(), FloError> {
    w.write_all(&FLO_MAGIC)?;
    w.write_all(&(field.width as i32).to_le_bytes())?;
    w.write_all(&(field.height as i32).to_le_bytes())?;
    for uv in field.vectors() {
        w.write_all(&uv[0].to_le_bytes())?;
        w.write_all(&uv[1].to_le_bytes())?;
    }
    Ok(())
}
