//! The ".rt" raster file format used for images, reconstructions, and
//! checkpoint parameters.
//!
//! Layout, all little-endian:
//!   magic "RTEN" (4 bytes) | version u8 = 1 | dtype u8 | ndim u8 |
//!   dims as u32 per axis | payload, row-major.
//!
//! dtype 0 = float32, dtype 1 = uint16. Files are bit-exact across platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RTEN";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U16 = 1,
}

/// In-memory payload of a raster file.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    F32(ArrayD<f32>),
    U16(ArrayD<u16>),
}

impl Raster {
    pub fn dtype(&self) -> Dtype {
        match self {
            Raster::F32(_) => Dtype::F32,
            Raster::U16(_) => Dtype::U16,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Raster::F32(a) => a.shape(),
            Raster::U16(a) => a.shape(),
        }
    }
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let shape = raster.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::shape(format!("too many dims: {}", shape.len())));
    }
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&[VERSION, raster.dtype() as u8, shape.len() as u8])
        .map_err(|e| Error::io(path, e))?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    match raster {
        Raster::F32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
        Raster::U16(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    if head[4] != VERSION {
        return Err(fail(&format!("unsupported version {}", head[4])));
    }
    let dtype = head[5];
    let ndim = head[6] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let len: usize = dims.iter().product();
    match dtype {
        0 => {
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| fail(&format!("shape mismatch: {e}")))?;
            Ok(Raster::F32(arr))
        }
        1 => {
            let mut buf = vec![0u8; len * 2];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let data: Vec<u16> = buf
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| fail(&format!("shape mismatch: {e}")))?;
            Ok(Raster::U16(arr))
        }
        other => Err(fail(&format!("unknown dtype {other}"))),
    }
}
