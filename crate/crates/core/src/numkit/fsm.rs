//! FSM1 binary matrix format.
//!
//! Layout: `b"FSM1"`, rows as `u32` LE, cols as `u32` LE, then `rows·cols`
//! IEEE-754 `f64` values, little-endian, row-major.

use std::io::{Read, Write};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSM1";

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::arg("matrix too tall for FSM1"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::arg("matrix too wide for FSM1"))?;
    w.write_all(MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 8);
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format {
            path: Default::default(),
            msg: format!("bad magic {:?}", &header[..4]),
        });
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}
