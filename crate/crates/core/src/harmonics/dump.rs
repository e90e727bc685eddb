//! Little-endian flat array files for cross-checking covariance matrices and
//! coefficient series with external tools.
//!
//! Layout: 8-byte magic `QNTKFLT1`, then `d`, `m`, `K`, `rows`, `cols` as
//! `u64`, then `rows * cols` row-major `f64` values.

use std::io::{Read, Write};

use super::{GegenbauerSeries, Provenance, SigmaMatrix};
use crate::error::{Error, Result};

pub const FLAT_MAGIC: &[u8; 8] = b"QNTKFLT1";

#[derive(Debug, Clone, PartialEq)]
pub struct FlatArray {
    pub d: u64,
    pub m: u64,
    pub k: u64,
    pub rows: u64,
    pub cols: u64,
    pub data: Vec<f64>,
}

impl From<&SigmaMatrix> for FlatArray {
    fn from(s: &SigmaMatrix) -> Self {
        let k = match s.provenance {
            Provenance::Analytic { truncation, .. } => truncation as u64,
            Provenance::MonteCarlo { .. } => 0,
        };
        let n = s.dim() as u64;
        FlatArray {
            d: s.d as u64,
            m: s.m as u64,
            k,
            rows: n,
            cols: n,
            data: s.matrix.iter().copied().collect(),
        }
    }
}

impl From<&GegenbauerSeries> for FlatArray {
    fn from(s: &GegenbauerSeries) -> Self {
        FlatArray {
            d: s.d as u64,
            m: 0,
            k: s.truncation() as u64,
            rows: 1,
            cols: s.coeffs.len() as u64,
            data: s.coeffs.clone(),
        }
    }
}

pub fn write_flat(out: &mut impl Write, arr: &FlatArray) -> Result<()> {
    out.write_all(FLAT_MAGIC)?;
    for v in [arr.d, arr.m, arr.k, arr.rows, arr.cols] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &arr.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flat(input: &mut impl Read) -> Result<FlatArray> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != FLAT_MAGIC {
        return Err(Error::InvalidArgument("bad magic in flat array file".into()));
    }
    let mut word = [0u8; 8];
    let mut header = [0u64; 5];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word);
    }
    let [d, m, k, rows, cols] = header;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Range("flat array size overflows".into()))?;
    let mut data = Vec::with_capacity(count as usize);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Ok(FlatArray { d, m, k, rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(d in 0u64..50, m in 0u64..50, k in 0u64..9, data in proptest::collection::vec(-1e6f64..1e6, 0..40)) {
            let arr = FlatArray { d, m, k, rows: 1, cols: data.len() as u64, data };
            let mut buf = Vec::new();
            write_flat(&mut buf, &arr).unwrap();
            prop_assert_eq!(buf.len(), 48 + 8 * arr.data.len());
            let back = read_flat(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, arr);
        }
    }

    #[test]
    fn header_is_little_endian() {
        let arr = FlatArray { d: 3, m: 2, k: 1, rows: 1, cols: 1, data: vec![1.5] };
        let mut buf = Vec::new();
        write_flat(&mut buf, &arr).unwrap();
        assert_eq!(&buf[..8], FLAT_MAGIC);
        assert_eq!(buf[8], 3);
        assert_eq!(&buf[40..48], &1u64.to_le_bytes());
        assert_eq!(&buf[48..], &1.5f64.to_le_bytes());
        assert!(read_flat(&mut &b"NOTMAGIC"[..]).is_err());
    }
}
