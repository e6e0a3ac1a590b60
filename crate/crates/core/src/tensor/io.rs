//! Tensor wire format: rank (u64), extents (u64 each), then row-major f64
//! data, all little-endian.

use super::Tensor;
use crate::binio::{BinReader, BinWriter};
use crate::error::Result;
use std::io::{Read, Write};

const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 32;

pub fn write_tensor<W: Write>(w: &mut BinWriter<W>, t: &Tensor) -> Result<()> {
    w.u64(t.rank() as u64)?;
    for &e in t.shape() {
        w.u64(e as u64)?;
    }
    w.f64s(t.data())
}

pub fn read_tensor<R: Read>(r: &mut BinReader<R>) -> Result<Tensor> {
    let rank = r.count(MAX_RANK, "tensor rank")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.count(MAX_ELEMENTS, "tensor extent")?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| r.error(format!("tensor shape {shape:?} too large")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    Tensor::from_vec(shape, data)
}
