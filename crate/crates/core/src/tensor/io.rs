//! Binary tensor records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DCLT" | u32 rank | u32 extent × rank | f32 × product(extents)
//! ```

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DCLT";

/// Upper bound on elements in one record; guards allocations on corrupt headers.
const MAX_ELEMENTS: usize = 1 << 28;

pub fn write_tensor<T: Real, W: Write>(out: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing tensor record: {e}")))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {shape:?}")))?;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor payload for shape {shape:?}: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"DCLT");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn truncation_and_bad_magic_fail() {
        let t = Tensor::<f32>::zeros(&[3, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor::<f32, _>(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_tensor::<f32, _>(&mut &buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn f32_records_round_trip_bit_exactly(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3fff_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f32> = read_tensor(&mut &buf[..]).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
