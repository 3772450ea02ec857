//! Binary tensor container.
//!
//! Layout: magic `RHNT`, `u32` version, `u32` rank, `u64` extents, then the
//! row-major values as little-endian `f32`. All integers are little-endian.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RHNT";
pub const TENSOR_VERSION: u32 = 1;

const MAX_RANK: u32 = 16;

pub fn write_tensor<T: Real, W: Write>(out: &mut W, tensor: &Tensor<T>) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format("truncated container".into()),
        _ => TensorError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_tensor<T: Real, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let magic = read_array::<4, _>(input)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(input)?);
    if version != TENSOR_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(read_array(input)?);
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorError::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut len: usize = 1;
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_array(input)?);
        let d = usize::try_from(d).map_err(|_| TensorError::Format("extent overflow".into()))?;
        len = len
            .checked_mul(d)
            .ok_or_else(|| TensorError::Format("element count overflow".into()))?;
        shape.push(d);
    }
    let mut raw = Vec::new();
    input.take(len as u64 * 4).read_to_end(&mut raw)?;
    if raw.len() != len * 4 {
        return Err(TensorError::Format("truncated container".into()));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data).map_err(|e| TensorError::Format(e.to_string()))
}
