//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic `NTK1`, `u32` tensor count, then per tensor
//! a `u32` name length, UTF-8 name, `u32` rank, `u64` dims, and the values as
//! `f64`. Names follow the ViT conventions documented in the README, so
//! converted pre-trained weights drop in without renaming.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTK1";

pub type TensorMap = BTreeMap<String, ArrayD<f64>>;

pub fn write(mut out: impl Write, tensors: &TensorMap) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, tensors: &TensorMap) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(file), tensors)
}

fn read_exact<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read(mut input: impl Read) -> Result<TensorMap> {
    let magic = read_exact::<4>(&mut input)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let count = u32::from_le_bytes(read_exact::<4>(&mut input)?) as usize;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact::<4>(&mut input)?) as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        input
            .read_exact(&mut name_bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(read_exact::<4>(&mut input)?) as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for `{name}`")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(read_exact::<8>(&mut input)?) as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(read_exact::<8>(&mut input)?));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Checkpoint(format!("bad shape for `{name}`: {e}")))?;
        tensors.insert(name, tensor);
    }
    Ok(tensors)
}

pub fn read_file(path: &Path) -> Result<TensorMap> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read(std::io::BufReader::new(file))
}
