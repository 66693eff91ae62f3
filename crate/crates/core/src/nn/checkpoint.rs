//! Named-tensor checkpoint files.
//!
//! Layout (little endian):
//! ```text
//! b"NNCK"  u32 version=1  u32 count
//! count x { u32 name_len, name bytes (utf-8), u32 rank, rank x u32 dim, f32 data }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NNCK";
const VERSION: u32 = 1;

pub fn write_tensors<W: Write, T: Scalar>(w: &mut W, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in t.data() {
            w.write_f32::<LittleEndian>(v.f64() as f32)?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read, T: Scalar>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::c(r.read_f32::<LittleEndian>()? as f64));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_store<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let tensors: Vec<_> = store.iter().map(|(n, t)| (n.to_string(), t)).collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(&mut f, &tensors)?;
    f.flush()?;
    Ok(())
}

/// Loads every tensor of `store` from `path`. The file must contain exactly
/// the store's names with matching shapes.
pub fn load_store<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let tensors = read_tensors::<_, T>(&mut f)?;
    fill_store(store, tensors)
}

pub fn fill_store<T: Scalar>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        store.set(&name, t)?;
    }
    Ok(())
}
