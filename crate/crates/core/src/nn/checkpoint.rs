//! Binary checkpoint format: the full named-parameter inventory plus the
//! flat config text that shaped the model.
//!
//! Values are stored as little-endian f64, so a save/load round trip is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::store::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FNDL";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, config_text: &str, store: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let cfg = config_text.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(cfg).map_err(io_err)?;
    w.write_all(&(store.len() as u64).to_le_bytes()).map_err(io_err)?;
    for entry in store.entries() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[entry.trainable as u8]).map_err(io_err)?;
        w.write_all(&(entry.value.shape().len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &dim in entry.value.shape() {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in entry.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<(String, bool, Tensor)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);
    let path_str = path.display().to_string();

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::format(&path_str, "not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let cfg_len = read_u64(&mut r, path)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(io_err)?;
    let config_text = String::from_utf8(cfg)
        .map_err(|_| Error::format(&path_str, "config block is not valid utf-8"))?;

    let count = read_u64(&mut r, path)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(&path_str, "parameter name is not valid utf-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io_err)?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(io_err)?;
            *v = f64::from_le_bytes(buf);
        }
        params.push((name, flag[0] != 0, Tensor::from_vec(&shape, data)?));
    }
    Ok(Checkpoint {
        config_text,
        params,
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}
