//! Binary container for named f64 tensors (weights, optimizer state).
//!
//! Layout, all little-endian:
//! ```text
//! magic "CAMT" | version u32 | count u32
//! repeat count times:
//!   name_len u16 | name utf-8 | ndim u8 | dim u32 * ndim | data f64 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CAMT";
const VERSION: u32 = 1;

pub fn write_tensors(path: &Path, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<fs::File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    emit(&mut w, MAGIC)?;
    emit(&mut w, &VERSION.to_le_bytes())?;
    emit(&mut w, &(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("tensor name too long: {name}"),
            });
        }
        emit(&mut w, &(name_bytes.len() as u16).to_le_bytes())?;
        emit(&mut w, name_bytes)?;
        let dims = t.shape();
        if dims.len() > u8::MAX as usize {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("tensor {name} has too many dims"),
            });
        }
        emit(&mut w, &[dims.len() as u8])?;
        for &d in dims {
            emit(&mut w, &(d as u32).to_le_bytes())?;
        }
        // Standard layout is guaranteed for owned arrays we build, but be
        // defensive about views that were transposed before storage.
        let data: Vec<f64> = t.iter().copied().collect();
        for v in data {
            emit(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("not a tensor blob (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(format!("unsupported blob version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut out = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(|e| Error::io(path, e))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad("tensor name is not valid utf-8".into()))?;
        let mut ndim_buf = [0u8; 1];
        r.read_exact(&mut ndim_buf).map_err(|e| Error::io(path, e))?;
        let ndim = ndim_buf[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0f64; len];
        let mut f64buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut f64buf).map_err(|e| Error::io(path, e))?;
            *v = f64::from_le_bytes(f64buf);
        }
        let arr = ArrayD::from_shape_vec(dims, data)
            .map_err(|e| bad(format!("tensor {name}: {e}")))?;
        if out.insert(name.clone(), arr).is_some() {
            return Err(bad(format!("duplicate tensor name: {name}")));
        }
    }
    Ok(out)
}

/// SHA-256 of a file's bytes, lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
