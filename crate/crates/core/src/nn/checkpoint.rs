//! Binary checkpoint format.
//!
//! ```text
//! "IGAM"  u16 version (LE)
//! repeated until EOF:
//!   u32 name_len, name (UTF-8), u32 rank, rank x u32 dims, prod(dims) x f64 (LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Model, Param};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"IGAM";
const VERSION: u16 = 1;

pub fn write_checkpoint<T: Real>(model: &Model<T>, out: impl Write) -> Result<()> {
    write_params(model.params().iter(), out)
}

/// Same format for a loose set of parameters (an input adapter, say).
pub fn write_params<'a, T: Real + 'a>(params: impl IntoIterator<Item = &'a Param<T>>, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for p in params {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.shape().len() as u32).to_le_bytes())?;
        for &d in p.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value().data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads checkpoint bytes into `model`, whose architecture must already
/// match: every record must name an existing parameter with the same shape,
/// and every parameter must be present. Freeze flags are left untouched.
pub fn read_checkpoint<T: Real>(model: &mut Model<T>, mut input: impl Read) -> Result<()> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut seen = vec![false; model.params().len()];
    while c.pos < buf.len() {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?;
        let data: Vec<T> = payload
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let idx = model
            .params()
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if model.params()[idx].shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {dims:?}, architecture expects {:?}",
                model.params()[idx].shape()
            )));
        }
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        model.params_mut()[idx].set(data)?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!("missing tensor `{}`", model.params()[i].name)));
    }
    Ok(())
}

pub fn load_checkpoint<T: Real>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(model, std::io::BufReader::new(f))
}
