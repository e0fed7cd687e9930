//! Binary checkpoint format.
//!
//! ```text
//! magic    b"QDGS"
//! version  u32            1 = f32 parameters, 2 = quantized parameters
//! config   7 × u32        n_layers n_heads hidden vocab max_seq_len ffn tie(0/1)
//! [v2]     u32 mode tag, u32 kv scaling axis
//! count    u32            number of tensors, in `Layout` order
//! tensor   u32 name_len, name bytes, u32 rank, rank × u32 dims, payload
//! ```
//!
//! Version 1 payloads are little-endian f32. Version 2 payloads start with
//! a one-byte encoding tag (see `quant::store`). All integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::params::{Layout, ModelConfig, ParameterSet};

pub const MAGIC: &[u8; 4] = b"QDGS";
pub const VERSION_F32: u32 = 1;
pub const VERSION_QUANTIZED: u32 = 2;

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_header<W: Write>(w: &mut W, version: u32, c: &ModelConfig) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, version)?;
    for v in [
        c.n_layers,
        c.n_heads,
        c.hidden_size,
        c.vocab_size,
        c.max_seq_len,
        c.ffn_hidden,
    ] {
        write_u32(w, v as u32)?;
    }
    write_u32(w, c.tie_output_head as u32)
}

/// Reads magic, version and config. Returns the version.
pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<(u32, ModelConfig)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION_F32 && version != VERSION_QUANTIZED {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut f = [0usize; 6];
    for v in f.iter_mut() {
        *v = read_u32(r)? as usize;
    }
    let tie = match read_u32(r)? {
        0 => false,
        1 => true,
        t => return Err(Error::Format(format!("bad tie flag {t}"))),
    };
    let config = ModelConfig {
        n_layers: f[0],
        n_heads: f[1],
        hidden_size: f[2],
        vocab_size: f[3],
        max_seq_len: f[4],
        ffn_hidden: f[5],
        tie_output_head: tie,
    };
    config.validate()?;
    Ok((version, config))
}

pub(crate) fn write_tensor_header<W: Write>(w: &mut W, name: &str, shape: &[usize]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u32(w, d as u32)?;
    }
    Ok(())
}

/// Reads a tensor header and checks it against the expected name and shape.
pub(crate) fn read_tensor_header<R: Read>(r: &mut R, name: &str, shape: &[usize]) -> Result<()> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::Format(format!(
            "tensor name length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let got =
        String::from_utf8(buf).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    if got != name {
        return Err(Error::Format(format!(
            "expected tensor {name}, found {got}"
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!(
            "tensor {name} has implausible rank {rank}"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    if dims != shape {
        return Err(Error::Shape(format!(
            "tensor {name}: file shape {dims:?}, config shape {shape:?}"
        )));
    }
    Ok(())
}

pub fn write_params<W: Write>(w: &mut W, p: &ParameterSet) -> Result<()> {
    write_header(w, VERSION_F32, p.config())?;
    let layout = p.layout();
    write_u32(w, layout.specs.len() as u32)?;
    for spec in &layout.specs {
        write_tensor_header(w, &spec.name, &spec.shape)?;
        write_f32s(w, p.get(&spec.range))?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParameterSet> {
    let (version, config) = read_header(r)?;
    if version != VERSION_F32 {
        return Err(Error::Format(
            "checkpoint is quantized; load it as a Model".into(),
        ));
    }
    read_params_body(r, config)
}

pub(crate) fn read_params_body<R: Read>(r: &mut R, config: ModelConfig) -> Result<ParameterSet> {
    let layout = Layout::new(&config);
    let count = read_u32(r)? as usize;
    if count != layout.specs.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {count}",
            layout.specs.len()
        )));
    }
    let mut data = Vec::with_capacity(layout.total);
    for spec in &layout.specs {
        read_tensor_header(r, &spec.name, &spec.shape)?;
        let t = read_f32s(r, spec.range.len())?;
        if let Some(bad) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "tensor {} has a non-finite value at {bad}",
                spec.name
            )));
        }
        data.extend(t);
    }
    ParameterSet::from_vec(config, data)
}

pub fn save(path: impl AsRef<Path>, p: &ParameterSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_params(&mut r)
}

/// Reads only the version tag of a checkpoint file.
pub fn peek_version(path: impl AsRef<Path>) -> Result<u32> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_header(&mut r)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ParameterSet {
        let mut c = ModelConfig::new(2, 2, 8, 20, 10);
        c.tie_output_head = false;
        ParameterSet::init(c, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = tiny();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let q = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(p.config(), q.config());
        assert_eq!(p.as_slice(), q.as_slice());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = tiny();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_params(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_params(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));

        // hidden size 8 → 16 makes every tensor shape disagree with the file
        let mut bad = buf.clone();
        bad[16] = 16;
        assert!(read_params(&mut bad.as_slice()).is_err());

        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_params(&mut &short[..]), Err(Error::Io(_))));
    }
}
