//! Quantized checkpoints (format version 2).
//!
//! After the common header come the mode tag and KV scaling tag, then every
//! tensor in layout order with a one-byte encoding tag:
//!
//! ```text
//! 0  f32      n × f32
//! 1  int8     u32 axis, channels × f32 scales, n × i8
//! 2  fp8      f32 scale, n × u8 E4M3 patterns
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    Fp8Tensor, KvScaling, Model, Payload, QuantMode, QuantTensorI8, QuantizedParameterSet,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::{
    read_f32s, read_header, read_params_body, read_tensor_header, read_u32, write_f32s,
    write_header, write_params, write_tensor_header, write_u32, VERSION_QUANTIZED,
};
use crate::model::params::Layout;

const ENC_F32: u8 = 0;
const ENC_INT8: u8 = 1;
const ENC_FP8: u8 = 2;

pub fn write_quantized<W: Write>(w: &mut W, q: &QuantizedParameterSet) -> Result<()> {
    write_header(w, VERSION_QUANTIZED, q.config())?;
    write_u32(w, q.mode().tag())?;
    write_u32(w, q.kv_scaling().tag())?;
    let layout = q.dequantize().layout();
    write_u32(w, layout.specs.len() as u32)?;
    for (spec, p) in layout.specs.iter().zip(q.payloads()) {
        write_tensor_header(w, &spec.name, &spec.shape)?;
        match p {
            Payload::F32(v) => {
                w.write_all(&[ENC_F32])?;
                write_f32s(w, v)?;
            }
            Payload::Int8(t) => {
                w.write_all(&[ENC_INT8])?;
                write_u32(w, t.axis as u32)?;
                write_f32s(w, &t.scales)?;
                let bytes: Vec<u8> = t.values.iter().map(|&v| v as u8).collect();
                w.write_all(&bytes)?;
            }
            Payload::Fp8(t) => {
                w.write_all(&[ENC_FP8])?;
                write_f32s(w, &[t.scale])?;
                w.write_all(&t.bits)?;
            }
        }
    }
    Ok(())
}

fn read_quantized_body<R: Read>(
    r: &mut R,
    config: crate::model::params::ModelConfig,
) -> Result<QuantizedParameterSet> {
    let mode = QuantMode::from_tag(read_u32(r)?)?;
    let kv_scaling = KvScaling::from_tag(read_u32(r)?)?;
    let layout = Layout::new(&config);
    let count = read_u32(r)? as usize;
    if count != layout.specs.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {count}",
            layout.specs.len()
        )));
    }
    let mut payloads = Vec::with_capacity(count);
    for spec in &layout.specs {
        read_tensor_header(r, &spec.name, &spec.shape)?;
        let n = spec.range.len();
        let rows = spec.shape[0];
        let cols = spec.shape.get(1).copied().unwrap_or(1);
        let mut tag = [0u8];
        r.read_exact(&mut tag)?;
        let p = match tag[0] {
            ENC_F32 => {
                let v = read_f32s(r, n)?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "tensor {} has non-finite values",
                        spec.name
                    )));
                }
                Payload::F32(v)
            }
            ENC_INT8 => {
                let axis = read_u32(r)? as usize;
                if axis > 1 {
                    return Err(Error::Format(format!(
                        "tensor {}: bad channel axis {axis}",
                        spec.name
                    )));
                }
                let scales = read_f32s(r, if axis == 0 { rows } else { cols })?;
                if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::Numeric(format!(
                        "tensor {} has an invalid scale",
                        spec.name
                    )));
                }
                let mut bytes = vec![0u8; n];
                r.read_exact(&mut bytes)?;
                let values: Vec<i8> = bytes.into_iter().map(|b| b as i8).collect();
                if values.contains(&i8::MIN) {
                    return Err(Error::Format(format!("tensor {} holds -128", spec.name)));
                }
                Payload::Int8(QuantTensorI8 {
                    values,
                    scales,
                    rows,
                    cols,
                    axis,
                })
            }
            ENC_FP8 => {
                let scale = read_f32s(r, 1)?[0];
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::Numeric(format!(
                        "tensor {} has an invalid scale",
                        spec.name
                    )));
                }
                let mut bits = vec![0u8; n];
                r.read_exact(&mut bits)?;
                Payload::Fp8(Fp8Tensor {
                    bits,
                    scale,
                    rows,
                    cols,
                })
            }
            t => {
                return Err(Error::Format(format!(
                    "tensor {}: unknown encoding {t}",
                    spec.name
                )))
            }
        };
        payloads.push(p);
    }
    QuantizedParameterSet::from_payloads(config, mode, kv_scaling, payloads)
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    let (version, config) = read_header(r)?;
    if version == VERSION_QUANTIZED {
        Ok(Model::Quantized(read_quantized_body(r, config)?))
    } else {
        Ok(Model::Full(read_params_body(r, config)?))
    }
}

pub fn write_model<W: Write>(w: &mut W, m: &Model) -> Result<()> {
    match m {
        Model::Full(p) => write_params(w, p),
        Model::Quantized(q) => write_quantized(w, q),
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}

pub fn save_model(path: impl AsRef<Path>, m: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, m)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ModelConfig, ParameterSet};

    #[test]
    fn every_mode_round_trips() {
        let mut c = ModelConfig::new(1, 2, 8, 30, 12);
        c.tie_output_head = false;
        let p = ParameterSet::init(c, 5).unwrap();
        for mode in QuantMode::ALL {
            let m = Model::Full(p.clone())
                .to_mode(mode, KvScaling::PerHead)
                .unwrap();
            let mut buf = Vec::new();
            write_model(&mut buf, &m).unwrap();
            let back = read_model(&mut buf.as_slice()).unwrap();
            assert_eq!(back.params().as_slice(), m.params().as_slice());
            match (&m, &back) {
                (Model::Quantized(a), Model::Quantized(b)) => {
                    assert_eq!(a.payloads(), b.payloads());
                    assert_eq!(a.mode(), b.mode());
                    assert_eq!(b.kv_scaling(), KvScaling::PerHead);
                }
                (Model::Full(_), Model::Full(_)) => {}
                _ => panic!("mode {mode} changed representation"),
            }
        }
    }

    #[test]
    fn bad_encoding_tag_is_rejected() {
        let p = ParameterSet::init(ModelConfig::new(1, 2, 8, 30, 12), 5).unwrap();
        let m = Model::Full(p)
            .to_mode(QuantMode::Int8WeightOnly, KvScaling::PerToken)
            .unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        // header 36 bytes, mode + kv 8, count 4, then "tok_emb" header 4+7+4+8
        let tag_at = 36 + 8 + 4 + 4 + 7 + 4 + 8;
        assert_eq!(buf[tag_at], ENC_INT8);
        buf[tag_at] = 9;
        assert!(matches!(
            read_model(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
