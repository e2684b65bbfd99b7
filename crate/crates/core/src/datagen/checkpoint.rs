//! Binary model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! magic `TAGS`, version, entry count, then per entry the name length and
//! UTF-8 name, rank, each dimension, and the values as little-endian `f64`.
//! The first entry, `meta.config`, holds the model hyperparameters so a
//! checkpoint can be loaded without side information.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MatchModel, ModelConfig};
use crate::nn::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TAGS";
pub const CHECKPOINT_VERSION: u32 = 1;
const META: &str = "meta.config";

fn config_values(c: &ModelConfig) -> Vec<f64> {
    [
        c.d_model,
        c.layers,
        c.heads,
        c.regions,
        c.d_img,
        c.vocab_size,
        c.max_len,
        c.ffn_hidden,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect()
}

fn config_from_values(v: &[f64]) -> Result<ModelConfig> {
    if v.len() != 8 || v.iter().any(|x| x.fract() != 0.0 || *x < 1.0 || *x > u32::MAX as f64) {
        return Err(Error::Checkpoint(format!("malformed {META} entry")));
    }
    let u = |i: usize| v[i] as usize;
    Ok(ModelConfig {
        d_model: u(0),
        layers: u(1),
        heads: u(2),
        regions: u(3),
        d_img: u(4),
        vocab_size: u(5),
        max_len: u(6),
        ffn_hidden: u(7),
    })
}

fn write_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_entry(out: &mut impl Write, name: &str, value: &Tensor) -> Result<()> {
    write_u32(out, name.len())?;
    out.write_all(name.as_bytes())?;
    write_u32(out, value.shape().len())?;
    for &d in value.shape() {
        write_u32(out, d)?;
    }
    for &x in value.data() {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &MatchModel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_u32(&mut out, model.params().len() + 1)?;
    let meta = config_values(model.config());
    write_entry(&mut out, META, &Tensor::vector(meta)?)?;
    for (_, p) in model.params().iter() {
        write_entry(&mut out, &p.name, &p.value)?;
    }
    out.flush()?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(input: &mut impl Read) -> Result<usize> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

// Guards allocations against corrupt length fields.
const MAX_ENTRY_VALUES: usize = 1 << 28;

fn read_entry(input: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(input)?;
    if name_len > 4096 {
        return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    input.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
    let rank = read_u32(input)?;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(input)).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ENTRY_VALUES)
        .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible shape {shape:?}")))?;
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    Ok((name, tensor))
}

pub fn load_checkpoint(path: &Path) -> Result<MatchModel> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    if count == 0 {
        return Err(Error::Checkpoint(format!("missing {META} entry")));
    }
    let (name, meta) = read_entry(&mut input)?;
    if name != META {
        return Err(Error::Checkpoint(format!("first entry is {name}, expected {META}")));
    }
    let config = config_from_values(meta.data())?;
    let mut params = ParamSet::new();
    for _ in 1..count {
        let (name, value) = read_entry(&mut input)?;
        if params.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.add(name, value);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    MatchModel::from_params(config, params)
}
