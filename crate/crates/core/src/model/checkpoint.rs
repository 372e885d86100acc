//! Checkpoints: a flat map of named arrays stored as little-endian `f32`,
//! written next to a census JSON file.
//!
//! Layout of `model.ckpt`: magic `CLBCKPT1`, `u32` entry count, then per
//! entry a `u32` name length, UTF-8 name, `u32` rank, `u64` dims and the
//! row-major `f32` payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Layer, Model, KERNEL};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLBCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn split_augmented(w: &nalgebra::DMatrix<f64>, shape: Vec<usize>) -> (NamedArray, NamedArray) {
    let fan_in = w.ncols() - 1;
    let mut weight = Vec::with_capacity(w.nrows() * fan_in);
    for i in 0..w.nrows() {
        weight.extend(w.row(i).iter().take(fan_in).map(|&v| v as f32));
    }
    let bias = w.column(fan_in).iter().map(|&v| v as f32).collect();
    (NamedArray { shape, data: weight }, NamedArray { shape: vec![w.nrows()], data: bias })
}

pub fn model_arrays(model: &Model) -> BTreeMap<String, NamedArray> {
    let mut out = BTreeMap::new();
    for (i, layer) in model.backbone.layers.iter().enumerate() {
        let (w, shape) = match layer {
            Layer::Dense(d) => (&d.weight, vec![d.fan_out(), d.fan_in()]),
            Layer::Conv(c) => (&c.weight, vec![c.out_channels(), c.in_shape[0], KERNEL, KERNEL]),
            _ => continue,
        };
        let (weight, bias) = split_augmented(w, shape);
        out.insert(format!("encoder.{i}.weight"), weight);
        out.insert(format!("encoder.{i}.bias"), bias);
    }
    let h = &model.head.weight;
    let (weight, bias) = split_augmented(h, vec![h.nrows(), h.ncols() - 1]);
    out.insert("head.weight".into(), weight);
    out.insert("head.bias".into(), bias);
    out
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let path = dir.join("model.ckpt");
    let io = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    let arrays = model_arrays(model);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(arrays.len() as u32).map_err(io)?;
    for (name, arr) in &arrays {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(arr.shape.len() as u32).map_err(io)?;
        for &d in &arr.shape {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in &arr.data {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    let census = serde_json::to_string_pretty(&model.census())?;
    let cpath = dir.join("census.json");
    std::fs::write(&cpath, census).map_err(|e| Error::io(cpath.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, NamedArray>> {
    let io = |e| Error::io(path.display().to_string(), e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Serde(format!("{}: not a checkpoint file", path.display())));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| Error::Serde(e.to_string()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)?;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        out.insert(name, NamedArray { shape, data });
    }
    Ok(out)
}
