//! Binary checkpoint format: magic "WKWS", version u16, tensor count u32;
//! per tensor a length-prefixed UTF-8 name, rank u8, u32 dims, and float32
//! little-endian data. Running batch-norm statistics are stored alongside
//! the trainable tensors so checkpoint averaging covers both.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use super::{ConvBn, ModelArch, ModelParams, ResBlock};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WKWS";
pub const VERSION: u16 = 1;

/// All tensors of a model, keyed by name (trainable + running stats).
pub fn named_tensors(params: &ModelParams<f32>) -> Vec<(String, ArrayD<f32>)> {
    let mut out = Vec::new();
    let push_cb = |out: &mut Vec<(String, ArrayD<f32>)>, prefix: &str, cb: &ConvBn<f32>| {
        out.push((format!("{prefix}.w"), cb.w.clone().into_dyn()));
        out.push((format!("{prefix}.bn.gamma"), cb.gamma.clone().into_dyn()));
        out.push((format!("{prefix}.bn.beta"), cb.beta.clone().into_dyn()));
        out.push((format!("{prefix}.bn.run_mean"), cb.run_mean.clone().into_dyn()));
        out.push((format!("{prefix}.bn.run_var"), cb.run_var.clone().into_dyn()));
    };
    push_cb(&mut out, "stem", &params.stem);
    for (i, b) in params.blocks.iter().enumerate() {
        push_cb(&mut out, &format!("block{i}.conv1"), &b.conv1);
        push_cb(&mut out, &format!("block{i}.conv2"), &b.conv2);
        push_cb(&mut out, &format!("block{i}.shortcut"), &b.shortcut);
    }
    out.push(("fc.w".into(), params.fc_w.clone().into_dyn()));
    out.push(("fc.b".into(), params.fc_b.clone().into_dyn()));
    out
}

pub fn save_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let tensors = named_tensors(params);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.as_slice().expect("standard layout") {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_tensor_map(bytes: &[u8]) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic (not a WKWS checkpoint)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (want {VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        map.insert(name, arr);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(map)
}

fn get1(map: &BTreeMap<String, ArrayD<f32>>, name: &str) -> Result<Array1<f32>> {
    map.get(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::Format(format!("{name}: expected rank 1")))
}

fn get2(map: &BTreeMap<String, ArrayD<f32>>, name: &str) -> Result<Array2<f32>> {
    map.get(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::Format(format!("{name}: expected rank 2")))
}

fn get3(map: &BTreeMap<String, ArrayD<f32>>, name: &str) -> Result<Array3<f32>> {
    map.get(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::Format(format!("{name}: expected rank 3")))
}

fn load_cb(map: &BTreeMap<String, ArrayD<f32>>, prefix: &str) -> Result<ConvBn<f32>> {
    Ok(ConvBn {
        w: get3(map, &format!("{prefix}.w"))?,
        gamma: get1(map, &format!("{prefix}.bn.gamma"))?,
        beta: get1(map, &format!("{prefix}.bn.beta"))?,
        run_mean: get1(map, &format!("{prefix}.bn.run_mean"))?,
        run_var: get1(map, &format!("{prefix}.bn.run_var"))?,
    })
}

/// Rebuild a model from checkpoint bytes; the architecture is inferred
/// from tensor names and shapes.
pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let map = read_tensor_map(bytes)?;
    let stem = load_cb(&map, "stem")?;
    let mut blocks = Vec::new();
    let mut i = 0;
    while map.contains_key(&format!("block{i}.conv1.w")) {
        blocks.push(ResBlock {
            conv1: load_cb(&map, &format!("block{i}.conv1"))?,
            conv2: load_cb(&map, &format!("block{i}.conv2"))?,
            shortcut: load_cb(&map, &format!("block{i}.shortcut"))?,
        });
        i += 1;
    }
    let fc_w = get2(&map, "fc.w")?;
    let fc_b = get1(&map, "fc.b")?;
    let arch = ModelArch {
        n_mels: stem.w.dim().1,
        stem_channels: stem.w.dim().0,
        block_channels: blocks.iter().map(|b| b.conv1.w.dim().0).collect(),
        stem_kernel: stem.w.dim().2,
        block_kernel: blocks
            .first()
            .map(|b| b.conv1.w.dim().2)
            .unwrap_or(9),
        n_classes: fc_b.len(),
    };
    let expected_in = blocks
        .last()
        .map(|b| b.conv1.w.dim().0)
        .unwrap_or(arch.stem_channels);
    if fc_w.dim().1 != expected_in {
        return Err(Error::Format(format!(
            "fc.w input dim {} does not match last block channels {expected_in}",
            fc_w.dim().1
        )));
    }
    Ok(ModelParams {
        arch,
        stem,
        blocks,
        fc_w,
        fc_b,
    })
}

pub fn save_checkpoint_file(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, save_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint_file(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}
