//! Versioned binary checkpoints for module parameters and buffers.
//!
//! Layout: an 8-byte magic, a length-prefixed JSON header listing every
//! tensor (name, shape, parameter or buffer) plus caller metadata, then the
//! tensor payloads as little-endian f64 in header order. Loading requires an
//! exact match between the file's tensor listing and the target module.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{MpcnError, Result};
use crate::nn::Module;

const MAGIC: &[u8; 8] = b"MPCNCKP1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

fn collect(module: &mut impl Module) -> Vec<(String, Vec<usize>, String, Vec<f64>)> {
    let mut out = Vec::new();
    module.visit_params(&mut |name, p| {
        out.push((
            name.to_string(),
            p.value.shape().to_vec(),
            "param".to_string(),
            p.value.iter().copied().collect(),
        ));
    });
    module.visit_buffers(&mut |name, b| {
        out.push((
            name.to_string(),
            b.shape().to_vec(),
            "buffer".to_string(),
            b.iter().copied().collect(),
        ));
    });
    out
}

/// Serializes every parameter and buffer of `module` with caller metadata.
pub fn write_module(
    module: &mut impl Module,
    meta: &serde_json::Value,
    mut w: impl Write,
) -> Result<()> {
    let tensors = collect(module);
    let header = Header {
        version: 1,
        meta: meta.clone(),
        entries: tensors
            .iter()
            .map(|(name, shape, kind, _)| Entry {
                name: name.clone(),
                shape: shape.clone(),
                kind: kind.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| MpcnError::Checkpoint(format!("header encode: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for (_, _, _, data) in &tensors {
        for &v in data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Restores a checkpoint into `module`, returning the stored metadata.
/// The module must declare exactly the tensors the file holds.
pub fn read_module(module: &mut impl Module, mut r: impl Read) -> Result<serde_json::Value> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| MpcnError::Checkpoint(format!("magic: {e}")))?;
    if &magic != MAGIC {
        return Err(MpcnError::Checkpoint(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    if header_len > 1 << 26 {
        return Err(MpcnError::Checkpoint(format!(
            "header length {header_len} is implausible"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| MpcnError::Checkpoint(format!("header decode: {e}")))?;
    if header.version != 1 {
        return Err(MpcnError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut tensors: BTreeMap<(String, String), ArrayD<f64>> = BTreeMap::new();
    for entry in &header.entries {
        let n: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; n];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(|e| {
                MpcnError::Checkpoint(format!("payload for {} truncated: {e}", entry.name))
            })?;
        }
        let arr = ArrayD::from_shape_vec(entry.shape.clone(), data)
            .map_err(|e| MpcnError::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        if tensors
            .insert((entry.kind.clone(), entry.name.clone()), arr)
            .is_some()
        {
            return Err(MpcnError::Checkpoint(format!(
                "duplicate tensor {} in checkpoint",
                entry.name
            )));
        }
    }

    let mut problems: Vec<String> = Vec::new();
    module.visit_params(&mut |name, mut p| {
        match tensors.remove(&("param".to_string(), name.to_string())) {
            Some(arr) if arr.shape() == p.value.shape() => p.value.assign(&arr),
            Some(arr) => problems.push(format!(
                "param {name}: checkpoint shape {:?}, model shape {:?}",
                arr.shape(),
                p.value.shape()
            )),
            None => problems.push(format!("param {name} missing from checkpoint")),
        }
    });
    module.visit_buffers(&mut |name, mut b| {
        match tensors.remove(&("buffer".to_string(), name.to_string())) {
            Some(arr) if arr.shape() == b.shape() => b.assign(&arr),
            Some(arr) => problems.push(format!(
                "buffer {name}: checkpoint shape {:?}, model shape {:?}",
                arr.shape(),
                b.shape()
            )),
            None => problems.push(format!("buffer {name} missing from checkpoint")),
        }
    });
    for ((kind, name), _) in &tensors {
        problems.push(format!("checkpoint {kind} {name} not present in model"));
    }
    if !problems.is_empty() {
        return Err(MpcnError::Checkpoint(problems.join("; ")));
    }
    Ok(header.meta)
}

pub fn save_module(module: &mut impl Module, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| MpcnError::Checkpoint(format!("cannot create {}: {e}", path.display())))?;
    write_module(module, meta, BufWriter::new(file))
}

pub fn load_module(module: &mut impl Module, path: &Path) -> Result<serde_json::Value> {
    let file = File::open(path)
        .map_err(|e| MpcnError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_module(module, BufReader::new(file))
}
