//! Checkpoint archive.
//!
//! Layout (all integers little-endian):
//!   magic            8 bytes  b"HGCKPT1\n"
//!   header_len       u32
//!   header           JSON: {"version":1, "config":{...},
//!                           "params":[{"name":..., "shape":[...]}, ...]}
//!   payloads         per param, header order: numel x f64 LE
//!
//! Parameter values are written in the collection order of the model, keyed
//! by name. Loading into a model requires an exact name/shape match.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameter;

pub const MAGIC: &[u8; 8] = b"HGCKPT1\n";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    config: &C,
    params: &[Parameter],
) -> Result<()> {
    let header = Header {
        version: VERSION,
        config: serde_json::to_value(config)
            .map_err(|e| Error::Format(format!("checkpoint: config serialization: {e}")))?,
        params: params
            .iter()
            .map(|p| ParamMeta { name: p.name.clone(), shape: p.t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint: header serialization: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for p in params {
        for v in p.t.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw read: the stored config plus (name, shape, values) triples.
pub fn read_checkpoint<C: DeserializeOwned>(
    path: &Path,
) -> Result<(C, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "checkpoint: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut len4 = [0u8; 4];
    read_exact(&mut r, &mut len4, "header length")?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbytes = vec![0u8; hlen];
    read_exact(&mut r, &mut hbytes, "header")?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::Format(format!("checkpoint: header parse: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint: version {} unsupported, expected {VERSION}",
            header.version
        )));
    }
    let config: C = serde_json::from_value(header.config)
        .map_err(|e| Error::Format(format!("checkpoint: config parse: {e}")))?;
    let mut out = Vec::with_capacity(header.params.len());
    let mut buf8 = [0u8; 8];
    for m in header.params {
        let n: usize = m.shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact(&mut r, &mut buf8, &format!("payload of {}", m.name))?;
            vals.push(f64::from_le_bytes(buf8));
        }
        out.push((m.name, m.shape, vals));
    }
    Ok((config, out))
}

/// Loads values into an existing parameter set; names and shapes must match
/// the archive exactly (no missing, no extra).
pub fn load_into<C: DeserializeOwned>(path: &Path, params: &[Parameter]) -> Result<C> {
    let (config, stored) = read_checkpoint::<C>(path)?;
    if stored.len() != params.len() {
        return Err(Error::Config(format!(
            "checkpoint: archive has {} parameters, model has {}",
            stored.len(),
            params.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &Parameter> =
        params.iter().map(|p| (p.name.as_str(), p)).collect();
    for (name, shape, vals) in &stored {
        let p = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Config(format!("checkpoint: archive parameter {name} not in model"))
        })?;
        if p.t.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint: {name} has shape {:?} in archive, {:?} in model",
                shape,
                p.t.shape()
            )));
        }
        p.t.set_data(vals);
    }
    Ok(config)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("checkpoint: truncated while reading {what}: {e}")))
}
