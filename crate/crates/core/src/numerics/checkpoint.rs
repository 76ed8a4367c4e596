//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `manifest.json`, which lists tensor
//! names and shapes in alphabetical order plus caller-supplied metadata, and
//! `params.bin`, the tensor values as little-endian f64 words concatenated
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamEntry, ParamStore};
use crate::numerics::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "aircast-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    params: Vec<ParamSpec>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
}

/// Write `store` (and optional metadata) into directory `dir`.
pub fn save(dir: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut specs = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_values() * 8);
    for (name, tensor) in store.iter() {
        specs.push(ParamSpec { name: name.to_string(), shape: tensor.shape().to_vec() });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        step: store.step(),
        params: specs,
        meta,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(())
}

/// Read a checkpoint directory back into a parameter store and its metadata.
/// Optimizer moments are reset; the step counter is restored.
pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", manifest_path.display())))?;
    let manifest = parse_manifest(&json)?;
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let store = assemble(&manifest, &blob)?;
    Ok((store, manifest.meta))
}

fn parse_manifest(json: &str) -> Result<Manifest> {
    let manifest: Manifest =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Parse(format!("unexpected checkpoint format {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let mut prev: Option<&str> = None;
    for spec in &manifest.params {
        if let Some(p) = prev {
            if spec.name.as_str() <= p {
                return Err(Error::Parse(format!(
                    "checkpoint params not in strict alphabetical order at {:?}",
                    spec.name
                )));
            }
        }
        prev = Some(&spec.name);
    }
    Ok(manifest)
}

fn assemble(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    let total: usize = manifest
        .params
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 8 {
        return Err(Error::Parse(format!(
            "checkpoint blob holds {} bytes, manifest expects {}",
            blob.len(),
            total * 8
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    for spec in &manifest.params {
        let n: usize = spec.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = (offset + i) * 8;
            let word: [u8; 8] = blob[start..start + 8].try_into().expect("length checked");
            data.push(f64::from_le_bytes(word));
        }
        offset += n;
        let tensor = Tensor::new(spec.shape.clone(), data)?;
        tensor
            .check_finite("checkpoint")
            .map_err(|_| Error::Parse(format!("non-finite values in checkpoint tensor {:?}", spec.name)))?;
        store
            .raw_entries_mut()
            .insert(spec.name.clone(), ParamEntry::from_value(tensor));
    }
    store.set_step(manifest.step);
    Ok(store)
}

/// Parse the two checkpoint artifacts from in-memory bytes. Used by fuzzing
/// and by callers that stage files themselves.
pub fn decode(manifest_json: &str, blob: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let manifest = parse_manifest(manifest_json)?;
    let store = assemble(&manifest, blob)?;
    Ok((store, manifest.meta))
}
