//! Checkpoint format: one UTF-8 JSON manifest line listing parameter name,
//! shape and byte offset, a newline, then a little-endian f32 payload.
//! Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload that follows the manifest line.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

/// Serialize parameters in registration order. Non-f32 stores are converted
/// through f32, which is lossless for the f32 training path.
pub fn save<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut payload: Vec<u8> = Vec::new();
    for (_, name, tensor) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let manifest = serde_json::to_string(&Manifest { params: entries })?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(manifest.as_bytes())?;
    file.write_all(b"\n")?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

/// Raw checkpoint contents in manifest order.
pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?,
    );
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data("checkpoint missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Data(format!("bad checkpoint manifest: {e}")))?;
    let payload = &bytes[newline + 1..];
    let mut out = Vec::with_capacity(manifest.params.len());
    for entry in manifest.params {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(Error::Data(format!(
                "checkpoint payload truncated for parameter {}",
                entry.name
            )));
        }
        let values = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name, entry.shape, values));
    }
    Ok(out)
}

/// Load a checkpoint into an existing store; every parameter must match by
/// name and shape.
pub fn apply<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let entries = load(path)?;
    if entries.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, shape, values) in entries {
        let id = store.lookup(&name).ok_or_else(|| {
            Error::Config(format!("checkpoint parameter {name} unknown to this model"))
        })?;
        if store.tensor(id).shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                shape,
                store.tensor(id).shape()
            )));
        }
        let tensor = crate::tensor::Tensor::new(
            shape,
            values.into_iter().map(|v| S::from_f64(v as f64)).collect(),
        )?;
        store.set(id, tensor)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("a.w", Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.25e-7, 1e9]).unwrap());
        store.register("b.v", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        save(&store, &path).unwrap();

        let mut loaded: ParamStore<f32> = ParamStore::new();
        loaded.register("a.w", Tensor::zeros(vec![2, 2]));
        loaded.register("b.v", Tensor::zeros(vec![3]));
        apply(&mut loaded, &path).unwrap();
        for (id, _, t) in store.iter() {
            let bits_a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = loaded.tensor(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }

        // write -> read -> write produces identical bytes
        let path2 = dir.path().join("ckpt2.bin");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("a.w", Tensor::zeros(vec![2, 2]));
        save(&store, &path).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new();
        other.register("a.w", Tensor::zeros(vec![3, 2]));
        let err = apply(&mut other, &path).unwrap_err();
        assert!(err.to_string().contains("a.w"), "{err}");
    }
}
