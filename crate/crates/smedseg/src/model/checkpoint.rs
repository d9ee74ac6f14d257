//! Model checkpoints: a single archive holding the config as JSON plus
//! named parameter and buffer arrays (batch-norm running statistics) as
//! little-endian f64, written atomically (temp file + rename).
//!
//! Layout:
//!
//! ```text
//! magic "SMSEGCK1" | u64 config_len | config JSON
//!                  | u64 manifest_len | manifest JSON | raw f64 data
//! ```
//!
//! The manifest lists `(name, kind, shape)` in writing order; names follow
//! the `<module-path>.<param>` scheme (e.g. `backbone.stem.conv.weight`).
//! Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::layers::NamedTensor;
use crate::nn::Tensor;

use super::{build_model, Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"SMSEGCK1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

fn collect(model: &Model) -> Vec<(String, String, Tensor)> {
    let mut entries = Vec::new();
    model.visit(&mut |name, t| match t {
        NamedTensor::Param(p) => entries.push((name, "param".to_string(), p.value().clone())),
        NamedTensor::Buffer(b) => entries.push((name, "buffer".to_string(), b.borrow().clone())),
    });
    entries
}

pub fn save(model: &Model, path: &Path) -> Result<(), ModelError> {
    let entries = collect(model);
    let manifest: Vec<Entry> = entries
        .iter()
        .map(|(name, kind, t)| Entry {
            name: name.clone(),
            kind: kind.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| ModelError::Checkpoint(format!("config serialization: {e}")))?;
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| ModelError::Checkpoint(format!("manifest serialization: {e}")))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(config_json.len() as u64).to_le_bytes())?;
        f.write_all(&config_json)?;
        f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_json)?;
        let mut buf = Vec::new();
        for (_, _, t) in &entries {
            buf.clear();
            buf.reserve(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Archive {
    config: ModelConfig,
    entries: Vec<(Entry, Tensor)>,
}

fn read_archive(path: &Path) -> Result<Archive, ModelError> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| ModelError::Checkpoint(format!("{} is not a checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{} has wrong magic bytes",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let mut config_json = vec![0u8; u64::from_le_bytes(len8) as usize];
    f.read_exact(&mut config_json)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| ModelError::Checkpoint(format!("config parse: {e}")))?;
    f.read_exact(&mut len8)?;
    let mut manifest_json = vec![0u8; u64::from_le_bytes(len8) as usize];
    f.read_exact(&mut manifest_json)?;
    let manifest: Vec<Entry> = serde_json::from_slice(&manifest_json)
        .map_err(|e| ModelError::Checkpoint(format!("manifest parse: {e}")))?;

    let mut entries = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let numel: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        f.read_exact(&mut raw).map_err(|_| {
            ModelError::Checkpoint(format!("truncated data for entry {}", entry.name))
        })?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&entry.shape, data);
        entries.push((entry, t));
    }
    Ok(Archive { config, entries })
}

/// Loads a full model: rebuilds from the stored config, then overwrites
/// every parameter and buffer. Fails if the archive names do not exactly
/// match the rebuilt model.
pub fn load(path: &Path) -> Result<Model, ModelError> {
    let archive = read_archive(path)?;
    let model = build_model(&archive.config)?;
    apply(&model, &archive.entries, None, true)?;
    Ok(model)
}

/// Overwrites the subset of `model`'s tensors whose names match entries in
/// the archive at `path`, optionally restricted to names starting with
/// `prefix`. Used to load externally supplied backbone weights.
pub fn load_named_into(model: &Model, path: &Path, prefix: Option<&str>) -> Result<(), ModelError> {
    let archive = read_archive(path)?;
    apply(model, &archive.entries, prefix, false)
}

fn apply(
    model: &Model,
    entries: &[(Entry, Tensor)],
    prefix: Option<&str>,
    exhaustive: bool,
) -> Result<(), ModelError> {
    use std::collections::BTreeMap;
    let mut by_name: BTreeMap<&str, &(Entry, Tensor)> = BTreeMap::new();
    for e in entries {
        by_name.insert(e.0.name.as_str(), e);
    }
    let mut missing = Vec::new();
    let mut matched = 0usize;
    let mut result = Ok(());
    model.visit(&mut |name, t| {
        if result.is_err() {
            return;
        }
        if let Some(p) = prefix {
            if !name.starts_with(p) {
                return;
            }
        }
        match by_name.remove(name.as_str()) {
            None => missing.push(name),
            Some((entry, tensor)) => {
                matched += 1;
                let target_shape = match &t {
                    NamedTensor::Param(p) => p.shape(),
                    NamedTensor::Buffer(b) => b.borrow().shape().to_vec(),
                };
                if target_shape != entry.shape {
                    result = Err(ModelError::Checkpoint(format!(
                        "shape mismatch for {}: checkpoint {:?}, model {:?}",
                        entry.name, entry.shape, target_shape
                    )));
                    return;
                }
                match t {
                    NamedTensor::Param(p) => p.set_value(tensor.clone()),
                    NamedTensor::Buffer(b) => *b.borrow_mut() = tensor.clone(),
                }
            }
        }
    });
    result?;
    if !missing.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint is missing {} tensors (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    if exhaustive && !by_name.is_empty() {
        let leftover: Vec<&str> = by_name.keys().copied().take(3).collect();
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has {} unknown tensors (e.g. {:?})",
            by_name.len(),
            leftover
        )));
    }
    if prefix.is_some() && matched == 0 {
        return Err(ModelError::Checkpoint(format!(
            "no tensors matched prefix {:?}",
            prefix.unwrap()
        )));
    }
    Ok(())
}

/// Reads just the config out of a checkpoint.
pub fn peek_config(path: &Path) -> Result<ModelConfig, ModelError> {
    Ok(read_archive(path)?.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, InputPatch, ModelConfig};
    use crate::nn::Tensor;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(&ModelConfig::nano(11)).unwrap();
        // Perturb a buffer so it differs from the fresh-build value.
        model.named_buffers()[0].1.borrow_mut().data_mut()[0] = 0.123456789;
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        for ((na, pa), (nb, pb)) in model
            .named_parameters()
            .iter()
            .zip(loaded.named_parameters().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(pa.value().data(), pb.value().data(), "{na} differs");
        }
        for ((na, ba), (nb, bb)) in model.named_buffers().iter().zip(loaded.named_buffers()) {
            assert_eq!(na, &nb);
            assert_eq!(ba.borrow().data(), bb.borrow().data(), "{na} differs");
        }
    }

    #[test]
    fn prediction_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(&ModelConfig::nano(5)).unwrap();
        let patch = InputPatch::new(Tensor::full(&[3, 16, 16], -700.0)).unwrap();
        let before = model.predict(&patch).unwrap();
        model.save(&path).unwrap();
        let after = Model::load(&path).unwrap().predict(&patch).unwrap();
        assert_eq!(before.probabilities.data(), after.probabilities.data());
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Model::load(&path), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn backbone_weights_load_by_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("donor.ckpt");
        let donor = build_model(&ModelConfig::nano(77)).unwrap();
        donor.save(&path).unwrap();

        let cfg = ModelConfig { backbone_weights: Some(path), ..ModelConfig::nano(1) };
        let model = build_model(&cfg).unwrap();
        // Backbone tensors must equal the donor's, while e.g. head ones
        // come from seed 1 and differ.
        let donor_params: std::collections::BTreeMap<String, Vec<f64>> = donor
            .named_parameters()
            .into_iter()
            .map(|(n, p)| (n, p.value().data().to_vec()))
            .collect();
        for (name, p) in model.named_parameters() {
            if name.starts_with("backbone.") {
                assert_eq!(p.value().data(), &donor_params[&name][..], "{name}");
            }
        }
        let head_differs = model
            .named_parameters()
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .any(|(n, p)| p.value().data() != &donor_params[n][..]);
        assert!(head_differs);
    }
}
