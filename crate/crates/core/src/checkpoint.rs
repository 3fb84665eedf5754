//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.json` and one binary blob
//! per network and role (`generator.params.bin`, `generator.buffers.bin`,
//! `generator.adam_m.bin`, `generator.adam_v.bin`, and likewise for the
//! other three networks).
//!
//! Blob layout, all integers little-endian:
//!
//! ```text
//! b"VGTB"  u32 layout version (1)  u32 tensor count
//! per tensor:
//!   u32 name length, UTF-8 name
//!   u32 rank, rank × u64 extents
//!   f32 values in C order
//! ```
//!
//! The manifest records the format version, step, configuration, random
//! stream positions, update counters, Adam step counts, and the byte length
//! and SHA-256 of every blob. Directories are written under a temporary name
//! and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volgen_tensor::Tensor;

use crate::batch::BatchState;
use crate::config::Config;
use crate::error::{Result, VolgenError};
use crate::networks::{NamedTensor, NetKind};
use crate::rng::RngState;
use crate::trainer::{TrainState, UpdateCounters};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"VGTB";
const BLOB_LAYOUT: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub config: Config,
    pub rng: RngState,
    pub batches: Option<BatchState>,
    pub counters: UpdateCounters,
    pub adam_steps: BTreeMap<String, u64>,
    pub blobs: Vec<BlobEntry>,
}

fn ck(msg: impl Into<String>) -> VolgenError {
    VolgenError::Checkpoint(msg.into())
}

pub fn encode_blob(tensors: &[NamedTensor<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_LAYOUT.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.value.shape().len() as u32).to_le_bytes());
        for &d in t.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(ck(format!("blob {} is truncated", self.file)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_blob(buf: &[u8], file: &str) -> Result<Vec<NamedTensor<f32>>> {
    let mut r = Reader { buf, pos: 0, file };
    if r.take(4)? != MAGIC {
        return Err(ck(format!("blob {file} has a bad magic number")));
    }
    if r.u32()? != BLOB_LAYOUT {
        return Err(ck(format!("blob {file} has an unknown layout")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ck(format!("blob {file}: tensor name is not UTF-8")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| ck(format!("blob {file}: bad extents")))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| ck(format!("blob {file}: {e}")))?;
        out.push(NamedTensor { name, value });
    }
    if r.pos != buf.len() {
        return Err(ck(format!("blob {file} has trailing bytes")));
    }
    Ok(out)
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn moments(names: &[NamedTensor<f32>], values: &[Tensor<f32>]) -> Vec<NamedTensor<f32>> {
    names
        .iter()
        .zip(values)
        .map(|(p, v)| NamedTensor {
            name: p.name.clone(),
            value: v.clone(),
        })
        .collect()
}

fn blob_roles(state: &TrainState) -> Vec<(String, Vec<NamedTensor<f32>>)> {
    let mut out = Vec::new();
    for kind in NetKind::ALL {
        let net = state.params.get(kind);
        let adam = &state.adam[kind.index()];
        let name = kind.name();
        out.push((format!("{name}.params.bin"), net.params().to_vec()));
        out.push((format!("{name}.buffers.bin"), net.buffers().to_vec()));
        out.push((format!("{name}.adam_m.bin"), moments(net.params(), &adam.m)));
        out.push((format!("{name}.adam_v.bin"), moments(net.params(), &adam.v)));
    }
    out
}

/// Writes `state` to the directory `dir`, replacing any previous one.
pub fn save_checkpoint(state: &TrainState, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref().to_path_buf();
    let name = dir
        .file_name()
        .ok_or_else(|| ck(format!("{} is not a directory name", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    if !parent.as_os_str().is_empty() {
        fs::create_dir_all(&parent).map_err(|e| VolgenError::io(&parent, e))?;
    }
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| VolgenError::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| VolgenError::io(&tmp, e))?;

    let mut blobs = Vec::new();
    for (file, tensors) in blob_roles(state) {
        let bytes = encode_blob(&tensors);
        let path = tmp.join(&file);
        fs::write(&path, &bytes).map_err(|e| VolgenError::io(&path, e))?;
        blobs.push(BlobEntry {
            file,
            bytes: bytes.len() as u64,
            sha256: sha_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: state.global_step,
        config: state.config.clone(),
        rng: RngState::capture(&state.rng),
        batches: state.batches.clone(),
        counters: state.counters,
        adam_steps: NetKind::ALL
            .iter()
            .map(|k| (k.name().to_string(), state.adam[k.index()].step))
            .collect(),
        blobs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ck(e.to_string()))?;
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| VolgenError::io(&mpath, e))?;

    let old = parent.join(format!(".{name}.old"));
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| VolgenError::io(&old, e))?;
        }
        fs::rename(&dir, &old).map_err(|e| VolgenError::io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| VolgenError::io(&dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| VolgenError::io(&old, e))?;
    }
    Ok(dir)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| VolgenError::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| ck(format!("manifest: {e}")))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(ck(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            raw.get("format_version").map_or("missing".to_string(), |v| v.to_string())
        )));
    }
    serde_json::from_value(raw).map_err(|e| ck(format!("manifest: {e}")))
}

fn replace_all(target: &mut [NamedTensor<f32>], loaded: Vec<NamedTensor<f32>>, file: &str) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(ck(format!(
            "blob {file} holds {} tensors, the configured network has {}",
            loaded.len(),
            target.len()
        )));
    }
    for (t, l) in target.iter_mut().zip(loaded) {
        if t.name != l.name || t.value.shape() != l.value.shape() {
            return Err(ck(format!(
                "blob {file}: tensor {} {:?} does not match {} {:?}",
                l.name,
                l.value.shape(),
                t.name,
                t.value.shape()
            )));
        }
        t.value = l.value;
    }
    Ok(())
}

/// Restores a state saved by [`save_checkpoint`], verifying every blob.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let mut state = TrainState::new(manifest.config.clone())?;
    let entries: BTreeMap<&str, &BlobEntry> = manifest.blobs.iter().map(|b| (b.file.as_str(), b)).collect();
    let read = |file: &str| -> Result<Vec<NamedTensor<f32>>> {
        let entry = entries
            .get(file)
            .ok_or_else(|| ck(format!("manifest does not list blob {file}")))?;
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| VolgenError::io(&path, e))?;
        if bytes.len() as u64 != entry.bytes || sha_hex(&bytes) != entry.sha256 {
            return Err(ck(format!(
                "checksum mismatch in blob {file} ({} bytes on disk, {} recorded)",
                bytes.len(),
                entry.bytes
            )));
        }
        decode_blob(&bytes, file)
    };
    for kind in NetKind::ALL {
        let name = kind.name();
        let net = state.params.get_mut(kind);
        replace_all(net.params_mut(), read(&format!("{name}.params.bin"))?, name)?;
        replace_all(net.buffers_mut(), read(&format!("{name}.buffers.bin"))?, name)?;
        let adam = &mut state.adam[kind.index()];
        let m = read(&format!("{name}.adam_m.bin"))?;
        let v = read(&format!("{name}.adam_v.bin"))?;
        let mut m_slots: Vec<NamedTensor<f32>> = moments(net.params(), &adam.m);
        let mut v_slots: Vec<NamedTensor<f32>> = moments(net.params(), &adam.v);
        replace_all(&mut m_slots, m, name)?;
        replace_all(&mut v_slots, v, name)?;
        adam.m = m_slots.into_iter().map(|t| t.value).collect();
        adam.v = v_slots.into_iter().map(|t| t.value).collect();
        adam.step = *manifest
            .adam_steps
            .get(name)
            .ok_or_else(|| ck(format!("manifest lacks the Adam step of {name}")))?;
    }
    state.global_step = manifest.step;
    state.rng = manifest.rng.restore()?;
    state.batches = manifest.batches;
    state.counters = manifest.counters;
    Ok(state)
}

/// Configuration recorded in a checkpoint's manifest.
pub fn checkpoint_config(dir: impl AsRef<Path>) -> Result<Config> {
    Ok(read_manifest(dir)?.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let ts = vec![
            NamedTensor {
                name: "a".into(),
                value: Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, 7.0]).unwrap(),
            },
            NamedTensor {
                name: "scalar".into(),
                value: Tensor::scalar(4.0),
            },
        ];
        let bytes = encode_blob(&ts);
        assert_eq!(decode_blob(&bytes, "x").unwrap(), ts);
        assert!(decode_blob(&bytes[..bytes.len() - 1], "x").unwrap_err().to_string().contains("truncated"));
    }

    use crate::config::{Config, Mode, ModelConfig, TrainConfig};
    use crate::phantom::phantom_dataset;
    use crate::trainer::{generate_samples, train, train_from, train_step};
    use rand::SeedableRng;
    use std::sync::Arc;

    fn config(steps: u64) -> Config {
        Config {
            train: TrainConfig {
                latent_size: 8,
                volume_size: 16,
                batch_size: 2,
                total_steps: steps,
                checkpoint_interval: 1000,
                mode: Mode::AlphaWganGp,
                seed: 3,
                augment: true,
                ..TrainConfig::default()
            },
            model: ModelConfig {
                channels: vec![2, 3, 4, 5],
                generator_base_channels: 8,
                code_hidden: 6,
                leaky_slope: 0.2,
            },
        }
    }

    fn all_tensors(s: &TrainState) -> Vec<NamedTensor<f32>> {
        blob_roles(s).into_iter().flat_map(|(_, t)| t).collect()
    }

    #[test]
    fn save_load_preserves_state() {
        let mut s = TrainState::new(config(2)).unwrap();
        let data = phantom_dataset(1, 2, 16).unwrap();
        train_step(&mut s, data.volumes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(&s, dir.path().join("ck")).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(all_tensors(&back), all_tensors(&s));
        assert_eq!(back.global_step, 1);
        assert_eq!(back.counters, s.counters);
        let z = |st: &TrainState| generate_samples(st, 2, &mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
        assert_eq!(z(&back), z(&s));
        // Saving again over an existing directory replaces it cleanly.
        save_checkpoint(&back, &path).unwrap();
        assert!(load_checkpoint(&path).is_ok());
    }

    #[test]
    fn rejects_other_versions() {
        let s = TrainState::new(config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(&s, dir.path().join("ck")).unwrap();
        let mpath = path.join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&mpath, text).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version 2"), "{err}");
    }

    #[test]
    fn detects_truncated_blob() {
        let s = TrainState::new(config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(&s, dir.path().join("ck")).unwrap();
        let blob = path.join("encoder.params.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch in blob encoder.params.bin"), "{err}");
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = Arc::new(phantom_dataset(2, 5, 16).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let full = train(config(4), data.clone(), dir.path().join("full"), |_| {}).unwrap();

        let part = train(config(2), data.clone(), dir.path().join("part"), |_| {}).unwrap();
        let mut resumed = load_checkpoint(&part.final_checkpoint).unwrap();
        resumed.config.train.total_steps = 4;
        let rest = train_from(resumed, data, dir.path().join("part"), |_| {}).unwrap();

        assert_eq!(all_tensors(&rest.state), all_tensors(&full.state));
        let losses = |r: &[crate::trainer::StepReport]| r.iter().map(|x| x.losses).collect::<Vec<_>>();
        assert_eq!(losses(&rest.reports), losses(&full.reports[2..]));
    }
}
