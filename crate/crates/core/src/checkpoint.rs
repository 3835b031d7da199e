//! Checkpoint and path archives.
//!
//! A flat little-endian binary container of named f64 arrays with shapes,
//! prefixed by a JSON metadata record. Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  b"GDNARCH1"
//! meta_len u32      length of the UTF-8 JSON metadata record
//! meta     ...      metadata (format version, config hash, model config)
//! count    u32      number of arrays
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims: ndim x u64
//!   data     product(dims) x f64
//! ```
//!
//! Model checkpoints store every trainable tensor, the per-domain BN
//! statistics, the mean path and each domain's linearized path. Path files
//! reuse the same container with `kind = "bn_path"`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GdError, Result};
use crate::gdnorm::{estimate_gp, mean_path, BnPath, PathLayer};
use crate::model::{ArchConfig, EmbedNet, ParamKey};
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"GDNARCH1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// FNV-1a 64 of the resolved experiment config, hex.
    pub config_hash: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub num_domains: usize,
    #[serde(default)]
    pub num_ids: usize,
    #[serde(default)]
    pub bn_eps: f64,
    #[serde(default)]
    pub bn_momentum: f64,
    /// batches_seen per (layer, domain).
    #[serde(default)]
    pub batches_seen: Vec<Vec<u64>>,
}

pub type Arrays = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn write_archive(path: &Path, meta: &CheckpointMeta, arrays: &Arrays) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let meta_bytes = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, (shape, values)) in arrays {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(GdError::Checkpoint(format!(
                "array {name}: shape {shape:?} vs {} values",
                values.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(GdError::Checkpoint("truncated archive".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_archive(path: &Path) -> Result<(CheckpointMeta, Arrays)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        data: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(GdError::Checkpoint(
            "bad magic; not a GDNARCH1 archive".into(),
        ));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(GdError::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let count = r.u32()? as usize;
    let mut arrays = Arrays::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| GdError::Checkpoint("array name not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        arrays.insert(name, (shape, values));
    }
    Ok((meta, arrays))
}

fn param_name(key: ParamKey) -> String {
    match key {
        ParamKey::HiddenW(i) => format!("hidden.{i}.w"),
        ParamKey::HiddenB(i) => format!("hidden.{i}.b"),
        ParamKey::EmbedW => "embed.w".into(),
        ParamKey::EmbedB => "embed.b".into(),
        ParamKey::Classifier => "classifier.w".into(),
        ParamKey::Gamma(l, d) => format!("dsbn.{l}.{d}.gamma"),
        ParamKey::Beta(l, d) => format!("dsbn.{l}.{d}.beta"),
    }
}

/// Serialize the model plus its mean and per-domain paths.
pub fn save_checkpoint(path: &Path, net: &EmbedNet, config_hash: &str) -> Result<()> {
    let mut arrays = Arrays::new();
    for key in net.all_param_keys() {
        let t = net.param(key);
        arrays.insert(param_name(key), (t.shape().to_vec(), t.values().to_vec()));
    }
    let mut batches_seen = Vec::new();
    for (l, layer) in net.dsbn.iter().enumerate() {
        let mut seen_row = Vec::new();
        for d in 0..layer.num_domains() {
            let set = layer.set(d)?;
            arrays.insert(
                format!("dsbn.{l}.{d}.running_mean"),
                (vec![layer.channels()], set.running_mean.clone()),
            );
            arrays.insert(
                format!("dsbn.{l}.{d}.running_var"),
                (vec![layer.channels()], set.running_var.clone()),
            );
            seen_row.push(set.batches_seen);
        }
        batches_seen.push(seen_row);
    }
    // The mean path alongside the per-domain linearized paths.
    let gp = estimate_gp(net, true)?;
    let mean = mean_path(&gp);
    for (l, pl) in mean.layers.iter().enumerate() {
        arrays.insert(format!("path.mean.{l}.a"), (vec![pl.a.len()], pl.a.clone()));
        arrays.insert(format!("path.mean.{l}.b"), (vec![pl.b.len()], pl.b.clone()));
    }
    for d in 0..net.num_bn_domains() {
        let p = net.linearize_path(d)?;
        for (l, pl) in p.layers.iter().enumerate() {
            arrays.insert(
                format!("path.domain{d}.{l}.a"),
                (vec![pl.a.len()], pl.a.clone()),
            );
            arrays.insert(
                format!("path.domain{d}.{l}.b"),
                (vec![pl.b.len()], pl.b.clone()),
            );
        }
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        kind: "model".into(),
        arch: Some(net.arch().clone()),
        num_domains: net.num_bn_domains(),
        num_ids: net.num_ids(),
        bn_eps: net.dsbn[0].eps(),
        bn_momentum: net.dsbn[0].momentum(),
        batches_seen,
    };
    write_archive(path, &meta, &arrays)
}

fn take_array(arrays: &Arrays, name: &str, want_len: usize) -> Result<Vec<f64>> {
    let (_, values) = arrays
        .get(name)
        .ok_or_else(|| GdError::Checkpoint(format!("missing array {name}")))?;
    if values.len() != want_len {
        return Err(GdError::Checkpoint(format!(
            "array {name}: {} values, model wants {want_len}",
            values.len()
        )));
    }
    Ok(values.clone())
}

/// Rebuild a model from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(EmbedNet, CheckpointMeta)> {
    let (meta, arrays) = read_archive(path)?;
    if meta.kind != "model" {
        return Err(GdError::Checkpoint(format!(
            "expected a model checkpoint, got kind {:?}",
            meta.kind
        )));
    }
    let arch = meta
        .arch
        .clone()
        .ok_or_else(|| GdError::Checkpoint("model checkpoint lacks arch".into()))?;
    let mut throwaway = Rng::new(0);
    let mut net = EmbedNet::new(
        arch,
        meta.num_domains,
        meta.num_ids,
        meta.bn_eps,
        meta.bn_momentum,
        &mut throwaway,
    )?;
    for key in net.all_param_keys() {
        let name = param_name(key);
        let want = net.param(key).numel();
        let values = take_array(&arrays, &name, want)?;
        net.param_mut(key).values_mut().copy_from_slice(&values);
    }
    for (l, layer) in net.dsbn.iter_mut().enumerate() {
        let c = layer.channels();
        for d in 0..layer.num_domains() {
            let mean = take_array(&arrays, &format!("dsbn.{l}.{d}.running_mean"), c)?;
            let var = take_array(&arrays, &format!("dsbn.{l}.{d}.running_var"), c)?;
            let set = layer.set_mut(d)?;
            set.running_mean = mean;
            set.running_var = var;
            set.batches_seen = meta
                .batches_seen
                .get(l)
                .and_then(|row| row.get(d))
                .copied()
                .unwrap_or(0);
        }
    }
    Ok((net, meta))
}

/// Write a path (mean or sampled) as a named-array archive.
pub fn save_path(path: &Path, bn_path: &BnPath, config_hash: &str) -> Result<()> {
    let mut arrays = Arrays::new();
    for (l, pl) in bn_path.layers.iter().enumerate() {
        arrays.insert(format!("layer.{l}.a"), (vec![pl.a.len()], pl.a.clone()));
        arrays.insert(format!("layer.{l}.b"), (vec![pl.b.len()], pl.b.clone()));
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        kind: "bn_path".into(),
        arch: None,
        num_domains: 0,
        num_ids: 0,
        bn_eps: 0.0,
        bn_momentum: 0.0,
        batches_seen: vec![vec![bn_path.layers.len() as u64]],
    };
    write_archive(path, &meta, &arrays)
}

/// Load a path written by [`save_path`].
pub fn load_path(path: &Path) -> Result<BnPath> {
    let (meta, arrays) = read_archive(path)?;
    if meta.kind != "bn_path" {
        return Err(GdError::Checkpoint(format!(
            "expected a bn_path archive, got kind {:?}",
            meta.kind
        )));
    }
    let mut layers = Vec::new();
    for l in 0.. {
        let a_name = format!("layer.{l}.a");
        let b_name = format!("layer.{l}.b");
        match (arrays.get(&a_name), arrays.get(&b_name)) {
            (Some((_, a)), Some((_, b))) => {
                if a.len() != b.len() {
                    return Err(GdError::Checkpoint(format!(
                        "layer {l}: a/b width mismatch"
                    )));
                }
                layers.push(PathLayer {
                    a: a.clone(),
                    b: b.clone(),
                });
            }
            (None, None) => break,
            _ => return Err(GdError::Checkpoint(format!("layer {l}: missing a or b"))),
        }
    }
    if layers.is_empty() {
        return Err(GdError::Checkpoint("path archive holds no layers".into()));
    }
    Ok(BnPath { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("gdnorm-ckpt-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn roundtrip_model_checkpoint() {
        let mut rng = Rng::new(9);
        let mut net = EmbedNet::new(ArchConfig::default(), 3, 12, 1e-5, 0.9, &mut rng).unwrap();
        // Nudge some state so the roundtrip is nontrivial.
        net.dsbn[0].set_mut(1).unwrap().running_mean[0] = 0.25;
        net.dsbn[0].set_mut(1).unwrap().batches_seen = 7;
        let file = tmp("model.gdn");
        save_checkpoint(&file, &net, "deadbeef").unwrap();
        let (loaded, meta) = load_checkpoint(&file).unwrap();
        assert_eq!(meta.config_hash, "deadbeef");
        assert_eq!(loaded.num_bn_domains(), 3);
        for key in net.all_param_keys() {
            assert_eq!(net.param(key).values(), loaded.param(key).values());
        }
        assert_eq!(loaded.dsbn[0].set(1).unwrap().running_mean[0], 0.25);
        assert_eq!(loaded.dsbn[0].set(1).unwrap().batches_seen, 7);
        std::fs::remove_file(&file).ok();
    }

    #[test]
    fn roundtrip_path() {
        let p = BnPath {
            layers: vec![
                PathLayer {
                    a: vec![1.0, 2.0],
                    b: vec![0.5, -0.5],
                },
                PathLayer {
                    a: vec![3.0],
                    b: vec![0.0],
                },
            ],
        };
        let file = tmp("path.gdn");
        save_path(&file, &p, "00").unwrap();
        let loaded = load_path(&file).unwrap();
        assert_eq!(loaded, p);
        std::fs::remove_file(&file).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let file = tmp("junk.gdn");
        std::fs::write(&file, b"NOTANARCHIVE").unwrap();
        assert!(matches!(read_archive(&file), Err(GdError::Checkpoint(_))));
        std::fs::remove_file(&file).ok();
    }
}
