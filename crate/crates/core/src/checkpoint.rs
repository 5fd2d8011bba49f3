//! Binary checkpoints: magic, JSON header, little-endian f64 payload and a
//! SHA-256 trailer over everything before it. Writes go to a temporary file
//! that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"EVTRKCK1";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub backbone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model_hash: String,
    pub config_hash: String,
    /// Full run configuration as dotted-key TOML.
    pub config: String,
    pub step: usize,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer_steps: Option<u64>,
    pub metrics: BTreeMap<String, f64>,
}

/// Everything a checkpoint file holds, decoded.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub values: Vec<Matrix<T>>,
    pub optimizer: Option<AdamW<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_toml(&self.header.config)?;
        Ok(c)
    }

    /// Rebuilds the model for `cfg`, refusing architecture or shape mismatches.
    pub fn restore(&self, cfg: &RunConfig) -> Result<Model<T>> {
        if cfg.model_hash() != self.header.model_hash {
            let saved = self.config()?;
            let diff: Vec<String> = saved
                .entries()
                .into_iter()
                .zip(cfg.entries())
                .filter(|(a, b)| a != b && (a.0.starts_with("backbone.") || a.0.starts_with("model.") || a.0.starts_with("uncert.") || a.0 == "head.channels"))
                .map(|(a, b)| format!("{}: checkpoint {} vs requested {}", a.0, a.1, b.1))
                .collect();
            return Err(Error::Incompatible(format!("model configuration differs ({})", diff.join("; "))));
        }
        let mut model = Model::<T>::init(&cfg.model, 0)?;
        if model.params.len() != self.values.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model expects {}",
                self.values.len(),
                model.params.len()
            )));
        }
        for (entry, value) in self.header.params.iter().zip(&self.values) {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| Error::Incompatible(format!("unknown parameter {}", entry.name)))?;
            if model.params.value(id).shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "{}: shape {:?} vs expected {:?}",
                    entry.name,
                    value.shape(),
                    model.params.value(id).shape()
                )));
            }
            *model.params.value_mut(id) = value.clone();
        }
        Ok(model)
    }
}

fn push_matrix<T: Scalar>(out: &mut Vec<u8>, m: &Matrix<T>) {
    for &v in m.as_slice() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

/// Writes `params` (and optionally the optimizer state) atomically.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    optimizer: Option<&AdamW<T>>,
    cfg: &RunConfig,
    step: usize,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    let header = Header {
        model_hash: cfg.model_hash(),
        config_hash: cfg.config_hash(),
        config: cfg.to_toml(),
        step,
        epoch,
        params: params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                backbone: p.group == ParamGroup::Backbone,
            })
            .collect(),
        optimizer_steps: optimizer.map(|o| o.steps),
        metrics,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + json.len() + params.num_scalars() * 8 * 3 + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in params.iter() {
        push_matrix(&mut buf, &p.value);
    }
    if let Some(o) = optimizer {
        for m in o.first_moments().iter().chain(o.second_moments()) {
            push_matrix(&mut buf, m);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint; any corruption is an integrity error.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Integrity(format!("{}: {m}", path.display()));
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[16..hend]).map_err(|e| bad(&format!("header: {e}")))?;
    let mut floats = body[hend..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    if (body.len() - hend) % 8 != 0 {
        return Err(bad("payload not a whole number of values"));
    }
    let mut read = |rows: usize, cols: usize| -> Result<Matrix<T>> {
        let data: Vec<T> = floats.by_ref().take(rows * cols).map(T::lit).collect();
        if data.len() != rows * cols {
            return Err(bad("truncated payload"));
        }
        Ok(Matrix::from_vec(rows, cols, data))
    };
    let values = header.params.iter().map(|p| read(p.rows, p.cols)).collect::<Result<Vec<_>>>()?;
    let optimizer = match header.optimizer_steps {
        None => None,
        Some(steps) => {
            let m = header.params.iter().map(|p| read(p.rows, p.cols)).collect::<Result<Vec<_>>>()?;
            let v = header.params.iter().map(|p| read(p.rows, p.cols)).collect::<Result<Vec<_>>>()?;
            Some(AdamW::from_state(steps, m, v))
        }
    };
    if floats.next().is_some() {
        return Err(bad("trailing payload"));
    }
    Ok(Checkpoint { header, values, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            patch_size: 4,
            elim_blocks: vec![],
            template_size: 8,
            search_size: 16,
            uncert_heads: 2,
            head_channels: 4,
            ..ModelConfig::default()
        };
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = cfg();
        let m = Model::<f32>::init(&c.model, 5).unwrap();
        let mut opt = AdamW::new(&m.params);
        opt.steps = 3;
        save_checkpoint(&path, &m.params, Some(&opt), &c, 7, 1, BTreeMap::from([("loss".into(), 1.5)])).unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.header.step, 7);
        assert_eq!(ck.header.metrics["loss"], 1.5);
        let back = ck.restore(&c).unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.name, b.name);
        }
        assert_eq!(ck.optimizer.unwrap().steps, 3);
        assert!(!dir.path().join("a.tmp").exists());
    }

    #[test]
    fn changed_dimension_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let c = cfg();
        let m = Model::<f64>::init(&c.model, 1).unwrap();
        save_checkpoint(&path, &m.params, None, &c, 0, 0, BTreeMap::new()).unwrap();
        let mut other = c.clone();
        other.model.dim = 12;
        other.model.heads = 3;
        other.model.uncert_heads = 3;
        let ck = load_checkpoint::<f64>(&path).unwrap();
        match ck.restore(&other) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("backbone.dim")),
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = cfg();
        let m = Model::<f64>::init(&c.model, 1).unwrap();
        save_checkpoint(&path, &m.params, None, &c, 0, 0, BTreeMap::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Integrity(_))));
        fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Integrity(_))));
    }
}
