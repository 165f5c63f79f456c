//! Versioned binary checkpoints.
//!
//! Little-endian layout:
//!   magic "PCHK", version u32, kind (u32 len + utf8), config_hash (u32 len +
//!   utf8), step u64, run seed u64, param count u32, then per parameter:
//!   name (u32 len + utf8), ndim u32, dims u32…, values f64…; then adam step
//!   u64, moment count u32, and per moment: name, len u32, m f64…, v f64….
//!
//! Multi-model states (student + teacher) store both under name prefixes like
//! "student/enc0.w". All RNG streams are derived from (run seed, purpose,
//! step), so seed + step is the complete generator state and resume replays
//! the uninterrupted trajectory bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::{Moments, ParameterStore, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCHK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub adam_step: u64,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, step: u64, seed: u64) -> Checkpoint {
        Checkpoint {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            step,
            seed,
            params: Vec::new(),
            adam_step: 0,
            moments: Vec::new(),
        }
    }

    /// Append a store's parameters (and optionally its Adam state) under a
    /// name prefix ("" for single-model checkpoints).
    pub fn add_store(&mut self, prefix: &str, store: &ParameterStore, with_moments: bool) {
        let key = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}/{name}")
            }
        };
        for (name, t) in store.iter() {
            self.params.push((key(name), t.shape().to_vec(), t.data()));
        }
        if with_moments {
            let (astep, moments) = store.adam_state();
            self.adam_step = astep;
            for (name, m) in moments {
                self.moments.push((key(name), m.m.clone(), m.v.clone()));
            }
        }
    }

    /// Rebuild a store from the parameters under `prefix`, restoring any
    /// stored Adam moments for it.
    pub fn extract_store(&self, prefix: &str, requires_grad: bool) -> Result<ParameterStore> {
        let want = |full: &str| -> Option<String> {
            if prefix.is_empty() {
                (!full.contains('/')).then(|| full.to_string())
            } else {
                full.strip_prefix(&format!("{prefix}/")).map(|s| s.to_string())
            }
        };
        let mut store = ParameterStore::new();
        for (full, shape, data) in &self.params {
            if let Some(name) = want(full) {
                let t = if requires_grad {
                    Tensor::param(shape, data.clone())
                } else {
                    Tensor::new(shape, data.clone())
                };
                store
                    .insert(&name, t)
                    .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
            }
        }
        if store.is_empty() {
            return Err(Error::CheckpointCorrupt(format!(
                "no parameters under prefix '{prefix}'"
            )));
        }
        let mut moments = BTreeMap::new();
        for (full, m, v) in &self.moments {
            if let Some(name) = want(full) {
                moments.insert(name, Moments { m: m.clone(), v: v.clone() });
            }
        }
        if !moments.is_empty() || self.adam_step > 0 {
            store.restore_adam_state(self.adam_step, moments);
        }
        Ok(store)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_str(&mut buf, &self.kind);
        write_str(&mut buf, &self.config_hash);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.adam_step.to_le_bytes());
        buf.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (name, m, v) in &self.moments {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for &x in m {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::CheckpointCorrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CheckpointCorrupt("bad utf8".into()))
    }
}

/// Load and validate a checkpoint; `expected_kind` guards against loading the
/// wrong model family.
pub fn load_checkpoint(path: &Path, expected_kind: &str) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &bytes, off: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let kind = r.string()?;
    if kind != expected_kind {
        return Err(Error::CheckpointKind { found: kind, expected: expected_kind.to_string() });
    }
    let config_hash = r.string()?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        params.push((name, shape, r.f64s(len)?));
    }
    let adam_step = r.u64()?;
    let n_moments = r.u32()? as usize;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        let name = r.string()?;
        let len = r.u32()? as usize;
        moments.push((name, r.f64s(len)?, r.f64s(len)?));
    }
    if r.off != bytes.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes".into()));
    }
    Ok(Checkpoint { kind, config_hash, step, seed, params, adam_step, moments })
}

/// Marker alias: checkpoints carry the full trainer state.
pub type TrainerState = Checkpoint;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::HeatmapNet;
    use crate::tensor::AdamParams;

    fn sample_checkpoint() -> Checkpoint {
        let mut net = HeatmapNet::init(4, 3);
        // populate grads + one adam step so moments exist
        let x = Tensor::new(&[1, 1, 64, 64], vec![0.3; 64 * 64]);
        let y = net.forward(&x).unwrap();
        let loss = y.mean().unwrap();
        loss.backward().unwrap();
        net.params.adam_step(AdamParams::with_lr(1e-3)).unwrap();
        let mut ck = Checkpoint::new("heatmap", "cfg123", 17, 99);
        ck.add_store("", &net.params, true);
        ck
    }

    #[test]
    fn save_load_save_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample_checkpoint();
        save_checkpoint(&p1, &ck).unwrap();
        let loaded = load_checkpoint(&p1, "heatmap").unwrap();
        assert_eq!(ck, loaded);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&p, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p, "heatmap"), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn kind_and_version_mismatches_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.ckpt");
        save_checkpoint(&p, &sample_checkpoint()).unwrap();
        assert!(matches!(
            load_checkpoint(&p, "kp2seg"),
            Err(Error::CheckpointKind { .. })
        ));
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9; // bump version field
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p, "heatmap"),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn store_round_trip_preserves_values_and_moments() {
        let ck = sample_checkpoint();
        let store = ck.extract_store("", true).unwrap();
        assert_eq!(store.adam_step_count(), 1);
        let mut ck2 = Checkpoint::new("heatmap", "cfg123", 17, 99);
        ck2.add_store("", &store, true);
        assert_eq!(ck, ck2);
    }

    #[test]
    fn prefixed_stores_extract_independently() {
        let a = HeatmapNet::init(4, 1);
        let b = HeatmapNet::init(4, 2);
        let mut ck = Checkpoint::new("adapt", "h", 0, 5);
        ck.add_store("student", &a.params, false);
        ck.add_store("teacher", &b.params, false);
        let sa = ck.extract_store("student", true).unwrap();
        let sb = ck.extract_store("teacher", false).unwrap();
        assert_eq!(sa.get("enc0.w").data(), a.params.get("enc0.w").data());
        assert_eq!(sb.get("enc0.w").data(), b.params.get("enc0.w").data());
    }
}
