//! Dataset files and manifests.
//!
//! One binary file per split, little-endian:
//!   header: magic "SHFT", version u32, count u32, H u32, W u32, K u32
//!   per sample: image f32[H*W], mask u8[H*W], keypoints f32[K*2] (x, y),
//!               visibility u8[K], has_labels u8
//! Unlabeled splits store zeroed keypoints/visibility with has_labels = 0.
//! The manifest is a plain-text key=value file next to the data file.

use super::{render, sample_pose, DomainSpec};
use crate::error::{Error, Result};
use crate::geometry::{KeypointSet, Skeleton};
use crate::seeds;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"SHFT";
const VERSION: u32 = 1;

/// In-memory split: images already widened to f64 for the engine.
#[derive(Debug, Clone)]
pub struct SplitFile {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub images: Vec<Vec<f64>>,
    pub masks: Vec<Vec<u8>>,
    pub keypoints: Vec<KeypointSet>,
    pub has_labels: Vec<bool>,
}

impl SplitFile {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labeled(&self) -> bool {
        !self.has_labels.is_empty() && self.has_labels.iter().all(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub files: Vec<String>,
    pub data_sha256: String,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("count={}\n", self.count));
        s.push_str(&format!("data_sha256={}\n", self.data_sha256));
        for f in &self.files {
            s.push_str(&format!("file={f}\n"));
        }
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("spec_hash={}\n", self.spec_hash));
        s.push_str(&format!("split={}\n", self.split));
        s
    }

    pub fn parse(text: &str) -> Result<DatasetManifest> {
        let mut m = DatasetManifest {
            split: String::new(),
            count: 0,
            seed: 0,
            spec_hash: String::new(),
            files: Vec::new(),
            data_sha256: String::new(),
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad manifest line: {line}")))?;
            match key {
                "count" => m.count = val.parse().map_err(|_| Error::invalid("bad count"))?,
                "seed" => m.seed = val.parse().map_err(|_| Error::invalid("bad seed"))?,
                "spec_hash" => m.spec_hash = val.to_string(),
                "split" => m.split = val.to_string(),
                "file" => m.files.push(val.to_string()),
                "data_sha256" => m.data_sha256 = val.to_string(),
                other => return Err(Error::invalid(format!("unknown manifest key {other}"))),
            }
        }
        Ok(m)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    DatasetManifest::parse(&text)
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a split to the binary format.
pub fn write_split(
    path: &Path,
    h: usize,
    w: usize,
    k: usize,
    samples: &[(Vec<f64>, Vec<u8>, KeypointSet, bool)],
) -> Result<String> {
    let mut buf: Vec<u8> = Vec::with_capacity(24 + samples.len() * (h * w * 5 + k * 9 + 1));
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, samples.len() as u32);
    push_u32(&mut buf, h as u32);
    push_u32(&mut buf, w as u32);
    push_u32(&mut buf, k as u32);
    for (image, mask, kps, has_labels) in samples {
        assert_eq!(image.len(), h * w);
        assert_eq!(mask.len(), h * w);
        assert_eq!(kps.k(), k);
        for &v in image {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(mask);
        if *has_labels {
            for c in &kps.coords {
                buf.extend_from_slice(&(c[0] as f32).to_le_bytes());
                buf.extend_from_slice(&(c[1] as f32).to_le_bytes());
            }
            for &v in &kps.visible {
                buf.push(u8::from(v));
            }
        } else {
            buf.extend(std::iter::repeat(0u8).take(k * 8 + k));
        }
        buf.push(u8::from(*has_labels));
    }
    let mut hasher = Sha256::new();
    hasher.update(&buf);
    let sha: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha)
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::DatasetCorrupt { path: path.display().to_string(), detail: detail.into() }
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 24 || &bytes[0..4] != MAGIC {
        return Err(corrupt(path, "missing header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let count = u32_at(8) as usize;
    let h = u32_at(12) as usize;
    let w = u32_at(16) as usize;
    let k = u32_at(20) as usize;
    let record = h * w * 4 + h * w + k * 8 + k + 1;
    if bytes.len() != 24 + count * record {
        return Err(corrupt(
            path,
            format!("expected {} bytes for {count} samples, found {}", 24 + count * record, bytes.len()),
        ));
    }
    let mut split = SplitFile {
        h,
        w,
        k,
        images: Vec::with_capacity(count),
        masks: Vec::with_capacity(count),
        keypoints: Vec::with_capacity(count),
        has_labels: Vec::with_capacity(count),
    };
    let mut off = 24;
    for _ in 0..count {
        let mut image = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            image.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        let mask = bytes[off..off + h * w].to_vec();
        off += h * w;
        let mut coords = Vec::with_capacity(k);
        for _ in 0..k {
            let x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            let y = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as f64;
            coords.push([x, y]);
            off += 8;
        }
        let visible: Vec<bool> = bytes[off..off + k].iter().map(|&b| b != 0).collect();
        off += k;
        let has_labels = bytes[off] != 0;
        off += 1;
        split.images.push(image);
        split.masks.push(mask);
        split.keypoints.push(KeypointSet::new(coords, visible));
        split.has_labels.push(has_labels);
    }
    Ok(split)
}

/// Generate `n` samples for one split and write the data file + manifest.
/// With n = 0 nothing is written and an empty manifest is returned.
/// Generation parallelizes over samples; each sample's generator is keyed by
/// hash(seed, index), so the result is independent of scheduling order.
pub fn generate_dataset(
    spec: &DomainSpec,
    skel: &Skeleton,
    n: usize,
    seed: u64,
    dir: &Path,
    split: &str,
    with_labels: bool,
    mask_noise: f64,
) -> Result<DatasetManifest> {
    let spec_hash = spec.hash();
    if n == 0 {
        return Ok(DatasetManifest {
            split: split.to_string(),
            count: 0,
            seed,
            spec_hash,
            files: Vec::new(),
            data_sha256: String::new(),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tag = format!("sample/{split}");
    let samples: Vec<(Vec<f64>, Vec<u8>, KeypointSet, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::stream(seed, &tag, i as u64);
            let pose = sample_pose(spec, skel, &mut rng);
            let s = render::render(&pose, spec, skel, &mut rng, mask_noise);
            (s.image, s.mask, s.kps, with_labels)
        })
        .collect();

    let data_name = format!("{split}.bin");
    let data_path: PathBuf = dir.join(&data_name);
    let sha = write_split(&data_path, super::IMAGE_SIZE, super::IMAGE_SIZE, skel.k(), &samples)?;
    let manifest = DatasetManifest {
        split: split.to_string(),
        count: n,
        seed,
        spec_hash,
        files: vec![data_name],
        data_sha256: sha,
    };
    let mpath = dir.join(format!("{split}.manifest"));
    std::fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{adult_spec, infant_spec};

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let skel = Skeleton::default16();
        let spec = adult_spec();
        let m = generate_dataset(&spec, &skel, 5, 99, dir.path(), "probe", true, 0.0).unwrap();
        assert_eq!(m.count, 5);
        let split = read_split(&dir.path().join("probe.bin")).unwrap();
        assert_eq!(split.len(), 5);
        assert!(split.labeled());
        assert_eq!(split.k, 16);
        for img in &split.images {
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn unlabeled_split_zeroes_keypoints() {
        let dir = tempfile::tempdir().unwrap();
        let skel = Skeleton::default16();
        let m = generate_dataset(&infant_spec(), &skel, 3, 7, dir.path(), "tt", false, 0.0).unwrap();
        assert_eq!(m.count, 3);
        let split = read_split(&dir.path().join("tt.bin")).unwrap();
        assert!(!split.labeled());
        for kps in &split.keypoints {
            assert!(kps.coords.iter().all(|c| c == &[0.0, 0.0]));
            assert!(kps.visible.iter().all(|&v| !v));
        }
    }

    #[test]
    fn empty_split_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let skel = Skeleton::default16();
        let m = generate_dataset(&adult_spec(), &skel, 0, 1, dir.path(), "none", true, 0.0).unwrap();
        assert_eq!(m.count, 0);
        assert!(m.files.is_empty());
        assert!(!dir.path().join("none.bin").exists());
        assert!(!dir.path().join("none.manifest").exists());
    }

    #[test]
    fn regeneration_reproduces_manifest_hash() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let skel = Skeleton::default16();
        let spec = infant_spec();
        let m1 = generate_dataset(&spec, &skel, 8, 123, d1.path(), "s", true, 0.02).unwrap();
        let m2 = generate_dataset(&spec, &skel, 8, 123, d2.path(), "s", true, 0.02).unwrap();
        assert_eq!(m1, m2);
        let b1 = std::fs::read(d1.path().join("s.bin")).unwrap();
        let b2 = std::fs::read(d2.path().join("s.bin")).unwrap();
        assert_eq!(b1, b2);
        let t1 = std::fs::read_to_string(d1.path().join("s.manifest")).unwrap();
        let t2 = std::fs::read_to_string(d2.path().join("s.manifest")).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn truncated_file_reports_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let skel = Skeleton::default16();
        generate_dataset(&adult_spec(), &skel, 2, 4, dir.path(), "c", true, 0.0).unwrap();
        let path = dir.path().join("c.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_split(&path), Err(Error::DatasetCorrupt { .. })));
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = DatasetManifest {
            split: "x".into(),
            count: 12,
            seed: 42,
            spec_hash: "abcd".into(),
            files: vec!["x.bin".into()],
            data_sha256: "ff00".into(),
        };
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }
}
