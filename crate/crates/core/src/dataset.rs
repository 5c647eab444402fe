//! On-disk dataset layout, generation, preprocessing, and loading.
//!
//! A dataset directory holds one subdirectory per sample
//! (`s00000`, `s00001`, ...) with `image.png`, `seg.png`, `pose.png`,
//! `cloth.png`, and `cloth_mask.png`, plus a top-level `joints.jsonl`
//! (one keypoint record per line) and `manifest.json` recording resolution,
//! seed, the train/held-out split, and a content hash of every emitted byte.
//! Preprocessing adds `image_a.png`, `seg_a.png`, and `mask_removed.png`
//! per sample.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::imageio;
use crate::label::LabelMap;
use crate::masks::Mask;
use crate::person::{build_agnostic, synth_sample, AgnosticPair};
use crate::tensor::Tensor;

pub const TRAIN_PERCENT: usize = 85;

/// Handle to a dataset directory after the manifest has been read.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Everything stored for one sample, decoded back into tensors.
pub struct LoadedSample<E: Element> {
    pub id: String,
    pub image: Tensor<E>,
    pub seg: LabelMap,
    pub pose: Tensor<E>,
    pub cloth: Tensor<E>,
    pub cloth_mask: Mask,
    pub joints: Vec<[f64; 2]>,
    /// Present once `preprocess` has run on the dataset.
    pub agnostic: Option<AgnosticPair<E>>,
}

#[derive(Serialize, Deserialize)]
struct JointsRecord {
    id: String,
    joints: Vec<[f64; 2]>,
}

fn sample_id(idx: usize) -> String {
    format!("s{idx:05}")
}

/// Per-sample generation seed, spread from the dataset seed by hashing.
fn sample_seed(dataset_seed: u64, idx: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(dataset_seed.to_le_bytes());
    hasher.update((idx as u64).to_le_bytes());
    let d = hasher.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Deterministic split: rank ids by the hash of (seed, id) with the id as a
/// tiebreaker, then take the first 85% (rounded, clamped so both sides are
/// non-empty whenever possible) as training samples.
pub fn split_ids(seed: u64, ids: &[String]) -> (Vec<String>, Vec<String>) {
    let mut ranked: Vec<([u8; 32], &String)> = ids
        .iter()
        .map(|id| {
            let mut hasher = Sha256::new();
            hasher.update(seed.to_le_bytes());
            hasher.update(id.as_bytes());
            (hasher.finalize().into(), id)
        })
        .collect();
    ranked.sort();
    let n = ids.len();
    let n_train = if n <= 1 { n } else { ((n * TRAIN_PERCENT + 50) / 100).clamp(1, n - 1) };
    let mut train: Vec<String> = ranked[..n_train].iter().map(|(_, id)| (*id).clone()).collect();
    let mut test: Vec<String> = ranked[n_train..].iter().map(|(_, id)| (*id).clone()).collect();
    train.sort();
    test.sort();
    (train, test)
}

/// Serialize a JSON value with stable formatting and a trailing newline.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Dataset(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Hex SHA-256 over the named files: for each, the relative name, a zero
/// byte, the contents, a zero byte. Order matters and is fixed by the caller.
pub fn content_hash(root: &Path, rel_paths: &[String]) -> Result<String> {
    let mut hasher = Sha256::new();
    for rel in rel_paths {
        let p = root.join(rel);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(&bytes);
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn require_empty_or_force(root: &Path, force: bool) -> Result<()> {
    if root.exists() {
        let occupied = std::fs::read_dir(root)
            .map_err(|e| Error::io(root.display().to_string(), e))?
            .next()
            .is_some();
        if occupied {
            if !force {
                return Err(Error::Dataset(format!(
                    "{} already exists and is not empty; pass --force to replace it",
                    root.display()
                )));
            }
            std::fs::remove_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    Ok(())
}

const SAMPLE_FILES: [&str; 5] = ["image.png", "seg.png", "pose.png", "cloth.png", "cloth_mask.png"];
const AGNOSTIC_FILES: [&str; 3] = ["image_a.png", "seg_a.png", "mask_removed.png"];

/// Generate `count` synthetic samples under `root`.
pub fn generate(root: &Path, count: usize, seed: u64, h: usize, w: usize, force: bool) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    require_empty_or_force(root, force)?;

    let mut joints_lines = String::new();
    let mut ids = Vec::with_capacity(count);
    for idx in 0..count {
        let id = sample_id(idx);
        let s = synth_sample::<f32>(sample_seed(seed, idx), h, w);
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        imageio::save_signed(&dir.join("image.png"), &s.image)?;
        imageio::save_label(&dir.join("seg.png"), &s.seg)?;
        imageio::save_unit(&dir.join("pose.png"), &s.pose)?;
        imageio::save_signed(&dir.join("cloth.png"), &s.cloth)?;
        imageio::save_mask(&dir.join("cloth_mask.png"), &s.cloth_mask)?;
        let record = JointsRecord { id: id.clone(), joints: s.joints };
        joints_lines.push_str(
            &serde_json::to_string(&record)
                .map_err(|e| Error::Dataset(format!("joints record: {e}")))?,
        );
        joints_lines.push('\n');
        ids.push(id);
    }
    let joints_path = root.join("joints.jsonl");
    std::fs::write(&joints_path, joints_lines)
        .map_err(|e| Error::io(joints_path.display().to_string(), e))?;

    let mut hashed: Vec<String> = Vec::new();
    for id in &ids {
        for f in SAMPLE_FILES {
            hashed.push(format!("{id}/{f}"));
        }
    }
    hashed.push("joints.jsonl".into());
    let hash = content_hash(root, &hashed)?;

    let (train, test) = split_ids(seed, &ids);
    write_json(
        &root.join("manifest.json"),
        &serde_json::json!({
            "kind": "dataset",
            "count": count,
            "h": h,
            "w": w,
            "seed": seed,
            "train": train,
            "test": test,
            "content_hash": hash,
        }),
    )?;
    Ok(Dataset { root: root.to_path_buf(), h, w, seed, train, test })
}

/// Compute and store the clothing-agnostic artifacts for every sample.
pub fn preprocess(root: &Path, padding_px: usize, force: bool) -> Result<()> {
    let ds = Dataset::open(root)?;
    let marker = root.join("preprocess.json");
    if marker.exists() && !force {
        return Err(Error::Dataset(format!(
            "{} is already preprocessed; pass --force to redo it",
            root.display()
        )));
    }
    let joints = load_joints(root)?;
    let mut hashed = Vec::new();
    for id in ds.ids() {
        let dir = root.join(&id);
        let image = imageio::load_signed::<f32>(&dir.join("image.png"))?;
        let seg = imageio::load_label(&dir.join("seg.png"))?;
        let j = joints
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Dataset(format!("no joints record for {id}")))?;
        let ag = build_agnostic(&image, &seg, &j.joints, padding_px)?;
        imageio::save_signed(&dir.join("image_a.png"), &ag.image_a)?;
        imageio::save_label(&dir.join("seg_a.png"), &ag.seg_a)?;
        imageio::save_mask(&dir.join("mask_removed.png"), &ag.mask_removed)?;
        for f in AGNOSTIC_FILES {
            hashed.push(format!("{id}/{f}"));
        }
    }
    let hash = content_hash(root, &hashed)?;
    write_json(
        &marker,
        &serde_json::json!({
            "kind": "preprocess",
            "padding_px": padding_px,
            "content_hash": hash,
        }),
    )
}

fn load_joints(root: &Path) -> Result<Vec<JointsRecord>> {
    let path = root.join("joints.jsonl");
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Dataset(format!("joints.jsonl: {e}")))
        })
        .collect()
}

fn json_usize(v: &serde_json::Value, key: &str) -> Result<usize> {
    v.get(key)
        .and_then(|x| x.as_u64())
        .map(|x| x as usize)
        .ok_or_else(|| Error::Dataset(format!("manifest missing numeric field {key:?}")))
}

fn json_ids(v: &serde_json::Value, key: &str) -> Result<Vec<String>> {
    v.get(key)
        .and_then(|x| x.as_array())
        .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        .ok_or_else(|| Error::Dataset(format!("manifest missing list field {key:?}")))
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_json(&root.join("manifest.json"))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            h: json_usize(&manifest, "h")?,
            w: json_usize(&manifest, "w")?,
            seed: json_usize(&manifest, "seed")? as u64,
            train: json_ids(&manifest, "train")?,
            test: json_ids(&manifest, "test")?,
        })
    }

    /// All sample ids, training first, each group sorted.
    pub fn ids(&self) -> Vec<String> {
        self.train.iter().chain(self.test.iter()).cloned().collect()
    }

    pub fn load<E: Element>(&self, id: &str) -> Result<LoadedSample<E>> {
        let dir = self.root.join(id);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("sample {id} not found in {}", self.root.display())));
        }
        let joints = load_joints(&self.root)?
            .into_iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Dataset(format!("no joints record for {id}")))?
            .joints;
        let agnostic = if dir.join("image_a.png").exists() {
            Some(AgnosticPair {
                image_a: imageio::load_signed(&dir.join("image_a.png"))?,
                seg_a: imageio::load_label(&dir.join("seg_a.png"))?,
                mask_removed: imageio::load_mask(&dir.join("mask_removed.png"))?,
            })
        } else {
            None
        };
        Ok(LoadedSample {
            id: id.to_string(),
            image: imageio::load_signed(&dir.join("image.png"))?,
            seg: imageio::load_label(&dir.join("seg.png"))?,
            pose: imageio::load_unit(&dir.join("pose.png"))?,
            cloth: imageio::load_signed(&dir.join("cloth.png"))?,
            cloth_mask: imageio::load_mask(&dir.join("cloth_mask.png"))?,
            joints,
            agnostic,
        })
    }

    /// Load several samples; order follows `ids`.
    pub fn load_many<E: Element>(&self, ids: &[String]) -> Result<Vec<LoadedSample<E>>> {
        ids.iter().map(|id| self.load(id)).collect()
    }

    pub fn manifest_hash(&self) -> Result<String> {
        let manifest = read_json(&self.root.join("manifest.json"))?;
        manifest
            .get("content_hash")
            .and_then(|v| v.as_str())
            .map(String::from)
            .ok_or_else(|| Error::Dataset("manifest missing content_hash".into()))
    }
}
