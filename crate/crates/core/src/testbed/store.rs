//! Dataset directories.
//!
//! ```text
//! <dir>/meta.json               config echo, per-file SHA-256, content hash
//! <dir>/<split>/images.ssca     [n, h, w, c] tensor
//! <dir>/<split>/labels.csv      index,label,cue
//! <dir>/donors/images.ssca      donor backgrounds
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetSplit, ShortcutDatasetConfig, SplitName};
use crate::error::{Error, Result};
use crate::imaging::io::{stack_images, unstack_images, write_atomic, Tensor};
use crate::imaging::Image;
use crate::TOOL_VERSION;

pub const DATASET_FORMAT: &str = "ssca-dataset";
pub const DATASET_VERSION: u32 = 1;
const DONOR_DIR: &str = "donors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config: ShortcutDatasetConfig,
    pub counts: BTreeMap<String, usize>,
    pub files: Vec<FileDigest>,
    /// SHA-256 over every data file's bytes in `files` order.
    pub content_hash: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn labels_csv(split: &DatasetSplit) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "label", "cue"])?;
    for (i, (label, cue)) in split.labels.iter().zip(&split.cues).enumerate() {
        w.write_record([
            i.to_string(),
            label.to_string(),
            cue.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

fn images_bytes(images: &[Image], dims: (usize, usize, usize)) -> Result<Vec<u8>> {
    if images.is_empty() {
        let (h, w, c) = dims;
        return Ok(Tensor::new(vec![0, h, w, c], vec![])?.to_bytes());
    }
    Ok(stack_images(images)?.to_bytes())
}

/// Serialized files in canonical order, paths relative to the dataset root.
fn encode(ds: &Dataset) -> Result<Vec<(String, Vec<u8>)>> {
    let dims = ds.config.image_dims();
    let mut files = Vec::new();
    for split in &ds.splits {
        files.push((
            format!("{}/images.ssca", split.name),
            images_bytes(&split.images, dims)?,
        ));
        files.push((format!("{}/labels.csv", split.name), labels_csv(split)?));
    }
    files.push((
        format!("{DONOR_DIR}/images.ssca"),
        images_bytes(&ds.donors, dims)?,
    ));
    Ok(files)
}

fn content_hash(files: &[(String, Vec<u8>)]) -> String {
    let mut h = Sha256::new();
    for (_, bytes) in files {
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

/// Writes the dataset and returns its metadata. The metadata file is
/// written last, so a directory with a `meta.json` is complete.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetMeta> {
    let files = encode(ds)?;
    for (rel, bytes) in &files {
        write_atomic(&dir.join(rel), bytes)?;
    }
    let mut counts: BTreeMap<String, usize> = ds
        .splits
        .iter()
        .map(|s| (s.name.to_string(), s.len()))
        .collect();
    counts.insert(DONOR_DIR.into(), ds.donors.len());
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        tool_version: TOOL_VERSION.into(),
        config: ds.config.clone(),
        counts,
        files: files
            .iter()
            .map(|(p, b)| FileDigest {
                path: p.clone(),
                sha256: sha_hex(b),
            })
            .collect(),
        content_hash: content_hash(&files),
    };
    let json = serde_json::to_vec_pretty(&meta)?;
    write_atomic(&dir.join("meta.json"), &json)?;
    Ok(meta)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_slice(&read(&path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "{} is not a dataset directory",
            dir.display()
        )));
    }
    if meta.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {} unsupported",
            meta.version
        )));
    }
    Ok(meta)
}

fn parse_labels(
    bytes: &[u8],
    n: usize,
    num_classes: usize,
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut labels = Vec::with_capacity(n);
    let mut cues = Vec::with_capacity(n);
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let bad = || Error::Format(format!("labels.csv row {}: {:?}", i + 1, rec));
        if field(0).parse::<usize>().map_err(|_| bad())? != i {
            return Err(bad());
        }
        let label: usize = field(1).parse().map_err(|_| bad())?;
        let cue = match field(2) {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad())?),
        };
        if label >= num_classes || cue.is_some_and(|c| c >= num_classes) {
            return Err(bad());
        }
        labels.push(label);
        cues.push(cue);
    }
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{} labels for {n} images",
            labels.len()
        )));
    }
    Ok((labels, cues))
}

fn parse_images(bytes: &[u8], dims: (usize, usize, usize)) -> Result<Vec<Image>> {
    let t = Tensor::from_bytes(bytes)?;
    let (h, w, c) = dims;
    if t.dims.len() != 4 || t.dims[1..] != [h, w, c] {
        return Err(Error::Format(format!(
            "image tensor {:?} does not match {h}x{w}x{c}",
            t.dims
        )));
    }
    if t.dims[0] == 0 {
        return Ok(Vec::new());
    }
    unstack_images(&t)
}

/// Loads a dataset, verifying every file against `meta.json`.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta = load_meta(dir)?;
    meta.config.validate()?;
    let mut bytes = Vec::with_capacity(meta.files.len());
    for f in &meta.files {
        let b = read(&dir.join(&f.path))?;
        if sha_hex(&b) != f.sha256 {
            return Err(Error::Format(format!(
                "{} does not match its recorded hash",
                f.path
            )));
        }
        bytes.push((f.path.clone(), b));
    }
    if content_hash(&bytes) != meta.content_hash {
        return Err(Error::Format("dataset content hash mismatch".into()));
    }
    let lookup = |rel: &str| -> Result<&[u8]> {
        bytes
            .iter()
            .find(|(p, _)| p == rel)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Format(format!("meta.json lists no {rel}")))
    };
    let dims = meta.config.image_dims();
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let images = parse_images(lookup(&format!("{name}/images.ssca"))?, dims)?;
        let (labels, cues) = parse_labels(
            lookup(&format!("{name}/labels.csv"))?,
            images.len(),
            meta.config.num_classes,
        )?;
        splits.push(DatasetSplit {
            name,
            images,
            labels,
            cues,
        });
    }
    let donors = parse_images(lookup(&format!("{DONOR_DIR}/images.ssca"))?, dims)?;
    let ds = Dataset {
        config: meta.config.clone(),
        splits,
        donors,
    };
    Ok((ds, meta))
}
