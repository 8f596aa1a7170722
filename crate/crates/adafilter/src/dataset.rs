//! On-disk task pairs.
//!
//! A task pair directory holds `pair.json` plus one directory per task, each
//! with a `manifest.json` and one raw file per split. A split file is a
//! sequence of fixed-size records:
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 4                | label, `u32` little-endian               |
//! | 4 * C * H * W    | pixels, `f32` little-endian, `[C, H, W]` |
//!
//! The manifest records the SHA-256 of each split file and per-channel
//! normalization constants measured on the train split.

use std::fs;
use std::path::{Path, PathBuf};

use adafilter_core::data::Dataset;
use adafilter_core::synth::{self, SynthConfig, TaskPair};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, io_err, Error, Result};

pub const MANIFEST_FORMAT: &str = "adafilter-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const PAIR_FILE: &str = "pair.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    /// File name relative to the manifest.
    pub file: String,
    pub examples: usize,
    pub per_class: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub classes: usize,
    pub train: SplitInfo,
    pub eval: SplitInfo,
    pub normalization: Normalization,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &SplitInfo {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// `pair.json`: how the pair was generated and where its tasks live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFile {
    pub synth: SynthConfig,
    pub source: String,
    pub target: String,
    pub target_generators: Vec<u64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_split(data: &Dataset) -> Vec<u8> {
    let per = data.image_len();
    let mut out = Vec::with_capacity(data.len() * (4 + 4 * per));
    for i in 0..data.len() {
        out.extend_from_slice(&(data.labels[i] as u32).to_le_bytes());
        for &v in data.image(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_split(bytes: &[u8], shape: [usize; 3], classes: usize, path: &Path) -> Result<Dataset> {
    let per = shape.iter().product::<usize>();
    let record = 4 + 4 * per;
    if !bytes.len().is_multiple_of(record) {
        return Err(format_err(path, format!("{} bytes is not a whole number of {record}-byte records", bytes.len())));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * per);
    for rec in bytes.chunks_exact(record) {
        labels.push(u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize);
        images.extend(rec[4..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64));
    }
    Dataset::new(shape, classes, images, labels).map_err(|e| format_err(path, e.to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_task(dir: &Path, name: &str, seed: u64, train: &Dataset, eval: &Dataset, train_per_class: usize, eval_per_class: usize) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let info = |split: Split, data: &Dataset, per_class: usize| -> Result<SplitInfo> {
        let file = format!("{}.bin", split.name());
        let bytes = encode_split(data);
        write(&dir.join(&file), &bytes)?;
        Ok(SplitInfo {
            file,
            examples: data.len(),
            per_class,
            sha256: sha256_hex(&bytes),
        })
    };
    let train_info = info(Split::Train, train, train_per_class)?;
    let eval_info = info(Split::Eval, eval, eval_per_class)?;
    let (mean, std) = train.channel_moments();
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: name.into(),
        shape: train.shape,
        classes: train.classes,
        train: train_info,
        eval: eval_info,
        normalization: Normalization { mean, std },
        seed,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.to_string()))
}

/// Generates a task pair and writes it under `dir`.
pub fn generate_pair(cfg: &SynthConfig, dir: &Path) -> Result<PairFile> {
    let pair = synth::generate(cfg)?;
    write_pair(cfg, &pair, dir)
}

fn write_pair(cfg: &SynthConfig, pair: &TaskPair, dir: &Path) -> Result<PairFile> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_task(&dir.join("source"), "source", cfg.seed, &pair.source_train, &pair.source_eval, cfg.source_train_per_class, cfg.source_eval_per_class)?;
    write_task(&dir.join("target"), "target", cfg.seed, &pair.target_train, &pair.target_eval, cfg.target_train_per_class, cfg.target_eval_per_class)?;
    let file = PairFile {
        synth: cfg.clone(),
        source: "source/manifest.json".into(),
        target: "target/manifest.json".into(),
        target_generators: pair.target_generators.clone(),
    };
    write_json(&dir.join(PAIR_FILE), &file)?;
    Ok(file)
}

/// A task pair directory on disk.
#[derive(Debug, Clone)]
pub struct PairDir {
    pub dir: PathBuf,
    pub file: PairFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Source,
    Target,
}

impl PairDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(PAIR_FILE);
        if !path.exists() {
            return Err(format_err(&path, "task pair not found; create it with `adafilter data gen`"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            file: read_json(&path)?,
        })
    }

    /// Opens `dir`, generating it from `cfg` first when absent. An existing
    /// pair must have been generated from the same settings.
    pub fn open_or_generate(dir: &Path, cfg: &SynthConfig) -> Result<Self> {
        if !dir.join(PAIR_FILE).exists() {
            generate_pair(cfg, dir)?;
        }
        let pair = Self::open(dir)?;
        if &pair.file.synth != cfg {
            return Err(Error::Config(format!(
                "data.dir {} holds a pair generated from different settings",
                dir.display()
            )));
        }
        Ok(pair)
    }

    pub fn manifest_path(&self, task: Task) -> PathBuf {
        self.dir.join(match task {
            Task::Source => &self.file.source,
            Task::Target => &self.file.target,
        })
    }

    pub fn manifest(&self, task: Task) -> Result<DatasetManifest> {
        load_manifest(&self.manifest_path(task))
    }

    /// Normalized split of one task.
    pub fn load(&self, task: Task, split: Split) -> Result<Dataset> {
        load_dataset(&self.manifest_path(task), split)
    }

    /// Checks every checksum and that regenerating from the stored seed
    /// reproduces the same bytes.
    pub fn verify(&self) -> Result<()> {
        for task in [Task::Source, Task::Target] {
            let path = self.manifest_path(task);
            let m = load_manifest(&path)?;
            for split in [Split::Train, Split::Eval] {
                read_split(&path, &m, split)?;
            }
        }
        let fresh = synth::generate(&self.file.synth)?;
        if fresh.target_generators != self.file.target_generators {
            return Err(format_err(self.dir.join(PAIR_FILE), "target generators differ from a regeneration"));
        }
        let parts = [
            (Task::Source, Split::Train, &fresh.source_train),
            (Task::Source, Split::Eval, &fresh.source_eval),
            (Task::Target, Split::Train, &fresh.target_train),
            (Task::Target, Split::Eval, &fresh.target_eval),
        ];
        for (task, split, data) in parts {
            let path = self.manifest_path(task);
            let m = load_manifest(&path)?;
            let expected = sha256_hex(&encode_split(data));
            if expected != m.split(split).sha256 {
                return Err(Error::Checksum {
                    path: split_path(&path, &m, split),
                    expected,
                    found: m.split(split).sha256.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(path)?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(format_err(path, format!("unsupported manifest {} v{}", m.format, m.version)));
    }
    if m.normalization.mean.len() != m.shape[0] || m.normalization.std.len() != m.shape[0] {
        return Err(format_err(path, "normalization constants do not match the channel count"));
    }
    Ok(m)
}

fn split_path(manifest_path: &Path, m: &DatasetManifest, split: Split) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(&m.split(split).file)
}

/// Raw (unnormalized) split, checksum-verified.
pub fn read_split(manifest_path: &Path, m: &DatasetManifest, split: Split) -> Result<Dataset> {
    let path = split_path(manifest_path, m, split);
    let bytes = read(&path)?;
    let info = m.split(split);
    let found = sha256_hex(&bytes);
    if found != info.sha256 {
        return Err(Error::Checksum {
            path,
            expected: info.sha256.clone(),
            found,
        });
    }
    let data = decode_split(&bytes, m.shape, m.classes, &path)?;
    if data.len() != info.examples || data.class_counts().iter().any(|&c| c != info.per_class) {
        return Err(format_err(&path, "split size or per-class counts differ from the manifest"));
    }
    Ok(data)
}

/// Checksum-verified split normalized with the manifest's constants.
pub fn load_dataset(manifest_path: &Path, split: Split) -> Result<Dataset> {
    let m = load_manifest(manifest_path)?;
    let mut data = read_split(manifest_path, &m, split)?;
    data.normalize(&m.normalization.mean, &m.normalization.std)?;
    Ok(data)
}
