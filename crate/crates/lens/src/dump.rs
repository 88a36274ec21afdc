//! Attention dumps.
//!
//! A dump directory holds `manifest.json` ([`DumpManifest`]) and one blob
//! per sample, `<id>.bin`: every attention matrix of the sample in manifest
//! head order, row-major little-endian `f32`, back to back.

use std::fs;
use std::path::{Path, PathBuf};

use lens_core::data::{DataConfig, Dataset, InputKind, Sample};
use lens_core::model::{AttentionRecord, HeadAddress, ModelConfig, PruneMask, VlTransformer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{checkpoint, dataset, io};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    /// Dataset directory, when the data came from one.
    pub dir: Option<PathBuf>,
    pub fingerprint: String,
    pub config: DataConfig,
    pub split: String,
}

impl DataRef {
    pub fn new(dir: Option<&Path>, config: &DataConfig, split: &str) -> Self {
        Self {
            dir: dir.map(absolute),
            fingerprint: dataset::fingerprint(config),
            config: config.clone(),
            split: split.into(),
        }
    }

    /// Loads the referenced dataset, regenerating it when the directory is gone.
    pub fn load(&self) -> Result<Dataset> {
        if let Some(dir) = self.dir.as_ref().filter(|d| d.join("manifest.json").exists()) {
            let ds = dataset::load(dir)?;
            if dataset::fingerprint(&ds.config) == self.fingerprint {
                return Ok(ds);
            }
        }
        dataset::load_or_generate(&self.config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub rows: usize,
    pub cols: usize,
    /// In `f32` elements from the start of the sample's blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpSample {
    pub id: u64,
    pub file: String,
    pub matrices: Vec<MatrixEntry>,
    pub logits: Vec<f32>,
    pub prediction: usize,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub checkpoint: Option<CheckpointRef>,
    pub data: Option<DataRef>,
    pub input: InputKind,
    pub heads: Vec<HeadAddress>,
    pub samples: Vec<DumpSample>,
}

pub struct AttentionDump {
    pub dir: PathBuf,
    pub manifest: DumpManifest,
}

pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Runs capture-enabled forwards over `samples` and writes the dump to
/// `out`. The dump is assembled in a sibling directory and moved into
/// place, so a failure leaves nothing behind.
pub fn write(
    out: &Path,
    model: &VlTransformer,
    checkpoint_path: Option<&Path>,
    ds: &Dataset,
    data: Option<DataRef>,
    samples: &[Sample],
    input: InputKind,
) -> Result<AttentionDump> {
    if samples.is_empty() {
        return Err(Error::Runtime("nothing to dump: empty sample slice".into()));
    }
    let mut partial = out.as_os_str().to_os_string();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(Error::io(&partial))?;
    }
    let result = write_into(&partial, model, checkpoint_path, ds, data, samples, input);
    match result {
        Ok(manifest) => {
            if out.exists() {
                fs::remove_dir_all(out).map_err(Error::io(out))?;
            }
            fs::rename(&partial, out).map_err(Error::io(out))?;
            Ok(AttentionDump { dir: out.to_path_buf(), manifest })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

fn write_into(
    dir: &Path,
    model: &VlTransformer,
    checkpoint_path: Option<&Path>,
    ds: &Dataset,
    data: Option<DataRef>,
    samples: &[Sample],
    input: InputKind,
) -> Result<DumpManifest> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let checkpoint = match checkpoint_path {
        Some(p) => Some(CheckpointRef { path: absolute(p), sha256: checkpoint::file_sha256(p)? }),
        None => None,
    };
    let heads = model.config().all_heads();
    let mut entries = Vec::with_capacity(samples.len());
    let none = PruneMask::none();
    for chunk in samples.chunks(64) {
        let inputs = ds.inputs(chunk, input);
        let refs: Vec<_> = inputs.iter().collect();
        for (s, out) in chunk.iter().zip(model.forward_batch(&refs, &none, true)?) {
            let mut blob = Vec::new();
            let mut matrices = Vec::with_capacity(out.records.len());
            for r in &out.records {
                matrices.push(MatrixEntry { rows: r.rows, cols: r.cols, offset: blob.len() / 4 });
                for v in &r.weights {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            let file = format!("{}.bin", s.id);
            let path = dir.join(&file);
            fs::write(&path, &blob).map_err(Error::io(&path))?;
            entries.push(DumpSample {
                id: s.id,
                file,
                matrices,
                prediction: out.prediction(),
                logits: out.logits,
                answer: s.answer(),
            });
        }
    }
    let manifest = DumpManifest {
        format_version: crate::FORMAT_VERSION,
        model: model.config().clone(),
        checkpoint,
        data,
        input,
        heads,
        samples: entries,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

impl AttentionDump {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: DumpManifest = io::read_json(&path)?;
        if manifest.format_version != crate::FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        for s in &manifest.samples {
            if s.matrices.len() != manifest.heads.len() {
                return Err(Error::format(&path, format!("sample {} lists {} matrices", s.id, s.matrices.len())));
            }
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.manifest.samples.iter().position(|s| s.id == id)
    }

    /// Attention records of the `i`-th dumped sample, in head order.
    pub fn records(&self, i: usize) -> Result<Vec<AttentionRecord>> {
        let s = &self.manifest.samples[i];
        let path = self.dir.join(&s.file);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut out = Vec::with_capacity(s.matrices.len());
        for (m, head) in s.matrices.iter().zip(&self.manifest.heads) {
            let end = m.offset + m.rows * m.cols;
            if bytes.len() % 4 != 0 || end > values.len() {
                return Err(Error::format(&path, format!("matrix of head {head} runs past the blob")));
            }
            out.push(AttentionRecord {
                sample_id: s.id,
                head: *head,
                rows: m.rows,
                cols: m.cols,
                weights: values[m.offset..end].to_vec(),
            });
        }
        Ok(out)
    }

    pub fn load_model(&self) -> Result<VlTransformer> {
        let c = self
            .manifest
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Runtime(format!("dump {} names no checkpoint", self.dir.display())))?;
        let (model, _) = checkpoint::load(&c.path)?;
        Ok(model)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        self.manifest
            .data
            .as_ref()
            .ok_or_else(|| Error::Runtime(format!("dump {} names no dataset", self.dir.display())))?
            .load()
    }

    /// The dumped samples, looked up in their split of `ds`.
    pub fn samples<'a>(&self, ds: &'a Dataset) -> Result<Vec<&'a Sample>> {
        let split = self.manifest.data.as_ref().map(|d| d.split.as_str()).unwrap_or("val");
        let all = ds.split(split)?;
        self.manifest
            .samples
            .iter()
            .map(|s| {
                all.iter()
                    .find(|x| x.id == s.id)
                    .ok_or_else(|| Error::Runtime(format!("sample {} is not in split `{split}`", s.id)))
            })
            .collect()
    }
}
