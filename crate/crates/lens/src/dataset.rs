//! Dataset directories: `manifest.json` plus `train.jsonl`, `val.jsonl` and
//! `test.jsonl`, one sample per line.

use std::path::{Path, PathBuf};

use lens_core::data::{answer_vocab, DataConfig, Dataset, Prototypes, RarityTable, Sample, Template, Vocab};
use lens_core::train::function_names;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Environment variable naming the dataset cache directory.
pub const CACHE_ENV: &str = "REASONING_LENS_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// SHA-256 over the canonical JSON of `config`.
    pub fingerprint: String,
    pub seed: u64,
    pub config: DataConfig,
    pub vocabulary: Vec<String>,
    pub answers: Vec<String>,
    pub functions: Vec<String>,
    pub templates: Vec<Template>,
    pub prototypes: Prototypes,
    pub rarity: RarityTable,
    pub warnings: Vec<String>,
    pub counts: [usize; 3],
}

pub fn fingerprint(config: &DataConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

pub fn save(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (name, samples) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        io::write_jsonl(&dir.join(format!("{name}.jsonl")), samples)?;
    }
    let manifest = DatasetManifest {
        format_version: crate::FORMAT_VERSION,
        fingerprint: fingerprint(&ds.config),
        seed: ds.config.seed,
        config: ds.config.clone(),
        vocabulary: ds.vocab.tokens().to_vec(),
        answers: answer_vocab(),
        functions: function_names().into_iter().map(String::from).collect(),
        templates: ds.config.templates.clone(),
        prototypes: ds.prototypes.clone(),
        rarity: ds.rarity.clone(),
        warnings: ds.warnings.clone(),
        counts: [ds.train.len(), ds.val.len(), ds.test.len()],
    };
    // Written last: a directory with a manifest is complete.
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let m: DatasetManifest = io::read_json(&mpath)?;
    if m.format_version != crate::FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported format version {}", m.format_version)));
    }
    let vocab = Vocab::from_tokens(m.vocabulary)?;
    let mut splits: Vec<Vec<Sample>> = Vec::new();
    for (name, &n) in SPLITS.iter().zip(&m.counts) {
        let path = dir.join(format!("{name}.jsonl"));
        let samples: Vec<Sample> = io::read_jsonl(&path)?;
        if samples.len() != n {
            return Err(Error::format(&path, format!("{} samples where the manifest lists {n}", samples.len())));
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        config: m.config,
        vocab,
        prototypes: m.prototypes,
        rarity: m.rarity,
        train,
        val,
        test,
        warnings: m.warnings,
    })
}

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Generates the dataset for `config`, going through the cache directory
/// when one is configured.
pub fn load_or_generate(config: &DataConfig) -> Result<Dataset> {
    let Some(cache) = cache_dir() else {
        return Ok(Dataset::generate(config.clone())?);
    };
    let dir = cache.join(&fingerprint(config)[..16]);
    if dir.join("manifest.json").exists() {
        let ds = load(&dir)?;
        if ds.config == *config {
            return Ok(ds);
        }
    }
    let ds = Dataset::generate(config.clone())?;
    save(&dir, &ds)?;
    Ok(ds)
}
