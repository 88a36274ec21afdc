#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lens_core::data::{DataConfig, Dataset, InputKind};
use lens_core::model::{EncoderKind, VlTransformer};
use lens_core::rng::rng_for;
use lens_core::train::{ModelSpec, Profile};
use reasoning_lens::dump::{self, AttentionDump, DataRef};
use reasoning_lens::{checkpoint, dataset};

pub fn small_data(seed: u64) -> DataConfig {
    DataConfig { seed, n_train: 300, n_val: 40, n_test: 20, ..DataConfig::default() }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub ds: Dataset,
    pub data_dir: PathBuf,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(small_data(seed)).unwrap();
        let data_dir = dir.path().join("data");
        dataset::save(&data_dir, &ds).unwrap();
        Self { dir, ds, data_dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn model(&self, profile: Profile, encoder: EncoderKind, seed: u64) -> VlTransformer {
        let spec = ModelSpec { profile, ..ModelSpec::default() };
        VlTransformer::new(spec.config(&self.ds, encoder), &mut rng_for(seed, "fixture", 0)).unwrap()
    }

    /// Saves `model` as `<name>.ckpt` and dumps the first `n` val samples.
    pub fn dump(&self, name: &str, model: &VlTransformer, n: usize) -> (PathBuf, AttentionDump) {
        let ckpt = self.path(&format!("{name}.ckpt"));
        checkpoint::save(&ckpt, model, serde_json::json!({ "stage": name })).unwrap();
        let input = InputKind::for_encoder(model.config().encoder);
        let data = DataRef::new(Some(&self.data_dir), &self.ds.config, "val");
        let d = dump::write(&self.path(&format!("dump-{name}")), model, Some(&ckpt), &self.ds, Some(data), &self.ds.val[..n], input)
            .unwrap();
        (ckpt, d)
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
