//! Dataset generation, splits and rare-answer annotation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::ANSWER_COUNT;
use super::encode::{
    encode_dense_width, encode_oracle, encode_predicted, simulate_detection, visual_width, DetectedScene, NoiseConfig,
    PrototypeConfig, Prototypes,
};
use super::question::{generate_question, QuestionSpec, Template};
use super::scene::{generate_scene, Scene, SceneConfig};
use super::vocab::Vocab;
use crate::error::{LensError, Result};
use crate::model::{EncoderKind, ModelInput};
use crate::rng::rng_for;

pub const MISC_GROUP: &str = "misc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub prototypes: PrototypeConfig,
    /// Visual tokens are padded to this many rows.
    pub max_objects: usize,
    pub max_question_len: usize,
    pub templates: Vec<Template>,
    /// Tail/head boundary on the answer-frequency quantile.
    pub alpha_star: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 40_000,
            n_val: 5_000,
            n_test: 5_000,
            scene: SceneConfig::default(),
            noise: NoiseConfig::default(),
            prototypes: PrototypeConfig::default(),
            max_objects: 16,
            max_question_len: 16,
            templates: Template::ALL.to_vec(),
            alpha_star: 0.2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.noise;
        for (name, v) in [("p_miss", p.p_miss), ("p_dup", p.p_dup), ("p_err", p.p_err), ("p_near", p.p_near)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LensError::Config(format!("noise.{name} = {v} is not a probability")));
            }
        }
        if p.sigma_box < 0.0 || p.sigma_emb < 0.0 {
            return Err(LensError::Config("noise standard deviations must be non-negative".into()));
        }
        if self.scene.min_objects < 1 || self.scene.min_objects > self.scene.max_objects {
            return Err(LensError::Config("scene object bounds must satisfy 1 <= min <= max".into()));
        }
        if self.scene.max_objects > self.max_objects {
            return Err(LensError::Config("scenes may not exceed max_objects".into()));
        }
        if self.templates.is_empty() {
            return Err(LensError::Config("no templates".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_star) {
            return Err(LensError::Config("alpha_star must lie in [0, 1]".into()));
        }
        if self.n_train == 0 {
            return Err(LensError::Config("n_train must be positive".into()));
        }
        Ok(())
    }
}

/// Rarity of a sample's answer within its question group, measured on train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rarity {
    /// Group the statistics come from (`misc` for merged groups).
    pub group: String,
    pub answer_count: u32,
    pub group_count: u32,
    /// Share of the group's training samples whose answer is at most as
    /// frequent as this one; 0 for answers never seen in training.
    pub quantile: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub scene: Scene,
    pub detections: DetectedScene,
    pub question: QuestionSpec,
    /// CLS followed by the question's token ids, unpadded.
    pub tokens: Vec<u32>,
    pub rarity: Option<Rarity>,
}

impl Sample {
    pub fn answer(&self) -> usize {
        self.question.answer.index()
    }

    pub fn quantile(&self) -> f64 {
        self.rarity.as_ref().map_or(1.0, |r| r.quantile)
    }

    pub fn is_tail(&self, alpha: f64) -> bool {
        self.quantile() <= alpha
    }
}

/// Per-group answer counts from the training split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RarityTable {
    pub counts: BTreeMap<String, BTreeMap<usize, u32>>,
    /// Groups folded into `misc` because training showed a single answer.
    pub merged: Vec<String>,
}

impl RarityTable {
    pub fn from_train<'a>(train: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut raw: BTreeMap<String, BTreeMap<usize, u32>> = BTreeMap::new();
        for s in train {
            *raw.entry(s.question.group.clone()).or_default().entry(s.answer()).or_default() += 1;
        }
        Self::from_counts(raw)
    }

    pub fn from_counts(raw: BTreeMap<String, BTreeMap<usize, u32>>) -> Self {
        let mut counts = BTreeMap::new();
        let mut merged = Vec::new();
        let mut misc: BTreeMap<usize, u32> = BTreeMap::new();
        for (g, c) in raw {
            if c.len() < 2 {
                for (a, n) in &c {
                    *misc.entry(*a).or_default() += n;
                }
                merged.push(g);
            } else {
                counts.insert(g, c);
            }
        }
        if !misc.is_empty() {
            counts.insert(MISC_GROUP.into(), misc);
        }
        Self { counts, merged }
    }

    pub fn effective_group<'a>(&self, group: &'a str) -> &'a str {
        if self.counts.contains_key(group) && group != MISC_GROUP {
            group
        } else {
            MISC_GROUP
        }
    }

    pub fn annotate(&self, group: &str, answer: usize) -> Rarity {
        let g = self.effective_group(group);
        let Some(c) = self.counts.get(g) else {
            return Rarity { group: g.into(), answer_count: 0, group_count: 0, quantile: 0.0 };
        };
        let total: u32 = c.values().sum();
        let mine = c.get(&answer).copied().unwrap_or(0);
        let quantile = if mine == 0 || total == 0 {
            0.0
        } else {
            c.values().filter(|&&n| n <= mine).sum::<u32>() as f64 / total as f64
        };
        Rarity { group: g.into(), answer_count: mine, group_count: total, quantile }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DataConfig,
    pub vocab: Vocab,
    pub prototypes: Prototypes,
    pub rarity: RarityTable,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// Which visual encoding to feed the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// One-hot ground truth.
    Oracle,
    /// Dense detector embeddings.
    Dense,
    /// One-hot tokens decoded from detections.
    Predicted,
}

impl InputKind {
    pub fn encoder(self) -> EncoderKind {
        match self {
            Self::Oracle | Self::Predicted => EncoderKind::OracleSymbolic,
            Self::Dense => EncoderKind::NoisyDense,
        }
    }

    pub fn for_encoder(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::OracleSymbolic => Self::Oracle,
            EncoderKind::NoisyDense => Self::Dense,
        }
    }
}

/// Generates sample `index` of the stream defined by `config`.
pub fn generate_sample(config: &DataConfig, vocab: &Vocab, protos: &Prototypes, index: u64) -> Result<Sample> {
    let mut rng = rng_for(config.seed, "sample", index);
    for _ in 0..1000 {
        let scene = generate_scene(&mut rng, &config.scene);
        for _ in 0..8 {
            let template = config.templates[rng.random_range(0..config.templates.len())];
            if let Some(question) = generate_question(&mut rng, &scene, template) {
                let tokens = vocab.tokenize(&question.text, config.max_question_len)?;
                let n = tokens.mask.iter().filter(|&&m| m).count();
                let mut det_rng = rng_for(config.seed, "detect", index);
                let detections = simulate_detection(&scene, &config.noise, protos, config.max_objects, &mut det_rng);
                return Ok(Sample { id: index, scene, detections, question, tokens: tokens.ids[..n].to_vec(), rarity: None });
            }
        }
    }
    Err(LensError::Config("templates never apply to generated scenes".into()))
}

/// Splits consecutive samples into train/val/test, measures answer counts
/// on train only and annotates every sample.
pub fn build_splits(
    mut samples: Vec<Sample>,
    n_train: usize,
    n_val: usize,
) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>, RarityTable, Vec<String>) {
    let rest = samples.split_off(n_train.min(samples.len()));
    let train = samples;
    let mut val = rest;
    let test = val.split_off(n_val.min(val.len()));
    let table = RarityTable::from_train(&train);
    let warnings = table
        .merged
        .iter()
        .map(|g| format!("question group `{g}` has a single training answer; merged into `{MISC_GROUP}`"))
        .collect();
    let (mut train, mut val, mut test) = (train, val, test);
    for s in train.iter_mut().chain(val.iter_mut()).chain(test.iter_mut()) {
        s.rarity = Some(table.annotate(&s.question.group, s.answer()));
    }
    (train, val, test, table, warnings)
}

impl Dataset {
    pub fn generate(config: DataConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::default();
        let prototypes = Prototypes::generate(&config.prototypes, config.seed);
        let total = (config.n_train + config.n_val + config.n_test) as u64;
        let samples = (0..total)
            .map(|i| generate_sample(&config, &vocab, &prototypes, i))
            .collect::<Result<Vec<_>>>()?;
        let (train, val, test, rarity, warnings) = build_splits(samples, config.n_train, config.n_val);
        Ok(Self { config, vocab, prototypes, rarity, train, val, test, warnings })
    }

    pub fn answer_count(&self) -> usize {
        ANSWER_COUNT
    }

    pub fn visual_width(&self, kind: EncoderKind) -> usize {
        visual_width(kind, &self.prototypes)
    }

    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" | "test-dev" => Ok(&self.test),
            other => Err(LensError::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn input(&self, sample: &Sample, kind: InputKind) -> ModelInput {
        let max_len = self.config.max_question_len;
        let mut question = sample.tokens.clone();
        let mut question_mask = alloc::vec![true; question.len()];
        question.resize(max_len, super::vocab::PAD_ID);
        question_mask.resize(max_len, false);
        let m = self.config.max_objects;
        let visual = match kind {
            InputKind::Oracle => encode_oracle(&sample.scene, m),
            InputKind::Dense => encode_dense_width(&sample.detections, m, self.prototypes.width + 4),
            InputKind::Predicted => encode_predicted(&sample.detections, &self.prototypes, m),
        };
        ModelInput { id: sample.id, encoder: kind.encoder(), question, question_mask, visual }
    }

    pub fn inputs(&self, samples: &[Sample], kind: InputKind) -> Vec<ModelInput> {
        samples.iter().map(|s| self.input(s, kind)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(usize, u32)]) -> BTreeMap<String, BTreeMap<usize, u32>> {
        let mut m = BTreeMap::new();
        m.insert("g".into(), pairs.iter().copied().collect());
        m
    }

    #[test]
    fn rarest_answer_has_lowest_quantile() {
        // red: 50, blue: 10, green: 40
        let t = RarityTable::from_counts(counts(&[(2, 50), (3, 10), (4, 40)]));
        let blue = t.annotate("g", 3).quantile;
        assert!((blue - 0.1).abs() < 1e-12);
        assert!(blue < t.annotate("g", 4).quantile);
        assert!(t.annotate("g", 4).quantile < t.annotate("g", 2).quantile);
        assert_eq!(t.annotate("g", 2).quantile, 1.0);
        assert_eq!(t.annotate("g", 9).quantile, 0.0);
    }

    #[test]
    fn single_answer_groups_merge_into_misc() {
        let mut raw = counts(&[(0, 3), (1, 1)]);
        raw.insert("lonely".into(), [(5usize, 4u32)].into_iter().collect());
        let t = RarityTable::from_counts(raw);
        assert_eq!(t.merged, ["lonely"]);
        assert_eq!(t.annotate("lonely", 5).group, MISC_GROUP);
        assert_eq!(t.annotate("never-seen", 5).group, MISC_GROUP);
    }

    #[test]
    fn small_dataset_is_reproducible() {
        let c = DataConfig { seed: 3, n_train: 60, n_val: 20, n_test: 20, ..DataConfig::default() };
        let a = Dataset::generate(c.clone()).unwrap();
        let b = Dataset::generate(c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 100);
        assert!(a.val.iter().all(|s| s.rarity.is_some()));
    }
}
