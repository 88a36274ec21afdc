//! Category and random-fraction pruning experiments.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InputKind, Sample};
use crate::error::{LensError, Result};
use crate::model::{BlockType, ModelConfig, PruneMask, VlTransformer};
use crate::rng::rng_for;
use crate::train::{metrics, predict, Metrics};

/// Head families pruned as a whole.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PruneCategory {
    /// Language self-attention before the cross-modal layers.
    #[serde(rename = "L")]
    Lang,
    /// Vision self-attention before the cross-modal layers.
    #[serde(rename = "V")]
    Vis,
    /// Language attending to vision (`vl`).
    #[serde(rename = "L<-V")]
    LangFromVis,
    /// Vision attending to language (`lv`).
    #[serde(rename = "V<-L")]
    VisFromLang,
}

impl PruneCategory {
    pub const ALL: [Self; 4] = [Self::Lang, Self::Vis, Self::LangFromVis, Self::VisFromLang];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lang => "L",
            Self::Vis => "V",
            Self::LangFromVis => "L<-V",
            Self::VisFromLang => "V<-L",
        }
    }

    pub fn block(self) -> BlockType {
        match self {
            Self::Lang => BlockType::Lang,
            Self::Vis => BlockType::Vis,
            Self::LangFromVis => BlockType::Vl,
            Self::VisFromLang => BlockType::Lv,
        }
    }

    pub fn mask(self, config: &ModelConfig) -> PruneMask {
        PruneMask::blocks(config, &[self.block()])
    }
}

impl fmt::Display for PruneCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PruneCategory {
    type Err = LensError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "lang" => Ok(Self::Lang),
            "V" | "vis" => Ok(Self::Vis),
            "L<-V" | "vl" => Ok(Self::LangFromVis),
            "V<-L" | "lv" => Ok(Self::VisFromLang),
            _ => Err(LensError::Config(format!("unknown pruning category `{s}`"))),
        }
    }
}

/// `floor(r * C)` cross-modal heads drawn uniformly without replacement.
pub fn random_cross_mask(config: &ModelConfig, r: f64, seed: u64) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&r) {
        return Err(LensError::Contract(format!("pruning fraction {r} outside [0, 1]")));
    }
    let mut heads = config.cross_heads();
    let count = Float::floor(r * heads.len() as f64) as usize;
    let mut rng = rng_for(seed, "prune", 0);
    heads.shuffle(&mut rng);
    heads.truncate(count);
    PruneMask::new(config, heads)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Self { mean, std: Float::sqrt(var), n: xs.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionPoint {
    pub r: f64,
    pub pruned: usize,
    pub overall: MeanStd,
    pub per_function: BTreeMap<String, MeanStd>,
    pub runs: Vec<Metrics>,
}

/// Random cross-modal pruning at each fraction, repeated over `seeds`.
pub fn fraction_curve(
    model: &VlTransformer,
    dataset: &Dataset,
    samples: &[Sample],
    kind: InputKind,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<FractionPoint>> {
    if seeds.is_empty() {
        return Err(LensError::Contract("fraction pruning needs at least one seed".into()));
    }
    let inputs = dataset.inputs(samples, kind);
    let mut out = Vec::new();
    for &r in fractions {
        let mut runs = Vec::new();
        let mut pruned = 0;
        for &seed in seeds {
            let mask = random_cross_mask(model.config(), r, seed)?;
            pruned = mask.len();
            let preds = predict(model, &inputs, &mask)?;
            runs.push(metrics(samples, &preds, dataset.config.alpha_star));
        }
        let overall = MeanStd::of(&runs.iter().map(|m| m.overall).collect::<Vec<_>>()).expect("seeds non-empty");
        let mut per_function = BTreeMap::new();
        for name in runs[0].per_function.keys() {
            let xs: Vec<f64> = runs.iter().filter_map(|m| m.per_function.get(name).and_then(|a| a.accuracy)).collect();
            if let Some(ms) = MeanStd::of(&xs) {
                per_function.insert(name.clone(), ms);
            }
        }
        out.push(FractionPoint { r, pruned, overall, per_function, runs });
    }
    Ok(out)
}
