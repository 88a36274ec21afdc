//! Attention modes, per-sample k tables, the function-head matrix and
//! behavior vectors.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::knum::{median, record_ks, KStat};
use crate::data::Function;
use crate::error::{LensError, Result};
use crate::model::{HeadAddress, ModelInput, PruneMask, VlTransformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Dirac,
    Uniform,
    Bimorph,
    Intermediate,
    /// Fewer observations than the classifier needs.
    Undefined,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dirac => "dirac",
            Self::Uniform => "uniform",
            Self::Bimorph => "bimorph",
            Self::Intermediate => "intermediate",
            Self::Undefined => "undefined",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeThresholds {
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub rho: f64,
    pub min_observations: usize,
}

impl Default for ModeThresholds {
    fn default() -> Self {
        Self { tau_lo: 0.3, tau_hi: 0.7, rho: 0.25, min_observations: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeLabel {
    pub mode: Mode,
    pub n: usize,
    pub median: Option<f64>,
    /// Share of k-ratios below `tau_lo`.
    pub low_mass: f64,
    /// Share of k-ratios above `tau_hi`.
    pub high_mass: f64,
}

/// Dirac if the median k-ratio is below `tau_lo`, uniform if above
/// `tau_hi`, bimorph if at least `rho` of the mass lies on each side,
/// intermediate otherwise.
pub fn classify_mode(ratios: &[f64], t: &ModeThresholds) -> ModeLabel {
    let n = ratios.len();
    let med = median(&mut ratios.to_vec());
    let share = |f: &dyn Fn(f64) -> bool| {
        if n == 0 {
            0.0
        } else {
            ratios.iter().filter(|&&r| f(r)).count() as f64 / n as f64
        }
    };
    let low_mass = share(&|r| r < t.tau_lo);
    let high_mass = share(&|r| r > t.tau_hi);
    let mode = match med {
        _ if n < t.min_observations => Mode::Undefined,
        Some(m) if m < t.tau_lo => Mode::Dirac,
        Some(m) if m > t.tau_hi => Mode::Uniform,
        _ if low_mass >= t.rho && high_mass >= t.rho => Mode::Bimorph,
        _ => Mode::Intermediate,
    };
    ModeLabel { mode, n, median: med, low_mass, high_mass }
}

/// k and row length of every attention row, per sample and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KTable {
    pub theta: f64,
    pub heads: Vec<HeadAddress>,
    pub sample_ids: Vec<u64>,
    /// `rows[s][h]` lists `(k, n)` per query row of head `h` on sample `s`.
    pub rows: Vec<Vec<Vec<(u16, u16)>>>,
}

impl KTable {
    pub fn new(theta: f64, heads: Vec<HeadAddress>) -> Self {
        Self { theta, heads, sample_ids: Vec::new(), rows: Vec::new() }
    }

    /// Adds one sample from its records (in `heads` order).
    pub fn push(&mut self, sample_id: u64, records: &[crate::model::AttentionRecord]) -> Result<()> {
        if records.len() != self.heads.len() {
            return Err(LensError::Contract("record count differs from the head list".into()));
        }
        let mut per_head = Vec::with_capacity(records.len());
        for (r, h) in records.iter().zip(&self.heads) {
            if r.head != *h {
                return Err(LensError::Contract("records out of head order".into()));
            }
            per_head.push(record_ks(r, self.theta)?);
        }
        self.sample_ids.push(sample_id);
        self.rows.push(per_head);
        Ok(())
    }

    /// Runs capture-enabled forwards over `inputs` and tabulates every head.
    pub fn collect(model: &VlTransformer, inputs: &[ModelInput], prune: &PruneMask, theta: f64) -> Result<Self> {
        let mut t = Self::new(theta, model.config().all_heads());
        for chunk in inputs.chunks(64) {
            let refs: Vec<&ModelInput> = chunk.iter().collect();
            for (input, out) in chunk.iter().zip(model.forward_batch(&refs, prune, true)?) {
                t.push(input.id, &out.records)?;
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn head_index(&self, h: &HeadAddress) -> Option<usize> {
        self.heads.iter().position(|x| x == h)
    }

    /// Statistics of head `h` over the samples selected by `keep`.
    pub fn stat(&self, h: usize, keep: impl Fn(usize) -> bool) -> KStat {
        let mut s = KStat { head: self.heads[h], ks: Vec::new(), ns: Vec::new(), sample_offsets: Vec::new() };
        for (i, sample) in self.rows.iter().enumerate() {
            if !keep(i) {
                continue;
            }
            s.sample_offsets.push(s.ks.len());
            for &(k, n) in &sample[h] {
                s.ks.push(k);
                s.ns.push(n);
            }
        }
        s
    }

    pub fn stats(&self) -> Vec<KStat> {
        (0..self.heads.len()).map(|h| self.stat(h, |_| true)).collect()
    }

    /// Median k-ratio over the rows of head `h` on sample `s`.
    pub fn sample_head_median(&self, s: usize, h: usize) -> Option<f64> {
        median(&mut self.rows[s][h].iter().map(|&(k, n)| k as f64 / n as f64).collect::<Vec<_>>())
    }

    /// Per-sample median k-ratio of every cross-modal head, in (layer,
    /// vl/ll/lv/vv, head) order.
    pub fn behavior_vectors(&self) -> Vec<Vec<f64>> {
        let cross: Vec<usize> = (0..self.heads.len()).filter(|&h| self.heads[h].block.is_cross()).collect();
        (0..self.len())
            .map(|s| cross.iter().map(|&h| self.sample_head_median(s, h).unwrap_or(f64::NAN)).collect())
            .collect()
    }
}

/// Behavior vector of one sample: the median-over-rows k-ratio of every
/// cross-modal head, in `ModelConfig::cross_heads` order.
pub fn behavior_vector(model: &VlTransformer, input: &ModelInput, prune: &PruneMask, theta: f64) -> Result<Vec<f64>> {
    let out = model.forward(input, prune, true)?;
    out.records
        .iter()
        .filter(|r| r.head.block.is_cross())
        .map(|r| {
            let mut ratios: Vec<f64> =
                record_ks(r, theta)?.into_iter().map(|(k, n)| k as f64 / n as f64).collect();
            median(&mut ratios).ok_or_else(|| LensError::Contract("attention record without rows".into()))
        })
        .collect()
}

/// Median k-ratio of every head conditioned on each function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionHeadMatrix {
    pub heads: Vec<HeadAddress>,
    pub functions: Vec<String>,
    /// `values[h][f]`; `None` when no sample exercises the function.
    pub values: Vec<Vec<Option<f64>>>,
    /// Samples per function.
    pub counts: Vec<usize>,
}

/// `functions[s]` lists the functions of the table's `s`-th sample.
/// `cross_only` restricts rows to cross-modal heads.
pub fn function_head_matrix(table: &KTable, functions: &[Vec<Function>], cross_only: bool) -> FunctionHeadMatrix {
    let catalog = Function::ALL;
    let heads: Vec<usize> =
        (0..table.heads.len()).filter(|&h| !cross_only || table.heads[h].block.is_cross()).collect();
    let counts: Vec<usize> =
        catalog.iter().map(|f| functions.iter().filter(|fs| fs.contains(f)).count()).collect();
    let mut values = vec![vec![None; catalog.len()]; heads.len()];
    for (fi, f) in catalog.iter().enumerate() {
        if counts[fi] == 0 {
            continue;
        }
        for (row, &h) in heads.iter().enumerate() {
            values[row][fi] = table.stat(h, |s| functions[s].contains(f)).median_ratio();
        }
    }
    FunctionHeadMatrix {
        heads: heads.iter().map(|&h| table.heads[h]).collect(),
        functions: catalog.iter().map(|f| String::from(f.as_str())).collect(),
        values,
        counts,
    }
}

/// Mode label of every head over the whole table.
pub fn head_modes(table: &KTable, t: &ModeThresholds, pooling: super::knum::Pooling) -> BTreeMap<HeadAddress, ModeLabel> {
    table
        .stats()
        .iter()
        .map(|s| (s.head, classify_mode(&s.observations(pooling), t)))
        .collect()
}
