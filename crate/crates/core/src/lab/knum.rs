//! k-numbers: how many of the largest attention weights are needed to reach
//! a share `theta` of a row's mass.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::model::{AttentionRecord, HeadAddress};

pub const DEFAULT_THETA: f64 = 0.9;

/// Relative slack on the threshold; absorbs rounding in the accumulated sum
/// (e.g. nine weights of 0.1 add up to 0.8999999999999999).
const REL_SLACK: f64 = 1e-12;

fn check_row(row: &[f32]) -> Result<()> {
    if row.is_empty() {
        return Err(LensError::Contract("empty attention row".into()));
    }
    let mut total = 0.0;
    for &x in row {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(LensError::Contract(format!("attention weight {x} is not a probability")));
        }
        total += x as f64;
    }
    if (total - 1.0).abs() > 1e-4 {
        return Err(LensError::Contract(format!("attention row sums to {total}")));
    }
    Ok(())
}

/// Smallest `k` such that the `k` largest entries of `row` hold at least
/// `theta` of its mass.
pub fn k_number(row: &[f32], theta: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(LensError::Contract(format!("energy share {theta} outside [0, 1]")));
    }
    check_row(row)?;
    if theta >= 1.0 {
        // Every positive entry adds mass, so the full share needs all of them.
        return Ok(row.iter().filter(|&&x| x > 0.0).count().max(1));
    }
    let mut sorted: Vec<f32> = row.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().map(|&x| x as f64).sum();
    let target = theta * total * (1.0 - REL_SLACK);
    let mut cum = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        cum += x as f64;
        if cum >= target {
            return Ok(i + 1);
        }
    }
    Ok(sorted.len())
}

/// k and row length for every row of one attention map.
pub fn record_ks(record: &AttentionRecord, theta: f64) -> Result<Vec<(u16, u16)>> {
    record
        .row_iter()
        .map(|row| Ok((k_number(row, theta)? as u16, row.len() as u16)))
        .collect()
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// k-number statistics of one head over a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KStat {
    pub head: HeadAddress,
    /// k per attention row, all samples concatenated.
    pub ks: Vec<u16>,
    /// Keys per row (padding excluded).
    pub ns: Vec<u16>,
    /// Start of each sample's rows in `ks`.
    pub sample_offsets: Vec<usize>,
}

impl KStat {
    pub fn ratios(&self) -> Vec<f64> {
        self.ks.iter().zip(&self.ns).map(|(&k, &n)| k as f64 / n as f64).collect()
    }

    /// Median k-ratio over all rows of all samples.
    pub fn median_ratio(&self) -> Option<f64> {
        median(&mut self.ratios())
    }

    pub fn median_k(&self) -> Option<f64> {
        median(&mut self.ks.iter().map(|&k| k as f64).collect::<Vec<_>>())
    }

    /// Per-sample median k-ratios.
    pub fn sample_medians(&self) -> Vec<f64> {
        let r = self.ratios();
        let mut out = Vec::with_capacity(self.sample_offsets.len());
        for (i, &start) in self.sample_offsets.iter().enumerate() {
            let end = self.sample_offsets.get(i + 1).copied().unwrap_or(r.len());
            if let Some(m) = median(&mut r[start..end].to_vec()) {
                out.push(m);
            }
        }
        out
    }

    /// Median over samples of the per-sample medians.
    pub fn median_of_sample_medians(&self) -> Option<f64> {
        median(&mut self.sample_medians())
    }
}

/// Pooling for k-ratio distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Every attention row is one observation.
    Rows,
    /// One observation per sample: the median over its rows.
    SampleMedians,
}

impl KStat {
    pub fn observations(&self, pooling: Pooling) -> Vec<f64> {
        match pooling {
            Pooling::Rows => self.ratios(),
            Pooling::SampleMedians => self.sample_medians(),
        }
    }
}

/// Per-head k statistics gathered from a stream of records of one head.
pub fn head_k_stats<'a>(
    head: HeadAddress,
    records: impl IntoIterator<Item = &'a AttentionRecord>,
    theta: f64,
) -> Result<KStat> {
    let mut s = KStat { head, ks: Vec::new(), ns: Vec::new(), sample_offsets: Vec::new() };
    for r in records {
        if r.head != head {
            continue;
        }
        s.sample_offsets.push(s.ks.len());
        for (k, n) in record_ks(r, theta)? {
            s.ks.push(k);
            s.ns.push(n);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(k_number(&[0.5, 0.3, 0.1, 0.05, 0.05], 0.9).unwrap(), 3);
        let mut one_hot = [0.0f32; 36];
        one_hot[17] = 1.0;
        assert_eq!(k_number(&one_hot, 0.9).unwrap(), 1);
        for n in 1..=64usize {
            let row = alloc::vec![1.0 / n as f32; n];
            let want = num_traits::Float::ceil(0.9 * n as f64) as usize;
            assert_eq!(k_number(&row, 0.9).unwrap(), want, "n = {n}");
        }
    }

    #[test]
    fn invalid_rows() {
        assert!(k_number(&[0.5, 0.2], 0.9).is_err());
        assert!(k_number(&[1.5, -0.5], 0.9).is_err());
        assert!(k_number(&[], 0.9).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [1.0, 3.0, 5.0]), Some(3.0));
        assert_eq!(median(&mut [0.05, 0.95]), Some(0.5));
        assert_eq!(median(&mut []), None);
    }
}
