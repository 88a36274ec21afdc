//! Analysis outputs: CSV for tables and curves, JSON for labels and summaries.

use std::collections::BTreeMap;
use std::path::Path;

use lens_core::data::{Sample, Template};
use lens_core::lab::{
    classify_mode, function_head_matrix, tsne, FractionPoint, KTable, ModeLabel, ModeThresholds, OodCurve,
    Pooling, RecallTable, TsneConfig,
};
use lens_core::model::HeadAddress;
use lens_core::train::Metrics;
use serde::Serialize;

use crate::dump::AttentionDump;
use crate::error::Result;
use crate::io::{self, opt, CsvOut};

/// k table of every head over every dumped sample.
pub fn ktable_from_dump(dump: &AttentionDump, theta: f64) -> Result<KTable> {
    let mut table = KTable::new(theta, dump.manifest.heads.clone());
    for (i, s) in dump.manifest.samples.iter().enumerate() {
        table.push(s.id, &dump.records(i)?)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct HeadSummary {
    pub head: HeadAddress,
    pub rows: usize,
    pub median_k: Option<f64>,
    pub median_ratio: Option<f64>,
    pub median_sample_ratio: Option<f64>,
    pub label: ModeLabel,
}

pub fn head_summaries(table: &KTable, t: &ModeThresholds, pooling: Pooling) -> Vec<HeadSummary> {
    table
        .stats()
        .into_iter()
        .map(|s| HeadSummary {
            head: s.head,
            rows: s.ks.len(),
            median_k: s.median_k(),
            median_ratio: s.median_ratio(),
            median_sample_ratio: s.median_of_sample_medians(),
            label: classify_mode(&s.observations(pooling), t),
        })
        .collect()
}

/// `k_stats.csv`: one row per head.
pub fn write_k_stats(path: &Path, heads: &[HeadSummary]) -> Result<()> {
    let mut w = CsvOut::create(
        path,
        &["head", "block", "layer", "index", "rows", "median_k", "median_ratio", "median_sample_ratio", "mode"],
    )?;
    for h in heads {
        w.row([
            h.head.to_string(),
            h.head.block.as_str().to_string(),
            h.head.layer.to_string(),
            h.head.head.to_string(),
            h.rows.to_string(),
            opt(h.median_k),
            opt(h.median_ratio),
            opt(h.median_sample_ratio),
            h.label.mode.as_str().to_string(),
        ])?;
    }
    w.finish()
}

#[derive(Serialize)]
struct ModesReport<'a> {
    theta: f64,
    pooling: Pooling,
    thresholds: &'a ModeThresholds,
    counts: BTreeMap<&'static str, usize>,
    heads: Vec<ModeEntry>,
}

#[derive(Serialize)]
struct ModeEntry {
    head: String,
    #[serde(flatten)]
    label: ModeLabel,
}

/// `modes.json`: mode label and supporting statistics per head.
pub fn write_modes(path: &Path, theta: f64, t: &ModeThresholds, pooling: Pooling, heads: &[HeadSummary]) -> Result<()> {
    let mut counts = BTreeMap::new();
    for h in heads {
        *counts.entry(h.label.mode.as_str()).or_insert(0) += 1;
    }
    let report = ModesReport {
        theta,
        pooling,
        thresholds: t,
        counts,
        heads: heads.iter().map(|h| ModeEntry { head: h.head.to_string(), label: h.label.clone() }).collect(),
    };
    io::write_json(path, &report)
}

/// `funcmatrix.csv`: long format, one row per (head, function).
pub fn write_function_matrix(path: &Path, table: &KTable, samples: &[&Sample], cross_only: bool) -> Result<()> {
    let functions: Vec<_> = samples.iter().map(|s| s.question.functions.clone()).collect();
    let m = function_head_matrix(table, &functions, cross_only);
    let mut w = CsvOut::create(path, &["head", "function", "samples", "median_ratio"])?;
    for (h, head) in m.heads.iter().enumerate() {
        for (f, name) in m.functions.iter().enumerate() {
            w.row([head.to_string(), name.clone(), m.counts[f].to_string(), opt(m.values[h][f])])?;
        }
    }
    w.finish()
}

#[derive(Clone, Debug, Serialize)]
pub struct TsneReport {
    pub samples: usize,
    pub label: &'static str,
    /// 1-nearest-neighbour purity of template labels in the embedding.
    pub purity: f64,
    /// The same purity measured on the raw behavior vectors.
    pub purity_high: f64,
    pub kl_trace: Vec<f64>,
    pub notes: Vec<String>,
}

/// Embeds the first `n` behavior vectors, labelled by question template.
pub fn behavior_tsne(
    table: &KTable,
    samples: &[&Sample],
    n: usize,
    config: &TsneConfig,
) -> Result<(Vec<[f64; 2]>, Vec<Template>, TsneReport)> {
    let n = n.min(table.len());
    let vectors: Vec<Vec<f64>> = table.behavior_vectors().into_iter().take(n).collect();
    let labels: Vec<Template> = samples.iter().take(n).map(|s| s.question.program.template()).collect();
    let r = tsne(&vectors, config)?;
    let report = TsneReport {
        samples: n,
        label: "template",
        purity: lens_core::lab::nn_purity(&r.points, &labels),
        purity_high: lens_core::lab::nn_purity_high(&vectors, &labels),
        kl_trace: r.kl_trace,
        notes: r.notes,
    };
    Ok((r.points, labels, report))
}

pub fn write_tsne(dir: &Path, table: &KTable, samples: &[&Sample], n: usize, config: &TsneConfig) -> Result<TsneReport> {
    let (points, labels, report) = behavior_tsne(table, samples, n, config)?;
    let mut w = CsvOut::create(&dir.join("tsne.csv"), &["id", "x", "y", "template", "functions"])?;
    for (i, p) in points.iter().enumerate() {
        let fs: Vec<&str> = samples[i].question.functions.iter().map(|f| f.as_str()).collect();
        w.row([
            table.sample_ids[i].to_string(),
            p[0].to_string(),
            p[1].to_string(),
            labels[i].as_str().to_string(),
            fs.join(" "),
        ])?;
    }
    w.finish()?;
    io::write_json(&dir.join("tsne.json"), &report)?;
    Ok(report)
}

/// `ood.csv`: accuracy on tail(alpha) per grid point.
pub fn write_ood(path: &Path, curve: &OodCurve) -> Result<()> {
    let mut w = CsvOut::create(path, &["alpha", "n", "correct", "accuracy"])?;
    for p in &curve.points {
        w.row([p.alpha.to_string(), p.accuracy.n.to_string(), p.accuracy.correct.to_string(), opt(p.accuracy.accuracy)])?;
    }
    for a in &curve.omitted {
        w.row([a.to_string(), "0".into(), "0".into(), String::new()])?;
    }
    w.finish()
}

/// `recall.csv`: recall of needed objects per IoU threshold, tail vs head.
pub fn write_recall(path: &Path, t: &RecallTable) -> Result<()> {
    let mut w = CsvOut::create(
        path,
        &["alpha", "iou", "tail_needed", "tail_found", "tail_recall", "head_needed", "head_found", "head_recall"],
    )?;
    for r in &t.rows {
        w.row([
            t.alpha.to_string(),
            r.iou.to_string(),
            r.tail.n.to_string(),
            r.tail.correct.to_string(),
            opt(r.tail.accuracy),
            r.head.n.to_string(),
            r.head.correct.to_string(),
            opt(r.head.accuracy),
        ])?;
    }
    w.finish()
}

/// `prune_categories.csv`: one row per pruned head category.
pub fn write_prune_categories(path: &Path, base: &Metrics, rows: &[(String, usize, Metrics)]) -> Result<()> {
    let mut w = CsvOut::create(path, &["category", "pruned_heads", "overall", "drop", "acc_tail", "acc_head"])?;
    let all = std::iter::once(("none".to_string(), 0, base.clone())).chain(rows.iter().cloned());
    for (name, n, m) in all {
        w.row([
            name,
            n.to_string(),
            m.overall.to_string(),
            (base.overall - m.overall).to_string(),
            opt(m.acc_tail()),
            opt(m.acc_head()),
        ])?;
    }
    w.finish()
}

/// `prune_fractions.csv`: mean and std over seeds, overall and per function.
pub fn write_prune_fractions(path: &Path, points: &[FractionPoint]) -> Result<()> {
    let mut w = CsvOut::create(path, &["r", "pruned_heads", "function", "mean", "std", "runs"])?;
    for p in points {
        let all = std::iter::once(("overall".to_string(), &p.overall)).chain(p.per_function.iter().map(|(k, v)| (k.clone(), v)));
        for (name, ms) in all {
            w.row([p.r.to_string(), p.pruned.to_string(), name, ms.mean.to_string(), ms.std.to_string(), ms.n.to_string()])?;
        }
    }
    w.finish()
}
