//! Run directories: `config.json`, `metrics.jsonl` (one record per epoch),
//! `checkpoints/*.ckpt` and `final_report.json`.

use std::path::{Path, PathBuf};

use lens_core::data::{Dataset, InputKind};
use lens_core::model::{ParamGroup, VlTransformer};
use lens_core::rng::rng_for;
use lens_core::train::{
    oracle_transfer_pipeline, run_stage, transfer_ablation, Encoded, EpochRecord, Metrics, Stage, StageResult,
    TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::config::LabConfig;
use crate::error::{Error, Result};
use crate::{checkpoint, dataset, io};

pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    format_version: u32,
    stage: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs: usize,
    pub checkpoint: String,
    pub val: Metrics,
    pub test: Metrics,
}

impl StageReport {
    fn of(r: &StageResult, checkpoint: String) -> Self {
        Self {
            best_epoch: r.outcome.best_epoch,
            best_val_accuracy: r.outcome.best_val_accuracy,
            epochs: r.outcome.log.len(),
            checkpoint,
            val: r.val.clone(),
            test: r.test.clone(),
        }
    }
}

impl RunDir {
    /// Creates the layout and serializes the full configuration.
    pub fn create(root: &Path, config: &LabConfig, command: &str, data_dir: Option<&Path>) -> Result<Self> {
        let ckpts = root.join("checkpoints");
        std::fs::create_dir_all(&ckpts).map_err(Error::io(&ckpts))?;
        let metrics = root.join("metrics.jsonl");
        if metrics.exists() {
            std::fs::remove_file(&metrics).map_err(Error::io(&metrics))?;
        }
        io::write_json(
            &root.join("config.json"),
            &json!({
                "command": command,
                "data_dir": data_dir.map(crate::dump::absolute),
                "data_fingerprint": dataset::fingerprint(&config.data),
                "config": config,
            }),
        )?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    /// Epoch callback: logs the record, writes cadence checkpoints and keeps
    /// `<stage>.ckpt` at the best epoch so far, so a later failure leaves the
    /// last good parameters on disk.
    pub fn epoch_logger<'a>(
        &'a self,
        stage: &'a str,
        cfg: &'a TrainConfig,
        meta: serde_json::Value,
    ) -> impl FnMut(&EpochRecord, &VlTransformer) + 'a {
        let mut best = f64::NEG_INFINITY;
        move |r, m| {
            self.log_epoch(stage, r);
            let meta = with(&meta, json!({ "stage": stage, "epoch": r.epoch, "val_accuracy": r.val_accuracy }));
            if cfg.checkpoint_every > 0 && r.epoch % cfg.checkpoint_every == 0 {
                let _ = checkpoint::save(&self.checkpoint_path(&format!("{stage}-epoch{}", r.epoch)), m, meta.clone());
            }
            if r.val_accuracy > best {
                best = r.val_accuracy;
                let _ = checkpoint::save(&self.checkpoint_path(stage), m, meta);
            }
        }
    }

    /// Appends the record to `metrics.jsonl` and reports progress on stderr.
    pub fn log_epoch(&self, stage: &str, r: &EpochRecord) {
        let line = EpochLine { format_version: crate::FORMAT_VERSION, stage, record: r };
        let _ = io::append_jsonl(&self.root.join("metrics.jsonl"), &line);
        eprintln!("[{stage}] epoch {} loss {:.4} val {:.4}", r.epoch, r.train_loss, r.val_accuracy);
    }

    pub fn save_final(&self, stage: &str, r: &StageResult, meta: &serde_json::Value) -> Result<String> {
        let path = self.checkpoint_path(stage);
        let meta = with(meta, json!({ "stage": stage, "epoch": r.outcome.best_epoch, "val_accuracy": r.outcome.best_val_accuracy }));
        checkpoint::save(&path, &r.outcome.model, meta)?;
        Ok(format!("checkpoints/{stage}.ckpt"))
    }

    pub fn write_report<T: Serialize>(&self, report: &T) -> Result<()> {
        io::write_json(&self.root.join("final_report.json"), report)
    }
}

fn with(base: &serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    let mut v = base.clone();
    if let (Some(m), serde_json::Value::Object(e)) = (v.as_object_mut(), extra) {
        m.extend(e);
    }
    v
}

fn base_meta(config: &LabConfig) -> serde_json::Value {
    json!({ "seed": config.pipeline.oracle.seed, "data_fingerprint": dataset::fingerprint(&config.data) })
}

/// Trains one scratch model on `input`: oracle inputs use the `oracle`
/// schedule, dense inputs the `finetune` schedule (the baseline budget).
pub fn train_single(run: &RunDir, ds: &Dataset, config: &LabConfig, input: InputKind) -> Result<StageReport> {
    let (name, cfg) = match input {
        InputKind::Dense => ("baseline", &config.pipeline.finetune),
        _ => ("oracle", &config.pipeline.oracle),
    };
    let mc = config.pipeline.model.config(ds, input.encoder());
    let model = VlTransformer::new(mc, &mut rng_for(cfg.seed, &format!("init-{name}"), 0))?;
    let all = model.group_mask(ParamGroup::All);
    let enc = Encoded::new(ds, input);
    let meta = base_meta(config);
    let result = run_stage(model, ds, &enc, cfg, &all, &mut run.epoch_logger(name, cfg, meta.clone()))?;
    let ckpt = run.save_final(name, &result, &meta)?;
    let report = StageReport::of(&result, ckpt);
    run.write_report(&json!({ "stages": { name: &report } }))?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub full_finetune: f64,
    pub visual_only: f64,
    pub no_retrain: f64,
    pub baseline: f64,
}

/// The oracle-transfer pipeline; `ablation` adds the visual-block-only and
/// no-retraining variants to the report.
pub fn transfer(run: &RunDir, ds: &Dataset, config: &LabConfig, ablation: bool) -> Result<serde_json::Value> {
    let p = &config.pipeline;
    let meta = base_meta(config);
    let mut loggers = [
        run.epoch_logger(Stage::Oracle.as_str(), &p.oracle, meta.clone()),
        run.epoch_logger(Stage::Transfer.as_str(), &p.finetune, meta.clone()),
        run.epoch_logger(Stage::Baseline.as_str(), &p.finetune, meta.clone()),
    ];
    let result = oracle_transfer_pipeline(ds, p, &mut |stage, r, m| {
        let i = match stage {
            Stage::Oracle => 0,
            Stage::Transfer => 1,
            Stage::Baseline => 2,
        };
        loggers[i](r, m)
    })?;
    let mut stages = serde_json::Map::new();
    for (stage, r) in [(Stage::Oracle, &result.oracle), (Stage::Transfer, &result.transfer), (Stage::Baseline, &result.baseline)] {
        let ckpt = run.save_final(stage.as_str(), r, &meta)?;
        stages.insert(stage.as_str().into(), serde_json::to_value(StageReport::of(r, ckpt)).expect("serializable"));
    }
    let mut report = json!({ "stages": stages, "scope": p.scope });
    if ablation {
        let mut log = |r: &EpochRecord, _: &VlTransformer| run.log_epoch("visual-only", r);
        let a = transfer_ablation(ds, &result.oracle.outcome.model, p, &mut log)?;
        let summary = AblationReport {
            full_finetune: result.transfer.val.overall,
            visual_only: a.visual_only.val.overall,
            no_retrain: a.no_retrain.overall,
            baseline: result.baseline.val.overall,
        };
        report["ablation"] = json!({ "summary": summary, "no_retrain": a.no_retrain, "visual_only": a.visual_only.val });
    }
    run.write_report(&report)?;
    Ok(report)
}
