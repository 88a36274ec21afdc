//! Training loop, learning-rate schedule, evaluation metrics and the
//! oracle-transfer pipeline.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Function, InputKind, Sample};
use crate::error::{LensError, Result};
use crate::model::{EncoderKind, ModelConfig, ModelInput, ParamGroup, PruneMask, TransferScope, VlTransformer};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decay {
    Linear,
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub decay: Decay,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many epochs (0: only the best).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            warmup_frac: 0.1,
            decay: Decay::Linear,
            seed: 0,
            clip_norm: Some(1.0),
            adam: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LensError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(LensError::Config("warmup_frac must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(LensError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr` over the first `warmup_frac` of the steps,
/// then decay to 0 at `total` (or constant).
pub fn lr_schedule(step: usize, total: usize, config: &TrainConfig) -> f64 {
    if total == 0 {
        return config.lr;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = config.warmup_frac * total;
    if step < warm {
        return config.lr * step / warm;
    }
    let rest = total - warm;
    let t = if rest > 0.0 { (step - warm) / rest } else { 1.0 };
    match config.decay {
        Decay::Linear => config.lr * (1.0 - t),
        Decay::Cosine => config.lr * 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * t)),
        Decay::Constant => config.lr,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    /// Geometric-mean likelihood of the right answer, `exp(-loss)` averaged
    /// per batch; a cheap proxy, not an argmax accuracy.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last good ones when
    /// training aborted before any epoch finished).
    pub model: VlTransformer,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// What to train on: encoded inputs with their answer classes.
pub struct Split<'a> {
    pub inputs: &'a [ModelInput],
    pub answers: &'a [usize],
}

impl<'a> Split<'a> {
    pub fn new(inputs: &'a [ModelInput], answers: &'a [usize]) -> Self {
        Self { inputs, answers }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub const EVAL_BATCH: usize = 128;

/// Predicted class per input.
pub fn predict(model: &VlTransformer, inputs: &[ModelInput], prune: &PruneMask) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        out.extend(model.forward_batch(&refs, prune, false)?.iter().map(|o| o.prediction()));
    }
    Ok(out)
}

pub fn accuracy(preds: &[usize], answers: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(answers).filter(|(p, a)| p == a).count() as f64 / preds.len() as f64
}

fn clip(grads: &mut [Option<Tensor>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
        .sum();
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}

/// Adam training with best-epoch selection on `val`. Parameters not flagged
/// in `trainable` stay fixed. `on_epoch` sees every epoch's record and the
/// current parameters.
pub fn train(
    mut model: VlTransformer,
    train: &Split<'_>,
    val: &Split<'_>,
    config: &TrainConfig,
    trainable: &[bool],
    on_epoch: &mut dyn FnMut(&EpochRecord, &VlTransformer),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(LensError::Contract("empty training split".into()));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut adam = AdamState::new(config.adam, model.params().tensors());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, VlTransformer)> = None;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_for(config.seed, "shuffle", epoch as u64));
        let (mut loss_sum, mut correct_est) = (0.0f64, 0.0f64);
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&ModelInput> = batch.iter().map(|&i| &train.inputs[i]).collect();
            let answers: Vec<usize> = batch.iter().map(|&i| train.answers[i]).collect();
            let stepped = model.loss_and_grads(&inputs, &answers, trainable).and_then(|(loss, mut grads)| {
                if let Some(c) = config.clip_norm {
                    clip(&mut grads, c);
                }
                let lr = lr_schedule(step + 1, total, config).max(f64::MIN_POSITIVE);
                adam.step(model.params_mut().tensors_mut(), &grads, lr)?;
                Ok(loss)
            });
            match stepped {
                Ok(loss) => {
                    loss_sum += loss as f64 * batch.len() as f64;
                    correct_est += num_traits::Float::exp(-(loss as f64)) * batch.len() as f64;
                }
                Err(e @ LensError::Numeric(_)) => {
                    let (best_epoch, best_val_accuracy, model) = match best {
                        Some(b) => b,
                        None => (0, 0.0, model),
                    };
                    return Ok(TrainOutcome {
                        model,
                        best_epoch,
                        best_val_accuracy,
                        log,
                        aborted: Some(format!("epoch {epoch}, step {}: {e}", step + 1)),
                    });
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let val_accuracy = if val.is_empty() {
            0.0
        } else {
            accuracy(&predict(&model, val.inputs, &PruneMask::none())?, val.answers)
        };
        let record = EpochRecord {
            epoch,
            steps: step,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct_est / train.len() as f64,
            val_accuracy,
            lr: lr_schedule(step, total, config),
        };
        on_epoch(&record, &model);
        log.push(record);
        if best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            best = Some((epoch, val_accuracy, model.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, model) = best.unwrap_or((0, 0.0, model));
    Ok(TrainOutcome { model, best_epoch, best_val_accuracy, log, aborted: None })
}

/// Mean cross-entropy without gradient.
pub fn mean_loss(model: &VlTransformer, split: &Split<'_>) -> Result<f64> {
    let none = alloc::vec![false; model.params().len()];
    let mut sum = 0.0;
    for (inputs, answers) in split.inputs.chunks(EVAL_BATCH).zip(split.answers.chunks(EVAL_BATCH)) {
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let (loss, _) = model.loss_and_grads(&refs, answers, &none)?;
        sum += loss as f64 * inputs.len() as f64;
    }
    Ok(sum / split.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl Accuracy {
    pub fn of(correct: usize, n: usize) -> Self {
        Self { n, correct, accuracy: (n > 0).then(|| correct as f64 / n as f64) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub overall: f64,
    pub alpha: f64,
    /// `accuracy` is `None` when the tail (or head) is empty.
    pub tail: Accuracy,
    pub head: Accuracy,
    pub per_function: BTreeMap<String, Accuracy>,
    pub per_template: BTreeMap<String, Accuracy>,
}

impl Metrics {
    pub fn acc_tail(&self) -> Option<f64> {
        self.tail.accuracy
    }

    pub fn acc_head(&self) -> Option<f64> {
        self.head.accuracy
    }
}

/// Overall, tail/head (at `alpha`), per-function and per-template accuracy
/// of `preds` against `samples`.
pub fn metrics(samples: &[Sample], preds: &[usize], alpha: f64) -> Metrics {
    let mut tail = (0, 0);
    let mut head = (0, 0);
    let mut per_function: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_template: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (s, &p) in samples.iter().zip(preds) {
        let ok = (p == s.answer()) as usize;
        correct += ok;
        let bucket = if s.is_tail(alpha) { &mut tail } else { &mut head };
        bucket.0 += ok;
        bucket.1 += 1;
        for f in &s.question.functions {
            let e = per_function.entry(f.as_str().to_string()).or_default();
            e.0 += ok;
            e.1 += 1;
        }
        let e = per_template.entry(s.question.program.template().as_str().to_string()).or_default();
        e.0 += ok;
        e.1 += 1;
    }
    let n = samples.len().min(preds.len());
    let conv = |m: BTreeMap<String, (usize, usize)>| m.into_iter().map(|(k, (c, n))| (k, Accuracy::of(c, n))).collect();
    Metrics {
        n,
        overall: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        alpha,
        tail: Accuracy::of(tail.0, tail.1),
        head: Accuracy::of(head.0, head.1),
        per_function: conv(per_function),
        per_template: conv(per_template),
    }
}

/// Predictions and metrics of `model` on `samples` with the given input kind.
pub fn evaluate(
    model: &VlTransformer,
    dataset: &Dataset,
    samples: &[Sample],
    kind: InputKind,
    prune: &PruneMask,
) -> Result<(Vec<usize>, Metrics)> {
    let inputs = dataset.inputs(samples, kind);
    let preds = predict(model, &inputs, prune)?;
    let m = metrics(samples, &preds, dataset.config.alpha_star);
    Ok((preds, m))
}

/// Model architecture profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 9 language, 5 vision and 5 cross-modal layers.
    Desk,
    /// 4 / 2 / 2 layers; fast, not the canonical layout.
    Mini,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub profile: Profile,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { profile: Profile::Desk, hidden: 32, heads: 4 }
    }
}

impl ModelSpec {
    pub fn config(&self, dataset: &Dataset, encoder: EncoderKind) -> ModelConfig {
        let width = dataset.visual_width(encoder);
        let (q, a) = (dataset.vocab.len(), dataset.answer_count());
        let mut c = match self.profile {
            Profile::Desk => ModelConfig::desk(encoder, width, q, a),
            Profile::Mini => ModelConfig::mini(encoder, width, q, a),
        };
        c.hidden = self.hidden;
        c.heads = self.heads;
        c.max_objects = dataset.config.max_objects;
        c.max_question_len = dataset.config.max_question_len;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelSpec,
    pub oracle: TrainConfig,
    /// Shared by the transfer fine-tuning and the scratch baseline.
    pub finetune: TrainConfig,
    pub scope: TransferScope,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            oracle: TrainConfig { epochs: 20, ..TrainConfig::default() },
            finetune: TrainConfig { epochs: 10, ..TrainConfig::default() },
            scope: TransferScope::ProjectionAndVisionLayers,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub outcome: TrainOutcome,
    pub val: Metrics,
    pub test: Metrics,
}

/// Encoded splits for one input kind.
pub struct Encoded {
    pub kind: InputKind,
    pub train: Vec<ModelInput>,
    pub val: Vec<ModelInput>,
    pub test: Vec<ModelInput>,
    pub train_answers: Vec<usize>,
    pub val_answers: Vec<usize>,
    pub test_answers: Vec<usize>,
}

impl Encoded {
    pub fn new(dataset: &Dataset, kind: InputKind) -> Self {
        let answers = |s: &[Sample]| s.iter().map(Sample::answer).collect();
        Self {
            kind,
            train: dataset.inputs(&dataset.train, kind),
            val: dataset.inputs(&dataset.val, kind),
            test: dataset.inputs(&dataset.test, kind),
            train_answers: answers(&dataset.train),
            val_answers: answers(&dataset.val),
            test_answers: answers(&dataset.test),
        }
    }

    pub fn train_split(&self) -> Split<'_> {
        Split::new(&self.train, &self.train_answers)
    }

    pub fn val_split(&self) -> Split<'_> {
        Split::new(&self.val, &self.val_answers)
    }
}

/// Trains `model` on `enc` and evaluates the selected parameters on val and test.
pub fn run_stage(
    model: VlTransformer,
    dataset: &Dataset,
    enc: &Encoded,
    config: &TrainConfig,
    trainable: &[bool],
    on_epoch: &mut dyn FnMut(&EpochRecord, &VlTransformer),
) -> Result<StageResult> {
    let outcome = train(model, &enc.train_split(), &enc.val_split(), config, trainable, on_epoch)?;
    if let Some(msg) = &outcome.aborted {
        return Err(LensError::Numeric(format!("training diverged ({msg})")));
    }
    let alpha = dataset.config.alpha_star;
    let none = PruneMask::none();
    let val = metrics(&dataset.val, &predict(&outcome.model, &enc.val, &none)?, alpha);
    let test = metrics(&dataset.test, &predict(&outcome.model, &enc.test, &none)?, alpha);
    Ok(StageResult { outcome, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Oracle,
    Transfer,
    Baseline,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Transfer => "transfer",
            Self::Baseline => "baseline",
        }
    }
}

pub struct PipelineResult {
    pub oracle: StageResult,
    /// The transferred model before fine-tuning.
    pub transfer_init: VlTransformer,
    pub transfer: StageResult,
    pub baseline: StageResult,
}

/// Oracle on symbolic ground truth, transfer of its parameters into a
/// dense-input model, fine-tuning on dense detector input, and a scratch
/// dense baseline trained with the same data, seed and step budget.
/// `on_epoch` is called with the stage name of every epoch.
pub fn oracle_transfer_pipeline(
    dataset: &Dataset,
    config: &PipelineConfig,
    on_epoch: &mut dyn FnMut(Stage, &EpochRecord, &VlTransformer),
) -> Result<PipelineResult> {
    let seed = config.oracle.seed;
    let oracle_cfg = config.model.config(dataset, EncoderKind::OracleSymbolic);
    let dense_cfg = config.model.config(dataset, EncoderKind::NoisyDense);
    let oracle_enc = Encoded::new(dataset, InputKind::Oracle);
    let oracle0 = VlTransformer::new(oracle_cfg, &mut rng_for(seed, "init-oracle", 0))?;
    let all = oracle0.group_mask(ParamGroup::All);
    let oracle = run_stage(oracle0, dataset, &oracle_enc, &config.oracle, &all, &mut |r, m| {
        on_epoch(Stage::Oracle, r, m)
    })?;
    drop(oracle_enc);

    let dense_enc = Encoded::new(dataset, InputKind::Dense);
    let transfer_init =
        oracle.outcome.model.init_transfer(dense_cfg.clone(), config.scope, &mut rng_for(seed, "init-transfer", 0))?;
    let transfer = run_stage(transfer_init.clone(), dataset, &dense_enc, &config.finetune, &all, &mut |r, m| {
        on_epoch(Stage::Transfer, r, m)
    })?;
    let baseline0 = VlTransformer::new(dense_cfg, &mut rng_for(seed, "init-baseline", 0))?;
    let baseline = run_stage(baseline0, dataset, &dense_enc, &config.finetune, &all, &mut |r, m| {
        on_epoch(Stage::Baseline, r, m)
    })?;
    Ok(PipelineResult { oracle, transfer_init, transfer, baseline })
}

/// Transfer variants compared against full fine-tuning.
pub struct AblationResult {
    /// The oracle itself, fed symbolic tokens built from detector output.
    pub no_retrain: Metrics,
    /// Transferred model with only the visual block trained.
    pub visual_only: StageResult,
}

/// Runs the two transfer ablations for a trained `oracle` (val metrics).
pub fn transfer_ablation(
    dataset: &Dataset,
    oracle: &VlTransformer,
    config: &PipelineConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &VlTransformer),
) -> Result<AblationResult> {
    let (_, no_retrain) = evaluate(oracle, dataset, &dataset.val, InputKind::Predicted, &PruneMask::none())?;
    let dense_cfg = config.model.config(dataset, EncoderKind::NoisyDense);
    let init = oracle.init_transfer(dense_cfg, config.scope, &mut rng_for(config.oracle.seed, "init-transfer", 0))?;
    let visual = init.group_mask(ParamGroup::VisualBlock);
    let enc = Encoded::new(dataset, InputKind::Dense);
    let visual_only = run_stage(init, dataset, &enc, &config.finetune, &visual, on_epoch)?;
    Ok(AblationResult { no_retrain, visual_only })
}

/// Function catalog in declaration order, as strings.
pub fn function_names() -> Vec<&'static str> {
    Function::ALL.iter().map(|f| f.as_str()).collect()
}
