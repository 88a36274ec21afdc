use std::collections::BTreeMap;

use lens_core::data::{DataConfig, Dataset, InputKind, Sample};
use lens_core::model::{EncoderKind, ParamGroup, PruneMask, VlTransformer};
use lens_core::rng::rng_for;
use lens_core::train::*;

fn small(seed: u64, n_train: usize) -> Dataset {
    Dataset::generate(DataConfig { seed, n_train, n_val: 40, n_test: 40, ..DataConfig::default() }).unwrap()
}

fn mini(ds: &Dataset, seed: u64) -> VlTransformer {
    let spec = ModelSpec { profile: Profile::Mini, ..ModelSpec::default() };
    VlTransformer::new(spec.config(ds, EncoderKind::OracleSymbolic), &mut rng_for(seed, "init", 0)).unwrap()
}

#[test]
fn memorizes_fifty_samples() {
    let ds = small(1, 50);
    let enc = Encoded::new(&ds, InputKind::Oracle);
    let model = mini(&ds, 1);
    let all = model.group_mask(ParamGroup::All);
    let cfg = TrainConfig { epochs: 150, batch_size: 10, lr: 2e-3, seed: 1, ..TrainConfig::default() };
    // Select on the training split itself so the final pick is the best fit.
    let out = train(model, &enc.train_split(), &enc.train_split(), &cfg, &all, &mut |_, _| {}).unwrap();
    assert!(out.aborted.is_none());
    let first = out.log.first().unwrap().train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert!(last < first / 5.0, "loss {first} -> {last}");
    assert!(out.best_val_accuracy >= 0.95, "train accuracy {}", out.best_val_accuracy);
}

#[test]
fn training_is_bit_reproducible() {
    let ds = small(2, 120);
    let enc = Encoded::new(&ds, InputKind::Oracle);
    let cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 4, ..TrainConfig::default() };
    let run = || {
        let m = mini(&ds, 2);
        let all = m.group_mask(ParamGroup::All);
        train(m, &enc.train_split(), &enc.val_split(), &cfg, &all, &mut |_, _| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
}

#[test]
fn frozen_parameters_stay_fixed() {
    let ds = small(3, 64);
    let enc = Encoded::new(&ds, InputKind::Oracle);
    let m = mini(&ds, 3);
    let visual = m.group_mask(ParamGroup::VisualBlock);
    let cfg = TrainConfig { epochs: 1, batch_size: 16, seed: 3, ..TrainConfig::default() };
    let out = train(m.clone(), &enc.train_split(), &enc.val_split(), &cfg, &visual, &mut |_, _| {}).unwrap();
    for (i, (before, after)) in m.params().tensors().iter().zip(out.model.params().tensors()).enumerate() {
        let name = &m.params().names()[i];
        if visual[i] {
            assert_ne!(before, after, "{name} should train");
        } else {
            assert_eq!(before, after, "{name} should stay frozen");
        }
    }
}

#[test]
fn divergence_aborts_with_the_last_good_model() {
    let ds = small(4, 64);
    let enc = Encoded::new(&ds, InputKind::Oracle);
    let m = mini(&ds, 4);
    let all = m.group_mask(ParamGroup::All);
    let cfg = TrainConfig { epochs: 3, batch_size: 16, lr: 1e30, clip_norm: None, seed: 4, ..TrainConfig::default() };
    let out = train(m, &enc.train_split(), &enc.val_split(), &cfg, &all, &mut |_, _| {}).unwrap();
    assert!(out.aborted.is_some());
    assert!(out.model.params().tensors().iter().all(|t| t.is_finite()));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { warmup_frac: 1.0, ..TrainConfig::default() }.validate().is_err());
}

/// Per-group majority answer from the training split.
fn majority(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, BTreeMap<usize, u32>> = BTreeMap::new();
    for s in &ds.train {
        *counts.entry(s.question.group.clone()).or_default().entry(s.answer()).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(g, c)| (g, c.into_iter().max_by_key(|&(a, n)| (n, std::cmp::Reverse(a))).unwrap().0))
        .collect()
}

#[test]
fn majority_predictor_is_worse_on_the_tail() {
    let ds = Dataset::generate(DataConfig { seed: 5, n_train: 4000, n_val: 1000, n_test: 0, ..DataConfig::default() })
        .unwrap();
    let maj = majority(&ds);
    let preds: Vec<usize> =
        ds.val.iter().map(|s: &Sample| maj.get(&s.question.group).copied().unwrap_or(0)).collect();
    let m = metrics(&ds.val, &preds, ds.config.alpha_star);
    assert!(m.tail.n > 0 && m.head.n > 0);
    assert!(m.acc_tail().unwrap() < m.acc_head().unwrap());
    let perfect: Vec<usize> = ds.val.iter().map(Sample::answer).collect();
    let p = metrics(&ds.val, &perfect, ds.config.alpha_star);
    assert_eq!((p.overall, p.acc_tail(), p.acc_head()), (1.0, Some(1.0), Some(1.0)));
}

#[test]
fn per_function_counts_follow_annotations() {
    let ds = small(6, 10);
    let preds = vec![0; ds.val.len()];
    let m = metrics(&ds.val, &preds, 0.2);
    for (name, acc) in &m.per_function {
        let n = ds.val.iter().filter(|s| s.question.functions.iter().any(|f| f.as_str() == name)).count();
        assert_eq!(acc.n, n, "{name}");
    }
    let (_, ev) = evaluate(&mini(&ds, 6), &ds, &ds.val, InputKind::Oracle, &PruneMask::none()).unwrap();
    assert_eq!(ev.n, ds.val.len());
}
