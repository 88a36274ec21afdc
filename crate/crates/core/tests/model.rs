use lens_core::autodiff::{Segment, Tape};
use lens_core::model::layers::{
    cross_attention_head, multi_head_layer, self_attention_head, BlockVars, HeadParams, HeadVars,
};
use lens_core::model::{
    BlockType, EncoderKind, HeadAddress, ModelConfig, ModelInput, PruneMask, TransferScope, VisualTokens,
    VlTransformer,
};
use lens_core::rng::{normal, rng_for, LensRng};
use lens_core::tensor::Tensor;
use lens_core::LensError;

fn rand_tensor(rng: &mut LensRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng, 1.0) as f32).collect()).unwrap()
}

fn rand_vec(rng: &mut LensRng, n: usize) -> Tensor {
    Tensor::new(&[n], (0..n).map(|_| normal(rng, 0.5) as f32).collect()).unwrap()
}

fn head_params(rng: &mut LensRng, d: usize, dh: usize) -> HeadParams {
    HeadParams {
        wq: rand_tensor(rng, d, dh),
        bq: rand_vec(rng, dh),
        wk: rand_tensor(rng, d, dh),
        bk: rand_vec(rng, dh),
        wv: rand_tensor(rng, d, dh),
        bv: rand_vec(rng, dh),
    }
}

fn value_rows(x: &Tensor, p: &HeadParams) -> Vec<Vec<f64>> {
    let dh = p.wv.cols();
    (0..x.rows())
        .map(|i| {
            (0..dh)
                .map(|c| {
                    p.bv.data()[c] as f64
                        + (0..x.cols()).map(|k| x.row(i)[k] as f64 * p.wv.row(k)[c] as f64).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn close(a: f32, b: f64, tol: f64) -> bool {
    (a as f64 - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = rng_for(1, "single", 0);
    let p = head_params(&mut rng, 6, 3);
    let x = rand_tensor(&mut rng, 1, 6);
    let (out, map) = self_attention_head(&x, &p, false).unwrap();
    assert_eq!(map.weights, vec![1.0]);
    let v = value_rows(&x, &p);
    for c in 0..3 {
        assert!(close(out.row(0)[c], v[0][c], 1e-5));
    }
}

#[test]
fn identical_tokens_split_attention_evenly() {
    let mut rng = rng_for(2, "twins", 0);
    let p = head_params(&mut rng, 6, 3);
    let t = rand_tensor(&mut rng, 1, 6);
    let x = Tensor::matrix(2, 6, [t.data(), t.data()].concat()).unwrap();
    let (_, map) = self_attention_head(&x, &p, false).unwrap();
    assert!(map.weights.iter().all(|&w| (w - 0.5).abs() < 1e-6));
    let a = rand_tensor(&mut rng, 3, 6);
    let (_, map) = cross_attention_head(&a, &x, &p, false).unwrap();
    assert_eq!((map.rows, map.cols), (3, 2));
    assert!(map.weights.iter().all(|&w| (w - 0.5).abs() < 1e-6));
}

#[test]
fn pruned_head_outputs_the_mean_value() {
    let mut rng = rng_for(3, "pruned", 0);
    let p = head_params(&mut rng, 5, 4);
    let x = rand_tensor(&mut rng, 7, 5);
    let (out, map) = self_attention_head(&x, &p, true).unwrap();
    assert!(map.weights.iter().all(|&w| (w - 1.0 / 7.0).abs() < 1e-7));
    let v = value_rows(&x, &p);
    for i in 0..7 {
        for c in 0..4 {
            let mean = v.iter().map(|r| r[c]).sum::<f64>() / 7.0;
            assert!(close(out.row(i)[c], mean, 1e-5));
        }
    }
}

#[test]
fn single_key_copies_its_value() {
    let mut rng = rng_for(4, "one-key", 0);
    let p = head_params(&mut rng, 4, 2);
    let a = rand_tensor(&mut rng, 5, 4);
    let b = rand_tensor(&mut rng, 1, 4);
    let (out, _) = cross_attention_head(&a, &b, &p, false).unwrap();
    let v = value_rows(&b, &p);
    for i in 0..5 {
        for c in 0..2 {
            assert!(close(out.row(i)[c], v[0][c], 1e-5));
        }
    }
}

#[test]
fn permuting_keys_permutes_columns() {
    let mut rng = rng_for(5, "perm", 0);
    let p = head_params(&mut rng, 4, 4);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 4);
    let perm = [2usize, 0, 3, 1];
    let pb = Tensor::matrix(4, 4, perm.iter().flat_map(|&i| b.row(i).to_vec()).collect()).unwrap();
    let (o1, m1) = cross_attention_head(&a, &b, &p, false).unwrap();
    let (o2, m2) = cross_attention_head(&a, &pb, &p, false).unwrap();
    for i in 0..3 {
        for (j, &src) in perm.iter().enumerate() {
            assert!((m2.row(i)[j] - m1.row(i)[src]).abs() < 1e-6);
        }
    }
    for (x, y) in o1.data().iter().zip(o2.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn empty_sequences_are_rejected() {
    let mut rng = rng_for(6, "empty", 0);
    let p = head_params(&mut rng, 4, 2);
    let empty = Tensor::zeros(&[0, 4]);
    assert!(matches!(self_attention_head(&empty, &p, false), Err(LensError::Contract(_))));
    assert!(cross_attention_head(&rand_tensor(&mut rng, 2, 4), &empty, &p, false).is_err());
}

fn block_on_tape(tape: &mut Tape<f32>, heads: &[HeadParams], wo: Tensor, bo: Tensor, d: usize) -> BlockVars {
    let hv = heads
        .iter()
        .map(|p| HeadVars {
            wq: tape.constant(p.wq.clone()),
            bq: tape.constant(p.bq.clone()),
            wk: tape.constant(p.wk.clone()),
            bk: tape.constant(p.bk.clone()),
            wv: tape.constant(p.wv.clone()),
            bv: tape.constant(p.bv.clone()),
        })
        .collect();
    BlockVars {
        heads: hv,
        wo: tape.constant(wo),
        bo: tape.constant(bo),
        ln_gain: tape.constant(Tensor::filled(&[d], 1.0)),
        ln_bias: tape.constant(Tensor::zeros(&[d])),
    }
}

#[test]
fn one_head_layer_with_identity_output_equals_the_head() {
    let mut rng = rng_for(7, "h1", 0);
    let d = 6;
    let p = head_params(&mut rng, d, d);
    let x = rand_tensor(&mut rng, 4, d);
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let b = block_on_tape(&mut tape, std::slice::from_ref(&p), eye, Tensor::zeros(&[d]), d);
    let seg = [Segment { q_start: 0, q_len: 4, k_start: 0, k_len: 4 }];
    let scale = 1.0 / (d as f32).sqrt();
    let out = multi_head_layer(&mut tape, xv, xv, &b, &seg, &[false], scale, false).unwrap();
    let (single, _) = self_attention_head(&x, &p, false).unwrap();
    assert_eq!(tape.value(out.hidden).shape(), x.shape());
    for (a, b) in tape.value(out.hidden).data().iter().zip(single.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

/// Reference for a fully pruned layer: per-head mean value rows,
/// concatenated, projected, added to the input and layer-normalized.
fn averaging_layer(x: &Tensor, heads: &[HeadParams], wo: &Tensor, bo: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut ctx = vec![Vec::new(); n];
    for p in heads {
        let v = value_rows(x, p);
        let mean: Vec<f64> = (0..p.wv.cols()).map(|c| v.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        for row in ctx.iter_mut() {
            row.extend_from_slice(&mean);
        }
    }
    ctx.iter()
        .enumerate()
        .map(|(i, c)| {
            let r: Vec<f64> = (0..d)
                .map(|o| {
                    x.row(i)[o] as f64
                        + bo.data()[o] as f64
                        + (0..d).map(|k| c[k] * wo.row(k)[o] as f64).sum::<f64>()
                })
                .collect();
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            r.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

#[test]
fn fully_pruned_layer_matches_explicit_averaging() {
    let (n, d, h) = (4, 8, 2);
    for case in 0..5 {
        let mut rng = rng_for(case, "avg", 0);
        let heads: Vec<HeadParams> = (0..h).map(|_| head_params(&mut rng, d, d / h)).collect();
        let wo = rand_tensor(&mut rng, d, d);
        let bo = rand_vec(&mut rng, d);
        let x = rand_tensor(&mut rng, n, d);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = block_on_tape(&mut tape, &heads, wo.clone(), bo.clone(), d);
        let seg = [Segment { q_start: 0, q_len: n, k_start: 0, k_len: n }];
        let out = multi_head_layer(&mut tape, xv, xv, &b, &seg, &[true, true], 0.35, true).unwrap();
        let want = averaging_layer(&x, &heads, &wo, &bo);
        let got = tape.value(out.hidden);
        for i in 0..n {
            for c in 0..d {
                assert!(close(got.row(i)[c], want[i][c], 1e-4), "case {case} ({i},{c})");
            }
        }
    }
}

#[test]
fn head_count_mismatch_is_a_config_error() {
    let mut rng = rng_for(8, "mismatch", 0);
    let heads: Vec<HeadParams> = (0..2).map(|_| head_params(&mut rng, 4, 2)).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(rand_tensor(&mut rng, 3, 4));
    let b = block_on_tape(&mut tape, &heads, rand_tensor(&mut rng, 4, 4), Tensor::zeros(&[4]), 4);
    let seg = [Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 }];
    let r = multi_head_layer(&mut tape, xv, xv, &b, &seg, &[false], 0.5, true);
    assert!(matches!(r, Err(LensError::Config(_))));
}

const VW: usize = 8;
const QV: usize = 12;

fn desk(encoder: EncoderKind) -> ModelConfig {
    ModelConfig::desk(encoder, VW, QV, 5)
}

fn sample(id: u64, encoder: EncoderKind, tokens: usize, objects: usize, rng: &mut LensRng) -> ModelInput {
    use rand::Rng;
    let c = desk(encoder);
    let mut question = vec![0u32; c.max_question_len];
    let mut question_mask = vec![false; c.max_question_len];
    question[0] = 1;
    question_mask[0] = true;
    for i in 1..tokens {
        question[i] = rng.random_range(2..QV as u32);
        question_mask[i] = true;
    }
    let mut data = vec![0.0; c.max_objects * VW];
    let mut mask = vec![false; c.max_objects];
    for o in 0..objects {
        for j in 0..VW {
            data[o * VW + j] = normal(rng, 1.0) as f32;
        }
        mask[o] = true;
    }
    ModelInput { id, encoder, question, question_mask, visual: VisualTokens { width: VW, data, mask } }
}

#[test]
fn desk_layout_has_136_heads_of_which_80_cross() {
    let c = desk(EncoderKind::OracleSymbolic);
    assert_eq!(c.all_heads().len(), 136);
    assert_eq!(c.cross_heads().len(), 80);
    let m = VlTransformer::new(c, &mut rng_for(0, "desk", 0)).unwrap();
    let mut rng = rng_for(0, "x", 0);
    let x = sample(0, EncoderKind::OracleSymbolic, 6, 5, &mut rng);
    let out = m.forward(&x, &PruneMask::none(), true).unwrap();
    assert_eq!(out.records.len(), 136);
    assert_eq!(out.records.iter().map(|r| r.head).collect::<Vec<_>>(), m.config().all_heads());
    for r in &out.records {
        assert!(r.weights.iter().all(|&w| w >= 0.0));
        for row in r.row_iter() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn capture_is_observation_only_and_forward_deterministic() {
    let m = VlTransformer::new(desk(EncoderKind::OracleSymbolic), &mut rng_for(1, "desk", 0)).unwrap();
    let mut rng = rng_for(1, "x", 0);
    let x = sample(1, EncoderKind::OracleSymbolic, 7, 4, &mut rng);
    let a = m.forward(&x, &PruneMask::none(), true).unwrap();
    let b = m.forward(&x, &PruneMask::none(), false).unwrap();
    assert_eq!(a.logits, b.logits);
    assert!(b.records.is_empty());
    assert_eq!(a, m.forward(&x, &PruneMask::none(), true).unwrap());
}

#[test]
fn pruning_changes_no_parameter_and_yields_uniform_rows() {
    let c = desk(EncoderKind::OracleSymbolic);
    let m = VlTransformer::new(c.clone(), &mut rng_for(2, "desk", 0)).unwrap();
    let before = m.params().tensors().to_vec();
    let mut rng = rng_for(2, "x", 0);
    let x = sample(2, EncoderKind::OracleSymbolic, 5, 3, &mut rng);
    let target = HeadAddress::new(BlockType::Vl, 1, 2);
    let mask = PruneMask::new(&c, [target]).unwrap();
    let out = m.forward(&x, &mask, true).unwrap();
    assert_eq!(m.params().tensors(), &before[..]);
    let rec = out.records.iter().find(|r| r.head == target).unwrap();
    assert!(rec.weights.iter().all(|&w| (w - 1.0 / rec.cols as f32).abs() < 1e-7));
    let bad = HeadAddress::new(BlockType::Lang, 9, 0);
    assert!(matches!(PruneMask::new(&c, [bad]), Err(LensError::HeadAddress(_))));
}

#[test]
fn identical_visual_tokens_permute_without_changing_logits() {
    let c = ModelConfig::mini(EncoderKind::OracleSymbolic, VW, QV, 5);
    let m = VlTransformer::new(c, &mut rng_for(3, "mini", 0)).unwrap();
    let mut rng = rng_for(3, "x", 0);
    let mut x = sample(3, EncoderKind::OracleSymbolic, 5, 3, &mut rng);
    // Same box columns for every object; the other features differ.
    for o in 0..3 {
        for j in VW - 4..VW {
            x.visual.data[o * VW + j] = 0.25;
        }
    }
    let perm = [2usize, 0, 1];
    let mut y = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let row = x.visual.row(src).to_vec();
        y.visual.data[dst * VW..(dst + 1) * VW].copy_from_slice(&row);
    }
    let a = m.forward(&x, &PruneMask::none(), true).unwrap();
    let b = m.forward(&y, &PruneMask::none(), true).unwrap();
    for (p, q) in a.logits.iter().zip(&b.logits) {
        assert!((p - q).abs() < 1e-4);
    }
    let vl_a = a.records.iter().find(|r| r.head.block == BlockType::Vl).unwrap();
    let vl_b = b.records.iter().find(|r| r.head.block == BlockType::Vl).unwrap();
    for i in 0..vl_a.rows {
        for (dst, &src) in perm.iter().enumerate() {
            assert!((vl_b.row(i)[dst] - vl_a.row(i)[src]).abs() < 1e-5);
        }
    }
}

#[test]
fn transfer_copies_all_but_the_visual_block() {
    let oracle = VlTransformer::new(desk(EncoderKind::OracleSymbolic), &mut rng_for(4, "o", 0)).unwrap();
    let target = desk(EncoderKind::NoisyDense);
    let scratch = VlTransformer::new(target.clone(), &mut rng_for(4, "s", 0)).unwrap();
    let t = oracle
        .init_transfer(target.clone(), TransferScope::ProjectionAndVisionLayers, &mut rng_for(4, "t", 0))
        .unwrap();
    assert_eq!(t.params().scalar_count(), scratch.params().scalar_count());
    for (name, tensor) in t.params().names().iter().zip(t.params().tensors()) {
        let src = oracle.params().by_name(name).unwrap();
        if name.starts_with("vis.") || name.starts_with("vis_embed.") {
            if name.ends_with("weight") {
                assert_ne!(tensor, src, "{name} should be fresh");
            }
        } else {
            assert_eq!(tensor, src, "{name} should be copied");
        }
    }
    let p = oracle
        .init_transfer(target.clone(), TransferScope::ProjectionOnly, &mut rng_for(4, "t", 0))
        .unwrap();
    let name = "vis.0.ffn.fc1.weight";
    assert!(p.params().by_name(name).is_some());
    assert_eq!(p.params().by_name(name), oracle.params().by_name(name));
    assert_ne!(p.params().by_name("vis_embed.proj.weight"), oracle.params().by_name("vis_embed.proj.weight"));
    let mut rng = rng_for(4, "x", 0);
    let x = sample(4, EncoderKind::NoisyDense, 4, 2, &mut rng);
    assert!(t.forward(&x, &PruneMask::none(), false).is_ok());
}

#[test]
fn transfer_rejects_mismatched_configs() {
    let oracle = VlTransformer::new(desk(EncoderKind::OracleSymbolic), &mut rng_for(5, "o", 0)).unwrap();
    let mut target = desk(EncoderKind::NoisyDense);
    target.lang_layers = 8;
    target.heads = 8;
    match oracle.init_transfer(target, TransferScope::ProjectionAndVisionLayers, &mut rng_for(5, "t", 0)) {
        Err(LensError::Transfer(msg)) => {
            assert!(msg.contains("heads") && msg.contains("lang_layers"), "{msg}");
        }
        other => panic!("expected a transfer error, got {other:?}"),
    }
}

#[test]
fn encoder_mismatch_is_a_contract_error() {
    let m = VlTransformer::new(desk(EncoderKind::OracleSymbolic), &mut rng_for(6, "o", 0)).unwrap();
    let mut rng = rng_for(6, "x", 0);
    let x = sample(6, EncoderKind::NoisyDense, 4, 2, &mut rng);
    assert!(matches!(m.forward(&x, &PruneMask::none(), false), Err(LensError::Contract(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = desk(EncoderKind::OracleSymbolic);
    c.heads = 5;
    assert!(matches!(c.validate(), Err(LensError::Config(_))));
    let mut c = desk(EncoderKind::OracleSymbolic);
    c.cross_layers = 0;
    assert!(c.validate().is_err());
}
