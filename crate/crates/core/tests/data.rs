use std::collections::BTreeMap;

use lens_core::data::*;
use lens_core::model::{EncoderKind, ModelConfig, PruneMask, VlTransformer};
use lens_core::rng::rng_for;
use lens_core::LensError;

fn cat(name: &str) -> u8 {
    CATEGORIES.iter().position(|c| *c == name).unwrap() as u8
}

fn color(name: &str) -> u8 {
    COLORS.iter().position(|c| *c == name).unwrap() as u8
}

fn object(category: u8, color: u8, x: f32) -> ObjectGT {
    ObjectGT { category, color, material: 0, size: 0, bbox: BBox { x, y: 0.2, w: 0.1, h: 0.1 } }
}

#[test]
fn scenes_are_deterministic_and_bounded() {
    let cfg = SceneConfig::default();
    let a = generate_scene(&mut rng_for(7, "scene", 0), &cfg);
    let b = generate_scene(&mut rng_for(7, "scene", 0), &cfg);
    assert_eq!(a, b);
    let mut seen = [false; CATEGORIES.len()];
    for i in 0..10_000 {
        let s = generate_scene(&mut rng_for(3, "scene", i), &cfg);
        assert!((1..=16).contains(&s.objects.len()));
        for o in &s.objects {
            seen[o.category as usize] = true;
            let b = o.bbox;
            assert!(b.w > 0.0 && b.h > 0.0 && b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 1.0 && b.y + b.h <= 1.0);
        }
    }
    assert!(seen.iter().all(|&s| s), "every category appears in 10,000 scenes");
}

#[test]
fn verify_color_on_the_only_cube() {
    let scene = Scene { objects: vec![object(cat("cube"), color("red"), 0.1), object(cat("ball"), color("blue"), 0.7)] };
    let program = Program::parse("is the cube red ?").unwrap();
    let exec = program.execute(&scene).unwrap();
    assert_eq!(exec.answer, Answer::Yes);
    assert_eq!(exec.needed, vec![0]);
    assert_eq!(program.template(), Template::VerifyColor);
}

#[test]
fn choose_color_lists_its_function() {
    let mut rng = rng_for(1, "q", 0);
    let mut made = 0;
    for i in 0..200 {
        let scene = generate_scene(&mut rng_for(1, "scene", i), &SceneConfig::default());
        if let Some(q) = generate_question(&mut rng, &scene, Template::ChooseColor) {
            assert!(q.functions.contains(&Function::ChooseColor));
            assert!(!q.functions.is_empty());
            made += 1;
        }
    }
    assert!(made > 50);
}

#[test]
fn executor_agrees_with_generated_answers() {
    let cfg = DataConfig { seed: 11, n_train: 1000, n_val: 0, n_test: 0, ..DataConfig::default() };
    let ds = Dataset::generate(cfg).unwrap();
    assert_eq!(ds.train.len(), 1000);
    for s in &ds.train {
        let program = Program::parse(&s.question.text).unwrap();
        assert_eq!(program, s.question.program);
        let exec = program.execute(&s.scene).expect("answerable");
        assert_eq!(exec.answer, s.question.answer, "{}", s.question.text);
        assert_eq!(exec.needed, s.question.needed);
        assert_eq!(ds.vocab.detokenize(&s.tokens), s.question.text);
    }
}

#[test]
fn oracle_tokens_are_one_hot_blocks() {
    assert_eq!(ORACLE_WIDTH, 27);
    let a = object(cat("cone"), color("green"), 0.3);
    let mut b = a;
    b.color = color("gray");
    let t = encode_oracle(&Scene { objects: vec![a, b] }, 16);
    assert_eq!(t.width, 27);
    assert_eq!(t.valid_count(), 2);
    let diff: Vec<usize> = (0..27).filter(|&j| t.row(0)[j] != t.row(1)[j]).collect();
    assert_eq!(diff.len(), 2);
    assert!(diff.iter().all(|&j| (12..18).contains(&j)));
    assert!(t.row(5).iter().all(|&x| x == 0.0));
}

#[test]
fn padding_receives_no_attention() {
    let scene = Scene { objects: vec![object(0, 0, 0.1), object(3, 2, 0.6), object(5, 1, 0.7)] };
    let visual = encode_oracle(&scene, 16);
    let vocab = Vocab::default();
    let tok = vocab.tokenize("is the cube red ?", 16).unwrap();
    let c = ModelConfig::mini(EncoderKind::OracleSymbolic, ORACLE_WIDTH, vocab.len(), ANSWER_COUNT);
    let m = VlTransformer::new(c, &mut rng_for(0, "m", 0)).unwrap();
    let input = lens_core::model::ModelInput {
        id: 0,
        encoder: EncoderKind::OracleSymbolic,
        question: tok.ids,
        question_mask: tok.mask,
        visual,
    };
    let out = m.forward(&input, &PruneMask::none(), true).unwrap();
    for r in &out.records {
        let (q, k) = match r.head.block {
            lens_core::model::BlockType::Lang | lens_core::model::BlockType::Ll => (6, 6),
            lens_core::model::BlockType::Vl => (6, 3),
            lens_core::model::BlockType::Lv => (3, 6),
            _ => (3, 3),
        };
        assert_eq!((r.rows, r.cols), (q, k), "{}", r.head);
    }
}

#[test]
fn detection_noise_cases() {
    let protos = Prototypes::generate(&PrototypeConfig::default(), 0);
    let scene = generate_scene(&mut rng_for(5, "scene", 0), &SceneConfig::default());
    let clean = simulate_detection(&scene, &NoiseConfig::off(), &protos, 16, &mut rng_for(5, "d", 0));
    assert_eq!(clean.detections.len(), scene.objects.len());
    for (i, (d, o)) in clean.detections.iter().zip(&scene.objects).enumerate() {
        assert_eq!(d.source, Some(i));
        assert_eq!(d.category, o.category);
        assert_eq!(d.bbox, o.bbox);
    }
    let all_missed = NoiseConfig { p_miss: 1.0, ..NoiseConfig::default() };
    assert!(simulate_detection(&scene, &all_missed, &protos, 16, &mut rng_for(5, "d", 0)).detections.is_empty());
}

#[test]
fn miss_rate_matches_its_probability() {
    let protos = Prototypes::generate(&PrototypeConfig::default(), 0);
    let noise = NoiseConfig { p_miss: 0.2, p_dup: 0.0, ..NoiseConfig::default() };
    let (mut objects, mut missed, mut i) = (0usize, 0usize, 0u64);
    while objects < 10_000 {
        let scene = generate_scene(&mut rng_for(9, "scene", i), &SceneConfig::default());
        let det = simulate_detection(&scene, &noise, &protos, 64, &mut rng_for(9, "d", i));
        let take = scene.objects.len().min(10_000 - objects);
        for o in 0..take {
            missed += usize::from(!det.detections.iter().any(|d| d.source == Some(o)));
        }
        objects += take;
        i += 1;
    }
    let rate = missed as f64 / objects as f64;
    assert!((rate - 0.2).abs() <= 0.012, "miss rate {rate}");
}

#[test]
fn noise_free_embeddings_decode_exactly() {
    let protos = Prototypes::generate(&PrototypeConfig::default(), 4);
    for i in 0..500 {
        let scene = generate_scene(&mut rng_for(4, "scene", i), &SceneConfig::default());
        let det = simulate_detection(&scene, &NoiseConfig::off(), &protos, 16, &mut rng_for(4, "d", i));
        for (d, o) in det.detections.iter().zip(&scene.objects) {
            let got = protos.decode(&d.embedding);
            assert_eq!(
                (got.category, got.color, got.material, got.size),
                (o.category, o.color, o.material, o.size)
            );
        }
    }
}

#[test]
fn rarity_follows_training_frequencies() {
    let g = "query-color:cube".to_string();
    let counts: BTreeMap<usize, u32> =
        [(Answer::Color(0).index(), 50), (Answer::Color(1).index(), 10), (Answer::Color(2).index(), 40)].into();
    let table = RarityTable::from_counts([(g.clone(), counts)].into());
    let blue = table.annotate(&g, Answer::Color(1).index());
    let green = table.annotate(&g, Answer::Color(2).index());
    let red = table.annotate(&g, Answer::Color(0).index());
    assert!(blue.quantile < green.quantile && green.quantile < red.quantile);
    assert!((blue.quantile - 0.1).abs() < 1e-12);
    assert_eq!(red.quantile, 1.0);
}

#[test]
fn tails_nest_and_cover_everything_at_one() {
    let ds = Dataset::generate(DataConfig { seed: 2, n_train: 2000, n_val: 500, n_test: 0, ..DataConfig::default() })
        .unwrap();
    let mut last = 0;
    for k in 1..=20 {
        let n = ds.val.iter().filter(|s| s.is_tail(k as f64 / 20.0)).count();
        assert!(n >= last);
        last = n;
    }
    assert_eq!(last, ds.val.len());
}

#[test]
fn rarity_uses_the_training_split_only() {
    let base = DataConfig { seed: 6, n_train: 1500, n_val: 200, n_test: 100, ..DataConfig::default() };
    let a = Dataset::generate(base.clone()).unwrap();
    let b = Dataset::generate(DataConfig { n_val: 400, n_test: 300, ..base }).unwrap();
    assert_eq!(a.rarity, b.rarity);
    assert_eq!(a.train, b.train);
}

#[test]
fn generation_is_reproducible() {
    let cfg = DataConfig { seed: 8, n_train: 300, n_val: 50, n_test: 50, ..DataConfig::default() };
    assert_eq!(Dataset::generate(cfg.clone()).unwrap(), Dataset::generate(cfg).unwrap());
}

#[test]
fn tokenizer_contract() {
    let v = Vocab::default();
    let t = v.tokenize("is the cube red ?", 16).unwrap();
    assert_eq!(v.words(&t.ids), ["[CLS]", "is", "the", "cube", "red", "?"]);
    assert_eq!(t.ids.len(), 16);
    assert_eq!(t.ids[0], CLS_ID);
    assert_eq!(v.detokenize(&t.ids), "is the cube red ?");
    assert!(matches!(v.tokenize("is the dragon red ?", 16), Err(LensError::Vocabulary(_))));
}

#[test]
fn iou_cases() {
    let a = BBox { x: 0.1, y: 0.1, w: 0.3, h: 0.3 };
    assert!((iou(&a, &a) - 1.0).abs() < 1e-6);
    let far = BBox { x: 0.6, y: 0.6, w: 0.2, h: 0.2 };
    assert_eq!(iou(&a, &far), 0.0);
    let unit = BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };
    let right = BBox { x: 0.5, y: 0.0, w: 1.0, h: 1.0 };
    // The second box is clipped to 0.5 x 1, which lies inside the first.
    assert!((iou(&unit, &right) - 0.5).abs() < 1e-6);
}
