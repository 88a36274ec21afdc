//! Visual encodings: the symbolic oracle token, the simulated detector and
//! its dense embeddings, and a nearest-prototype decoder.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{near_category, CATEGORIES, COLORS, MATERIALS, ORACLE_WIDTH, SIZES};
use super::scene::{BBox, Scene};
use crate::model::{EncoderKind, VisualTokens};
use crate::rng::{normal, rng_for, LensRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub p_miss: f64,
    pub p_dup: f64,
    pub p_err: f64,
    /// Share of category errors that go to the near category.
    pub p_near: f64,
    pub sigma_box: f64,
    pub sigma_emb: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { p_miss: 0.15, p_dup: 0.05, p_err: 0.15, p_near: 0.7, sigma_box: 0.02, sigma_emb: 0.5 }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self { p_miss: 0.0, p_dup: 0.0, p_err: 0.0, p_near: 0.0, sigma_box: 0.0, sigma_emb: 0.0 }
    }
}

/// Fixed random directions that the dense embedding is built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub width: usize,
    pub categories: Vec<Vec<f32>>,
    pub colors: Vec<Vec<f32>>,
    pub materials: Vec<Vec<f32>>,
    pub sizes: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub width: usize,
    /// Per-coordinate std of the difference between near categories
    /// (shared part has std 1).
    pub near_spread: f64,
    /// Per-coordinate std of attribute offsets.
    pub attr_scale: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { width: 64, near_spread: 0.35, attr_scale: 0.15 }
    }
}

/// Predicted category and attributes of one detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub category: u8,
    pub color: u8,
    pub material: u8,
    pub size: u8,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f32], set: &[Vec<f32>]) -> u8 {
    let mut best = (0, f32::INFINITY);
    for (i, p) in set.iter().enumerate() {
        let d = sq_dist(x, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0 as u8
}

impl Prototypes {
    pub fn generate(config: &PrototypeConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "prototypes", 0);
        let w = config.width;
        let mut draw = |std: f64| -> Vec<f32> { (0..w).map(|_| normal(&mut rng, std) as f32).collect() };
        let mut categories = Vec::with_capacity(CATEGORIES.len());
        for _ in 0..CATEGORIES.len() / 2 {
            let base = draw(1.0);
            let delta = draw(config.near_spread / 2.0);
            categories.push(base.iter().zip(&delta).map(|(b, d)| b + d).collect());
            categories.push(base.iter().zip(&delta).map(|(b, d)| b - d).collect());
        }
        let colors = (0..COLORS.len()).map(|_| draw(config.attr_scale)).collect();
        let materials = (0..MATERIALS.len()).map(|_| draw(config.attr_scale)).collect();
        let sizes = (0..SIZES.len()).map(|_| draw(config.attr_scale)).collect();
        Self { width: w, categories, colors, materials, sizes }
    }

    /// Noise-free embedding of a (category, color, material, size) tuple.
    pub fn clean(&self, category: u8, color: u8, material: u8, size: u8) -> Vec<f32> {
        let mut e = self.categories[category as usize].clone();
        for off in [&self.colors[color as usize], &self.materials[material as usize], &self.sizes[size as usize]] {
            for (x, o) in e.iter_mut().zip(off) {
                *x += o;
            }
        }
        e
    }

    /// Category by nearest prototype, then each attribute by the nearest
    /// offset to the residual.
    pub fn decode(&self, embedding: &[f32]) -> Decoded {
        let category = nearest(embedding, &self.categories);
        let residual: Vec<f32> =
            embedding.iter().zip(&self.categories[category as usize]).map(|(e, p)| e - p).collect();
        Decoded {
            category,
            color: nearest(&residual, &self.colors),
            material: nearest(&residual, &self.materials),
            size: nearest(&residual, &self.sizes),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: u8,
    pub embedding: Vec<f32>,
    pub bbox: BBox,
    /// Index of the ground-truth object this detection came from.
    pub source: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectedScene {
    pub detections: Vec<Detection>,
}

fn jitter(rng: &mut LensRng, b: &BBox, sigma: f64) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let mut x0 = b.x + normal(rng, sigma) as f32;
    let mut y0 = b.y + normal(rng, sigma) as f32;
    let mut x1 = b.x + b.w + normal(rng, sigma) as f32;
    let mut y1 = b.y + b.h + normal(rng, sigma) as f32;
    x0 = x0.clamp(0.0, 0.99);
    y0 = y0.clamp(0.0, 0.99);
    x1 = x1.clamp(x0 + 0.01, 1.0);
    y1 = y1.clamp(y0 + 0.01, 1.0);
    BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

fn confuse(rng: &mut LensRng, category: u8, noise: &NoiseConfig) -> u8 {
    if rng.random::<f64>() >= noise.p_err {
        return category;
    }
    if rng.random::<f64>() < noise.p_near {
        return near_category(category as usize) as u8;
    }
    let k = rng.random_range(0..CATEGORIES.len() - 1) as u8;
    if k >= category {
        k + 1
    } else {
        k
    }
}

/// Simulated detector. Objects are independently dropped (`p_miss`) or
/// duplicated (`p_dup`); each detection's category is confused with
/// probability `p_err`, its box jittered and its embedding built from the
/// prototype of the predicted category plus the true attribute offsets and
/// Gaussian noise. At most `max_detections` are kept.
pub fn simulate_detection(
    scene: &Scene,
    noise: &NoiseConfig,
    protos: &Prototypes,
    max_detections: usize,
    rng: &mut LensRng,
) -> DetectedScene {
    let mut detections = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if rng.random::<f64>() < noise.p_miss {
            continue;
        }
        let copies = if rng.random::<f64>() < noise.p_dup { 2 } else { 1 };
        for _ in 0..copies {
            let category = confuse(rng, o.category, noise);
            let mut embedding = protos.clean(category, o.color, o.material, o.size);
            if noise.sigma_emb > 0.0 {
                for x in &mut embedding {
                    *x += normal(rng, noise.sigma_emb) as f32;
                }
            }
            let bbox = jitter(rng, &o.bbox, noise.sigma_box);
            detections.push(Detection { category, embedding, bbox, source: Some(i) });
        }
    }
    detections.truncate(max_detections);
    DetectedScene { detections }
}

fn one_hot(out: &mut Vec<f32>, n: usize, k: u8) {
    let start = out.len();
    out.resize(start + n, 0.0);
    out[start + k as usize] = 1.0;
}

fn symbolic_token(out: &mut Vec<f32>, d: Decoded, bbox: &BBox) {
    one_hot(out, CATEGORIES.len(), d.category);
    one_hot(out, COLORS.len(), d.color);
    one_hot(out, MATERIALS.len(), d.material);
    one_hot(out, SIZES.len(), d.size);
    out.extend_from_slice(&bbox.as_array());
}

fn pad(mut data: Vec<f32>, rows: usize, width: usize, max_objects: usize) -> VisualTokens {
    data.resize(max_objects * width, 0.0);
    let mut mask = vec![false; max_objects];
    mask[..rows].fill(true);
    VisualTokens { width, data, mask }
}

/// One-hot category, color, material and size followed by the box, per
/// ground-truth object; padded with zero rows.
pub fn encode_oracle(scene: &Scene, max_objects: usize) -> VisualTokens {
    let mut data = Vec::with_capacity(max_objects * ORACLE_WIDTH);
    let rows = scene.objects.len().min(max_objects);
    for o in &scene.objects[..rows] {
        let d = Decoded { category: o.category, color: o.color, material: o.material, size: o.size };
        symbolic_token(&mut data, d, &o.bbox);
    }
    pad(data, rows, ORACLE_WIDTH, max_objects)
}

/// Dense embedding followed by the jittered box, per detection.
pub fn encode_dense(det: &DetectedScene, max_objects: usize) -> VisualTokens {
    let width = det.detections.first().map_or(0, |d| d.embedding.len()) + 4;
    encode_dense_width(det, max_objects, width)
}

pub fn encode_dense_width(det: &DetectedScene, max_objects: usize, width: usize) -> VisualTokens {
    let rows = det.detections.len().min(max_objects);
    let mut data = Vec::with_capacity(max_objects * width);
    for d in &det.detections[..rows] {
        data.extend_from_slice(&d.embedding);
        data.extend_from_slice(&d.bbox.as_array());
    }
    pad(data, rows, width, max_objects)
}

/// Symbolic tokens from the decoder's predictions on detections (the
/// "predicted 1-in-K" input of the no-retrain transfer variant).
pub fn encode_predicted(det: &DetectedScene, protos: &Prototypes, max_objects: usize) -> VisualTokens {
    let rows = det.detections.len().min(max_objects);
    let mut data = Vec::with_capacity(max_objects * ORACLE_WIDTH);
    for d in &det.detections[..rows] {
        symbolic_token(&mut data, protos.decode(&d.embedding), &d.bbox);
    }
    pad(data, rows, ORACLE_WIDTH, max_objects)
}

pub fn visual_width(kind: EncoderKind, protos: &Prototypes) -> usize {
    match kind {
        EncoderKind::OracleSymbolic => ORACLE_WIDTH,
        EncoderKind::NoisyDense => protos.width + 4,
    }
}
