//! Scene ground truth and the skewed scene generator.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{CATEGORIES, COLORS, MATERIALS, SIZES};
use crate::rng::LensRng;

/// Axis-aligned box `(x, y, w, h)` with `(x, y)` the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn center_x(&self) -> f32 {
        self.x + self.w / 2.0
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Box intersected with the unit square.
    pub fn clipped(&self) -> BBox {
        let x0 = self.x.clamp(0.0, 1.0);
        let y0 = self.y.clamp(0.0, 1.0);
        let x1 = (self.x + self.w).clamp(0.0, 1.0);
        let y1 = (self.y + self.h).clamp(0.0, 1.0);
        BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= 1.0 && self.y + self.h <= 1.0
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Intersection over union after clipping both boxes to the unit square.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.clipped(), b.clipped());
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0) as f64;
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0) as f64;
    let inter = ix * iy;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectGT {
    pub category: u8,
    pub color: u8,
    pub material: u8,
    pub size: u8,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<ObjectGT>,
}

impl Scene {
    pub fn count_category(&self, c: u8) -> usize {
        self.objects.iter().filter(|o| o.category == c).count()
    }

    /// Index of the only object of category `c`, if exactly one exists.
    pub fn unique(&self, c: u8) -> Option<usize> {
        let mut found = None;
        for (i, o) in self.objects.iter().enumerate() {
            if o.category == c {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
        }
        found
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability of the category's dominant color / material / size.
    /// Colors, materials and sizes are otherwise uniform over the rest.
    pub skew: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { min_objects: 2, max_objects: 7, skew: 0.6 }
    }
}

pub fn dominant_color(category: u8) -> u8 {
    category % COLORS.len() as u8
}

pub fn dominant_material(category: u8) -> u8 {
    (category / 2) % MATERIALS.len() as u8
}

pub fn dominant_size(category: u8) -> u8 {
    (category / 2 + category) % SIZES.len() as u8
}

fn skewed(rng: &mut LensRng, dominant: u8, n: usize, skew: f64) -> u8 {
    if n == 1 || rng.random::<f64>() < skew {
        return dominant;
    }
    let k = rng.random_range(0..n - 1) as u8;
    if k >= dominant {
        k + 1
    } else {
        k
    }
}

/// Objects are placed with their horizontal center away from the middle
/// band, so "left or right" always has a clear answer.
pub fn generate_scene(rng: &mut LensRng, config: &SceneConfig) -> Scene {
    let n = rng.random_range(config.min_objects.max(1)..=config.max_objects.max(config.min_objects.max(1)));
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let category = rng.random_range(0..CATEGORIES.len()) as u8;
        let color = skewed(rng, dominant_color(category), COLORS.len(), config.skew);
        let material = skewed(rng, dominant_material(category), MATERIALS.len(), config.skew);
        let size = skewed(rng, dominant_size(category), SIZES.len(), config.skew);
        let (lo, hi) = if size == 1 { (0.18, 0.3) } else { (0.08, 0.15) };
        let w: f32 = rng.random_range(lo..hi);
        let h: f32 = rng.random_range(lo..hi);
        let left = rng.random::<bool>();
        let cx: f32 = if left {
            rng.random_range(w / 2.0..0.45)
        } else {
            rng.random_range(0.55..1.0 - w / 2.0)
        };
        let y: f32 = rng.random_range(0.0..1.0 - h);
        let bbox = BBox { x: cx - w / 2.0, y, w, h };
        objects.push(ObjectGT { category, color, material, size, bbox });
    }
    Scene { objects }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn same_seed_same_scene() {
        let c = SceneConfig::default();
        assert_eq!(generate_scene(&mut rng_for(7, "s", 0), &c), generate_scene(&mut rng_for(7, "s", 0), &c));
    }

    #[test]
    fn boxes_inside_unit_square_and_counts_bounded() {
        let c = SceneConfig::default();
        for i in 0..500 {
            let s = generate_scene(&mut rng_for(1, "s", i), &c);
            assert!((c.min_objects..=c.max_objects).contains(&s.objects.len()));
            for o in &s.objects {
                assert!(o.bbox.is_valid(), "{:?}", o.bbox);
                assert!(!(0.45..0.55).contains(&o.bbox.center_x()));
            }
        }
    }

    #[test]
    fn iou_hand_cases() {
        let a = BBox { x: 0.1, y: 0.1, w: 0.2, h: 0.2 };
        assert!((iou(&a, &a) - 1.0).abs() < 1e-6);
        let b = BBox { x: 0.5, y: 0.5, w: 0.2, h: 0.2 };
        assert_eq!(iou(&a, &b), 0.0);
        let full = BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };
        let half = BBox { x: 0.5, y: 0.0, w: 1.0, h: 1.0 };
        assert!((iou(&full, &half) - 0.5).abs() < 1e-9);
    }
}
