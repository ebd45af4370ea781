//! Procedural street-like scenes.
//!
//! A scene is a sky/background region above a road, both with depth falling
//! off geometrically from 100 m at the top row to 2 m at the bottom, plus a
//! handful of cars (rectangles) and people (ellipses) standing at constant
//! depths in `[5, 50]` m.
//!
//! Pixel intensity encodes depth explicitly: every channel carries
//! `BASE + SPAN * (1 - t)` with `t = (depth - 1) / 99`, so near surfaces are
//! bright. Each class adds a zero-sum colour offset on top, which leaves the
//! channel mean free of class information. A small per-pixel noise term keeps
//! the mapping from being exactly invertible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sparsify;
use crate::error::{Error, Result};
use crate::metrics::SparseDepth;
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

/// Semantic classes of the synthetic scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Road = 1,
    Car = 2,
    Person = 3,
}

impl Class {
    pub fn from_id(id: u8) -> Option<Class> {
        Some(match id {
            0 => Class::Background,
            1 => Class::Road,
            2 => Class::Car,
            3 => Class::Person,
            _ => return None,
        })
    }

    /// Zero-sum RGB offset added to the depth-coded intensity.
    fn tint(self) -> [f64; 3] {
        match self {
            Class::Background => [-12.0, -12.0, 24.0],
            Class::Road => [12.0, 12.0, -24.0],
            Class::Car => [24.0, -12.0, -12.0],
            Class::Person => [-12.0, 24.0, -12.0],
        }
    }
}

pub const MIN_DEPTH: f64 = 1.0;
pub const MAX_DEPTH: f64 = 100.0;
const FAR_ROW_DEPTH: f64 = 100.0;
const NEAR_ROW_DEPTH: f64 = 2.0;
const INTENSITY_BASE: f64 = 100.0;
const INTENSITY_SPAN: f64 = 40.0;
const NOISE: i32 = 2;

/// Pixel intensity (before tint and noise) for a surface at `depth` metres.
pub fn depth_to_intensity(depth: f64) -> f64 {
    let t = (depth - MIN_DEPTH) / (MAX_DEPTH - MIN_DEPTH);
    INTENSITY_BASE + INTENSITY_SPAN * (1.0 - t)
}

/// One object instance: its class and binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: Class,
    pub mask: Tensor,
}

/// A synthetic scene with all annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, integer values in `[0, 255]`.
    pub rgb: Tensor,
    /// `[H, W]` metres, every value exactly representable as `f32`.
    pub depth: Tensor,
    /// `[H, W]` binary validity of the depth annotation.
    pub valid: Tensor,
    /// `[H, W]` class ids.
    pub seg: Tensor,
    pub instances: Vec<Instance>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    /// Sparse ground truth view of the sample.
    pub fn ground_truth(&self) -> SparseDepth {
        SparseDepth::new(self.depth.clone(), self.valid.clone()).expect("sample invariants")
    }

    /// Checks the documented invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let bad = |msg: &str| Err(Error::config(msg.to_owned()));
        if self.rgb.shape() != [3, h, w]
            || self.valid.shape() != [h, w]
            || self.seg.shape() != [h, w]
        {
            return bad("inconsistent sample shapes");
        }
        if self.rgb.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
            return bad("rgb outside [0, 255]");
        }
        if self
            .depth
            .data()
            .iter()
            .any(|&d| !(MIN_DEPTH..=MAX_DEPTH).contains(&d))
        {
            return bad("depth outside [1, 100] m");
        }
        if self.valid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return bad("validity mask not binary");
        }
        if self
            .seg
            .data()
            .iter()
            .any(|&l| l.fract() != 0.0 || l < 0.0 || l as usize >= NUM_CLASSES)
        {
            return bad("segmentation label out of range");
        }
        let mut owner = vec![false; h * w];
        for inst in &self.instances {
            if inst.mask.shape() != [h, w] {
                return bad("instance mask shape");
            }
            for (o, &m) in owner.iter_mut().zip(inst.mask.data()) {
                if m != 0.0 && m != 1.0 {
                    return bad("instance mask not binary");
                }
                if m == 1.0 {
                    if *o {
                        return bad("instance masks overlap");
                    }
                    *o = true;
                }
            }
        }
        Ok(())
    }
}

/// Parameters of [`generate_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_depth: f64,
    pub max_object_depth: f64,
    /// Fraction of pixels with a depth annotation.
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 5,
            min_object_depth: 5.0,
            max_object_depth: 50.0,
            sparsity: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::config("image size must be a multiple of 4, at least 8"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::config("sparsity must lie in (0, 1]"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&self.min_object_depth)
            || !(self.min_object_depth..=MAX_DEPTH).contains(&self.max_object_depth)
        {
            return Err(Error::config("object depth range outside [1, 100] m"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, other: &Rect, gap: usize) -> bool {
        self.left < other.left + other.w + gap
            && other.left < self.left + self.w + gap
            && self.top < other.top + other.h + gap
            && other.top < self.top + self.h + gap
    }
}

fn background_depth(row: usize, height: usize) -> f64 {
    let f = row as f64 / (height - 1) as f64;
    FAR_ROW_DEPTH * (NEAR_ROW_DEPTH / FAR_ROW_DEPTH).powf(f)
}

/// Generates one scene. Deterministic given `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng::stream(cfg.seed, "scene");
    let horizon = (h as f64 * 0.45).round() as usize;

    let mut depth = vec![0.0; h * w];
    let mut seg = vec![0.0; h * w];
    for y in 0..h {
        let d = background_depth(y, h) as f32 as f64;
        let class = if y < horizon { Class::Background } else { Class::Road };
        for x in 0..w {
            depth[y * w + x] = d;
            seg[y * w + x] = class as u8 as f64;
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<(Rect, Class, f64)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < count && attempts < 200 {
        attempts += 1;
        let class = if rng.gen_bool(0.6) { Class::Car } else { Class::Person };
        let (fh, fw) = match class {
            Class::Car => (rng.gen_range(0.18..0.30), rng.gen_range(0.24..0.40)),
            _ => (rng.gen_range(0.30..0.42), rng.gen_range(0.16..0.24)),
        };
        let oh = ((fh * h as f64).round() as usize).max(3);
        let ow = ((fw * w as f64).round() as usize).max(3);
        // Objects stand on the road: their bottom edge lies below the horizon.
        let bottom_min = (horizon + 2).max(oh);
        let bottom = rng.gen_range(bottom_min..=h);
        let rect = Rect {
            top: bottom - oh,
            left: rng.gen_range(0..=w - ow),
            h: oh,
            w: ow,
        };
        let d = rng.gen_range(cfg.min_object_depth..=cfg.max_object_depth) as f32 as f64;
        if placed.iter().any(|(r, _, _)| r.overlaps(&rect, 1)) {
            continue;
        }
        placed.push((rect, class, d));
    }

    let mut instances = Vec::with_capacity(placed.len());
    for (rect, class, d) in &placed {
        let mut mask = vec![0.0; h * w];
        let (cy, cx) = (
            rect.top as f64 + rect.h as f64 / 2.0,
            rect.left as f64 + rect.w as f64 / 2.0,
        );
        let (ry, rx) = (rect.h as f64 / 2.0, rect.w as f64 / 2.0);
        for y in rect.top..rect.top + rect.h {
            for x in rect.left..rect.left + rect.w {
                let inside = match class {
                    Class::Person => {
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        dy * dy + dx * dx <= 1.0
                    }
                    _ => true,
                };
                if inside {
                    let i = y * w + x;
                    mask[i] = 1.0;
                    depth[i] = *d;
                    seg[i] = *class as u8 as f64;
                }
            }
        }
        instances.push(Instance {
            class: *class,
            mask: Tensor::new(vec![h, w], mask)?,
        });
    }

    let mut rgb = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let base = depth_to_intensity(depth[i]);
        let tint = Class::from_id(seg[i] as u8).expect("valid label").tint();
        for c in 0..3 {
            let noise = rng.gen_range(-NOISE..=NOISE) as f64;
            rgb[c * h * w + i] = (base + tint[c] + noise).round().clamp(0.0, 255.0);
        }
    }

    let depth = Tensor::new(vec![h, w], depth)?;
    let valid = sparsify(&depth, cfg.sparsity, rng::derive_seed(cfg.seed, "sparsify"))?.valid;
    Ok(Sample {
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        depth,
        valid,
        seg: Tensor::new(vec![h, w], seg)?,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let cfg = SceneConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let other = SceneConfig { seed: 12, ..cfg.clone() };
        assert_ne!(generate_scene(&cfg).unwrap().rgb, generate_scene(&other).unwrap().rgb);
    }

    #[test]
    fn scenes_satisfy_invariants() {
        for seed in 0..50 {
            let s = generate_scene(&SceneConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            s.validate().unwrap();
            assert!((2..=5).contains(&s.instances.len()), "seed {seed}");
            for inst in &s.instances {
                let n = inst.mask.sum();
                assert!(n > 0.0);
                let mean: f64 = inst
                    .mask
                    .data()
                    .iter()
                    .zip(s.depth.data())
                    .map(|(m, d)| m * d)
                    .sum::<f64>()
                    / n;
                assert!((5.0..=50.0).contains(&mean), "mean depth {mean}");
            }
            for &d in s.depth.data() {
                assert_eq!(d as f32 as f64, d);
            }
        }
    }

    #[test]
    fn far_at_top() {
        let s = generate_scene(&SceneConfig::default()).unwrap();
        assert_eq!(s.depth.data()[0], 100.0);
        assert!(background_depth(63, 64) < 2.0 + 1e-9);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SceneConfig {
            sparsity: 0.0,
            ..Default::default()
        };
        assert!(generate_scene(&cfg).is_err());
        let cfg = SceneConfig {
            height: 30,
            ..Default::default()
        };
        assert!(generate_scene(&cfg).is_err());
    }
}
