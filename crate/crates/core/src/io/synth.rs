//! Synthetic shapes: colored rectangles, discs and triangles on a gray
//! background, painted in order so later shapes cover earlier ones.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pnm::Image8;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: usize,
    pub num_classes: usize,
    pub count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Standard deviation of per-pixel Gaussian noise, in 8-bit units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 4,
            count: 200,
            min_shapes: 1,
            max_shapes: 5,
            kinds: vec![ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Triangle],
            noise: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("synthetic data needs 2..=255 classes, got {}", self.num_classes)));
        }
        if self.size < 4 {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!("min_shapes {} > max_shapes {}", self.min_shapes, self.max_shapes)));
        }
        if self.kinds.is_empty() && self.max_shapes > 0 {
            return Err(Error::Config("no shape kinds".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

/// Base color of a foreground class: hues spread evenly around the wheel.
pub fn class_color(class: usize, num_classes: usize) -> [u8; 3] {
    let hue = (class - 1) as f64 / (num_classes - 1) as f64 * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (hi, lo) = (230.0, 30.0);
    let up = lo + (hi - lo) * f;
    let down = hi - (hi - lo) * f;
    let rgb = match sector {
        0 => [hi, up, lo],
        1 => [down, hi, lo],
        2 => [lo, hi, up],
        3 => [lo, down, hi],
        4 => [up, lo, hi],
        _ => [hi, lo, down],
    };
    rgb.map(|v| v as u8)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: Image8,
    pub labels: Image8,
}

fn inside(kind: ShapeKind, p: [f64; 6], x: f64, y: f64) -> bool {
    match kind {
        ShapeKind::Rect => x >= p[0] && x < p[2] && y >= p[1] && y < p[3],
        ShapeKind::Disc => (x - p[0]).powi(2) + (y - p[1]).powi(2) <= p[2] * p[2],
        ShapeKind::Triangle => {
            let e = |ax: f64, ay: f64, bx: f64, by: f64| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            let d0 = e(p[0], p[1], p[2], p[3]);
            let d1 = e(p[2], p[3], p[4], p[5]);
            let d2 = e(p[4], p[5], p[0], p[1]);
            (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
        }
    }
}

/// Image `index` of the dataset; depends only on the spec and the index.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let n = spec.size;
    let sz = n as f64;
    let mut labels = vec![0u8; n * n];
    let mut rgb = vec![0f64; n * n * 3];
    let bg: f64 = rng.random_range(40.0..100.0);
    for (i, v) in rgb.iter_mut().enumerate() {
        // faint vertical gradient so the background is not flat
        *v = bg + 20.0 * ((i / 3 / n) as f64 / sz - 0.5);
    }
    let shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    // cycle through a shuffled class list so every foreground class appears
    // once there are enough shapes
    let mut order: Vec<usize> = (1..spec.num_classes).collect();
    order.shuffle(&mut rng);
    for s in 0..shapes {
        let class = order[s % order.len()];
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let extent = rng.random_range(sz / 6.0..sz / 2.5);
        let cx = rng.random_range(0.0..sz);
        let cy = rng.random_range(0.0..sz);
        let p = match kind {
            ShapeKind::Rect => {
                let w = extent * rng.random_range(0.6..1.4);
                let h = extent * rng.random_range(0.6..1.4);
                [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, 0.0, 0.0]
            }
            ShapeKind::Disc => [cx, cy, extent / 2.0, 0.0, 0.0, 0.0],
            ShapeKind::Triangle => {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let mut v = [0.0; 6];
                for k in 0..3 {
                    let t = a + k as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.4..0.4);
                    v[2 * k] = cx + extent * 0.6 * t.cos();
                    v[2 * k + 1] = cy + extent * 0.6 * t.sin();
                }
                v
            }
        };
        let base = class_color(class, spec.num_classes);
        let color: Vec<f64> = base.iter().map(|&c| c as f64 + rng.random_range(-20.0..20.0)).collect();
        for y in 0..n {
            for x in 0..n {
                if inside(kind, p, x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * n + x] = class as u8;
                    rgb[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in rgb.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let data = rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(Sample { image: Image8::new(n, n, 3, data)?, labels: Image8::new(n, n, 1, labels)? })
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `images/NNNNN.ppm`, `labels/NNNNN.pgm` and a manifest listing the
/// pairs, one per line, relative to `dir`.
pub fn generate_dataset(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<()> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::new();
    for i in 0..spec.count {
        let s = generate_sample(spec, i)?;
        let img = format!("images/{i:05}.ppm");
        let lab = format!("labels/{i:05}.pgm");
        s.image.save(dir.join(&img))?;
        s.labels.save(dir.join(&lab))?;
        let _ = writeln!(manifest, "{img} {lab}");
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads every pair listed in a dataset manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(img), Some(lab), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Image(format!("{}:{}: expected `image label`", MANIFEST, n + 1)));
        };
        let image = Image8::load(dir.join(img))?;
        let labels = Image8::load(dir.join(lab))?;
        if image.channels != 3 || labels.channels != 1 || (image.width, image.height) != (labels.width, labels.height) {
            return Err(Error::Image(format!("{}:{}: image and label do not match", MANIFEST, n + 1)));
        }
        out.push(Sample { image, labels });
    }
    Ok(out)
}
