//! Imbalanced synthetic chip datasets with one parametric shape per class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Chip, ChipDataset, ChipSource};
use crate::error::{Error, Result};
use crate::seed::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub total: usize,
    /// Class `c` gets a share proportional to `(c + 1)^-imbalance_exponent`.
    pub imbalance_exponent: f64,
    pub side: usize,
    /// Standard deviation of per-pixel Gaussian noise, in 8-bit levels.
    pub noise: f64,
    /// Give each class its own foreground hue. When false every instance
    /// draws a random hue, so only shape identifies the class.
    pub class_colors: bool,
    /// Maximum per-instance deviation of the foreground colour, in 8-bit levels.
    pub color_jitter: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            total: 5000,
            imbalance_exponent: exponent_for_ratio(8, 100.0),
            side: 32,
            noise: 24.0,
            class_colors: false,
            color_jitter: 60.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Exponent giving a largest:smallest class ratio of `ratio` over `classes`.
pub fn exponent_for_ratio(classes: usize, ratio: f64) -> f64 {
    if classes < 2 {
        0.0
    } else {
        ratio.ln() / (classes as f64).ln()
    }
}

impl SynthConfig {
    /// Per-class instance counts: the power law scaled to `total`, rounded
    /// by largest remainder so the counts sum exactly to `total`.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if !self.imbalance_exponent.is_finite() || self.imbalance_exponent < 0.0 {
            return Err(Error::Config(
                "imbalance_exponent must be finite and >= 0".into(),
            ));
        }
        let weights: Vec<f64> = (0..self.num_classes)
            .map(|c| ((c + 1) as f64).powf(-self.imbalance_exponent))
            .collect();
        let wsum: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights
            .iter()
            .map(|w| w / wsum * self.total as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..self.num_classes).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let short = self.total - counts.iter().sum::<usize>();
        for &c in order.iter().take(short) {
            counts[c] += 1;
        }
        if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
            return Err(Error::Config(format!(
                "class {c} would receive {n} instances; every class needs at least 2"
            )));
        }
        Ok(counts)
    }

    fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::Config("side must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config("noise and color_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Shape family and variant drawn for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Ellipse,
    Rectangle,
    Frame,
    Plus,
    Triangle,
    Ring,
    ThinRing,
    Stripes,
    WideStripes,
}

const SHAPES: [Shape; 10] = [
    Shape::Disk,
    Shape::Rectangle,
    Shape::Plus,
    Shape::Ring,
    Shape::Stripes,
    Shape::Ellipse,
    Shape::Frame,
    Shape::Triangle,
    Shape::ThinRing,
    Shape::WideStripes,
];

impl Shape {
    /// Membership test in shape-local coordinates scaled to `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        let in_box = |a: f64, b: f64| u.abs() <= a && v.abs() <= b;
        match self {
            Shape::Disk => r <= 0.85,
            Shape::Ellipse => (u / 0.95).powi(2) + (v / 0.45).powi(2) <= 1.0,
            Shape::Rectangle => in_box(0.9, 0.55),
            Shape::Frame => in_box(0.85, 0.85) && !in_box(0.5, 0.5),
            Shape::Plus => in_box(0.25, 0.95) || in_box(0.95, 0.25),
            Shape::Triangle => v <= 0.5 && v >= 1.732 * u.abs() - 0.95,
            Shape::Ring => (0.5..=0.95).contains(&r),
            Shape::ThinRing => (0.75..=0.95).contains(&r),
            Shape::Stripes => in_box(0.95, 0.95) && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
            Shape::WideStripes => in_box(0.95, 0.95) && ((u + 1.0) * 1.5).floor() as i64 % 2 == 0,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let rgb = match i as i64 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|x| x * 255.0)
}

fn class_color(class: usize, classes: usize) -> [f64; 3] {
    // Alternate value so neighbouring hues also differ in brightness.
    let v = if class.is_multiple_of(2) { 0.95 } else { 0.7 };
    hsv_to_rgb(class as f64 / classes as f64, 0.85, v)
}

/// Largest deviation from a right angle, in radians.
const MAX_TILT: f64 = 0.2;

fn render(cfg: &SynthConfig, class: usize, seed: u64) -> Chip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.side;
    let shape = SHAPES[class % SHAPES.len()];
    let base = if cfg.class_colors {
        class_color(class, cfg.num_classes)
    } else {
        hsv_to_rgb(
            rng.random_range(0.0..1.0),
            0.6,
            rng.random_range(0.75..0.95),
        )
    };
    let fg = base.map(|c| c + rng.random_range(-1.0..=1.0) * cfg.color_jitter);
    let bg: [f64; 3] = {
        let level = rng.random_range(30.0..100.0);
        [0; 3].map(|_| level + rng.random_range(-25.0..25.0))
    };
    let half = n as f64 / 2.0;
    let scale = half * rng.random_range(0.65..0.85);
    let cx = half + rng.random_range(-0.15..0.15) * n as f64;
    let cy = half + rng.random_range(-0.15..0.15) * n as f64;
    // Right-angle orientations plus a small tilt; the right angles are what
    // rotation augmentation already covers.
    let theta = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2
        + rng.random_range(-MAX_TILT..MAX_TILT);
    let (sin, cos) = theta.sin_cos();
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std");

    let mut px = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / scale, (y as f64 + 0.5 - cy) / scale);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let color = if shape.contains(u, v) { fg } else { bg };
            for c in color {
                let e = if cfg.noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                px.push((c + e).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Chip::new(n, px, class).expect("rendered buffer matches side")
}

/// Renders a seeded dataset. Every class is split into train and test with
/// `test_fraction` of its instances (at least one each) held out.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<ChipDataset> {
    cfg.validate()?;
    let counts = cfg.class_counts()?;
    let mut jobs = Vec::with_capacity(cfg.total);
    for (class, &count) in counts.iter().enumerate() {
        let n_test = ((count as f64 * cfg.test_fraction).round() as usize).clamp(1, count - 1);
        for i in 0..count {
            jobs.push((class, i, i >= count - n_test));
        }
    }
    let chips: Vec<(Chip, bool)> =
        jobs.par_iter()
            .map(|&(class, i, test)| {
                let chip = render(cfg, class, mix(cfg.seed, &[class as u64, i as u64]))
                    .with_source(ChipSource {
                        image: format!("synthetic/class{class}/{i}"),
                        bbox: [0, 0, cfg.side as i64, cfg.side as i64],
                    });
                (chip, test)
            })
            .collect();
    let (test, train): (Vec<_>, Vec<_>) = chips.into_iter().partition(|(_, t)| *t);
    Ok(ChipDataset {
        class_names: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        train: train.into_iter().map(|(c, _)| c).collect(),
        test: test.into_iter().map(|(c, _)| c).collect(),
    })
}
