//! Random flips, right-angle rotations and per-channel brightness jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Chip;

/// Probabilities and strength of each augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Probability of rotating by a uniformly chosen multiple of 90°
    /// (which may be 0°).
    pub rotate_prob: f64,
    pub jitter_prob: f64,
    /// Jitter factors are drawn uniformly from `[1 - s, 1 + s]` per channel.
    pub jitter_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate_prob: 1.0,
            jitter_prob: 0.8,
            jitter_strength: 0.8,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotate_prob: 0.0,
            jitter_prob: 0.0,
            jitter_strength: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.hflip_prob <= 0.0
            && self.vflip_prob <= 0.0
            && self.rotate_prob <= 0.0
            && (self.jitter_prob <= 0.0 || self.jitter_strength == 0.0)
    }
}

/// Applies the configured augmentations in a fixed order: horizontal flip,
/// vertical flip, rotation, jitter.
pub fn augment(chip: &Chip, cfg: &AugmentConfig, seed: u64) -> Chip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = chip.clone();
    if rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0)) {
        out = hflip(&out);
    }
    if rng.random_bool(cfg.vflip_prob.clamp(0.0, 1.0)) {
        out = vflip(&out);
    }
    if rng.random_bool(cfg.rotate_prob.clamp(0.0, 1.0)) {
        for _ in 0..rng.random_range(0..4) {
            out = rotate90_cw(&out);
        }
    }
    if rng.random_bool(cfg.jitter_prob.clamp(0.0, 1.0)) {
        let s = cfg.jitter_strength.abs();
        let factors = [0; 3].map(|_| 1.0 + s * rng.random_range(-1.0..=1.0));
        jitter(&mut out, factors);
    }
    out
}

fn remap(chip: &Chip, src: impl Fn(usize, usize) -> (usize, usize)) -> Chip {
    let n = chip.side();
    let mut out = chip.clone();
    let px = out.pixels_mut();
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = src(x, y);
            let o = (y * n + x) * 3;
            px[o..o + 3].copy_from_slice(&chip.pixel(sx, sy));
        }
    }
    out
}

pub fn hflip(chip: &Chip) -> Chip {
    let n = chip.side();
    remap(chip, |x, y| (n - 1 - x, y))
}

pub fn vflip(chip: &Chip) -> Chip {
    let n = chip.side();
    remap(chip, |x, y| (x, n - 1 - y))
}

/// Quarter turn clockwise: `[[a, b], [c, d]]` becomes `[[c, a], [d, b]]`.
pub fn rotate90_cw(chip: &Chip) -> Chip {
    let n = chip.side();
    remap(chip, |x, y| (y, n - 1 - x))
}

/// Scales each channel by its factor, rounding and clamping to `[0, 255]`.
pub fn jitter(chip: &mut Chip, factors: [f64; 3]) {
    for rgb in chip.pixels_mut().chunks_exact_mut(3) {
        for (v, f) in rgb.iter_mut().zip(factors) {
            *v = (*v as f64 * f).round().clamp(0.0, 255.0) as u8;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(values: &[u8], side: usize) -> Chip {
        let px = values.iter().flat_map(|&v| [v, v, v]).collect();
        Chip::new(side, px, 0).unwrap()
    }

    fn channel0(chip: &Chip) -> Vec<u8> {
        chip.pixels().iter().step_by(3).copied().collect()
    }

    #[test]
    fn quarter_turn_example() {
        let (a, b, c, d) = (1, 2, 3, 4);
        let r = rotate90_cw(&gray(&[a, b, c, d], 2));
        assert_eq!(channel0(&r), vec![c, a, d, b]);
    }

    #[test]
    fn flips() {
        let chip = gray(&[1, 2, 3, 4], 2);
        assert_eq!(channel0(&hflip(&chip)), vec![2, 1, 4, 3]);
        assert_eq!(channel0(&vflip(&chip)), vec![3, 4, 1, 2]);
    }

    #[test]
    fn unit_jitter_is_identity() {
        let chip = gray(&[0, 17, 128, 255], 2);
        let mut j = chip.clone();
        jitter(&mut j, [1.0; 3]);
        assert_eq!(j, chip);
    }

    #[test]
    fn jitter_clamps() {
        let mut chip = gray(&[200, 10, 0, 255], 2);
        jitter(&mut chip, [2.0, 0.5, 1.0]);
        assert_eq!(chip.pixel(0, 0), [255, 100, 200]);
        assert_eq!(chip.pixel(1, 0), [20, 5, 10]);
    }

    #[test]
    fn disabled_config_is_identity() {
        let chip = gray(&(0..9).collect::<Vec<_>>(), 3);
        assert_eq!(augment(&chip, &AugmentConfig::none(), 5), chip);
    }

    fn arb_chip() -> impl Strategy<Value = Chip> {
        (1usize..6).prop_flat_map(|side| {
            proptest::collection::vec(any::<u8>(), side * side * 3)
                .prop_map(move |px| Chip::new(side, px, 0).unwrap())
        })
    }

    proptest! {
        #[test]
        fn four_quarter_turns_are_identity(chip in arb_chip()) {
            let mut r = chip.clone();
            for _ in 0..4 {
                r = rotate90_cw(&r);
            }
            prop_assert_eq!(r, chip);
        }

        #[test]
        fn augment_preserves_shape_and_is_seeded(chip in arb_chip(), seed in any::<u64>()) {
            let cfg = AugmentConfig::default();
            let a = augment(&chip, &cfg, seed);
            prop_assert_eq!(a.side(), chip.side());
            prop_assert_eq!(a.pixels().len(), chip.pixels().len());
            prop_assert_eq!(a, augment(&chip, &cfg, seed));
        }
    }
}
