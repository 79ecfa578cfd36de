//! Expected accuracy of guessing classes at random from the training-set
//! class frequencies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the `N` guesses of a top-`N` prediction are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessModel {
    /// `N` independent draws with replacement: `hit = 1 − (1 − q)^N`.
    #[default]
    Independent,
    /// `N` distinct classes, each drawn in proportion to `q` among the
    /// classes not yet drawn.
    WithoutReplacement,
}

/// Expected top-`N` accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub top_n: usize,
    pub instance_averaged: f64,
    pub class_averaged: f64,
    /// Per-class hit probability in percent.
    pub per_class: Vec<f64>,
}

/// Guess distribution `q` = training frequencies. Instance averaging weights
/// each class's hit probability by its test share; class averaging uses
/// `1/C` weights.
pub fn random_baseline(
    train: &[u64],
    test: &[u64],
    top_n: usize,
    model: GuessModel,
) -> Result<BaselineScores> {
    if train.len() != test.len() || train.is_empty() {
        return Err(Error::Invalid(format!(
            "{} train counts and {} test counts",
            train.len(),
            test.len()
        )));
    }
    if top_n == 0 {
        return Err(Error::Invalid("top-N needs N >= 1".into()));
    }
    let train_total: u64 = train.iter().sum();
    let test_total: u64 = test.iter().sum();
    if train_total == 0 || test_total == 0 {
        return Err(Error::Invalid(
            "population counts must have a positive sum".into(),
        ));
    }
    let q: Vec<f64> = train
        .iter()
        .map(|&c| c as f64 / train_total as f64)
        .collect();
    let hits = match model {
        GuessModel::Independent => q
            .iter()
            .map(|&qc| 1.0 - (1.0 - qc).powi(top_n as i32))
            .collect(),
        GuessModel::WithoutReplacement => successive_hits(&q, top_n),
    };
    let instance: f64 = hits
        .iter()
        .zip(test)
        .map(|(h, &t)| h * t as f64 / test_total as f64)
        .sum();
    let class = hits.iter().sum::<f64>() / hits.len() as f64;
    Ok(BaselineScores {
        top_n,
        instance_averaged: 100.0 * instance,
        class_averaged: 100.0 * class,
        per_class: hits.iter().map(|h| 100.0 * h).collect(),
    })
}

/// Points per unit of `ln t` in the quadrature below.
const LOG_GRID_DENSITY: f64 = 200.0;

/// Probability that each class is among the first `n` of a successive
/// sample drawn in proportion to `q`.
///
/// Successive sampling is equivalent to ordering independent exponential
/// clocks `T_j ~ Exp(q_j)`, so
/// `P(c in first n) = ∫ q_c e^{−q_c t} P(#{j ≠ c : T_j < t} ≤ n − 1) dt`.
/// The count probability is a Poisson-binomial tail evaluated by dynamic
/// programming; the integral is taken on a uniform grid in `ln t`.
fn successive_hits(q: &[f64], n: usize) -> Vec<f64> {
    let support = q.iter().filter(|&&x| x > 0.0).count();
    if n >= support {
        return q.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
    }
    let qmax = q.iter().copied().fold(0.0, f64::max);
    let qmin = q
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    let lo = (1e-8 / qmax).ln();
    let hi = (60.0 / qmin).ln();
    let steps = ((hi - lo) * LOG_GRID_DENSITY).ceil() as usize;
    let h = (hi - lo) / steps as f64;

    q.iter()
        .enumerate()
        .map(|(c, &qc)| {
            if qc == 0.0 {
                return 0.0;
            }
            let mut total = 0.0;
            let mut dist = vec![0.0; n];
            for s in 0..=steps {
                let t = (lo + s as f64 * h).exp();
                let f = at_most(q, c, t, &mut dist);
                let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
                // dt = t d(ln t)
                total += w * qc * (-qc * t).exp() * f * t;
            }
            (total * h).clamp(0.0, 1.0)
        })
        .collect()
}

/// `P(#{j ≠ skip : T_j < t} ≤ dist.len() − 1)` with `P(T_j < t) = 1 − e^{−q_j t}`.
fn at_most(q: &[f64], skip: usize, t: f64, dist: &mut [f64]) -> f64 {
    dist.fill(0.0);
    dist[0] = 1.0;
    for (j, &qj) in q.iter().enumerate() {
        if j == skip || qj == 0.0 {
            continue;
        }
        let p = -(-qj * t).exp_m1();
        for k in (1..dist.len()).rev() {
            dist[k] = dist[k] * (1.0 - p) + dist[k - 1] * p;
        }
        dist[0] *= 1.0 - p;
    }
    dist.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PopulationTable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_class_is_certain() {
        for model in [GuessModel::Independent, GuessModel::WithoutReplacement] {
            let s = random_baseline(&[10], &[3], 1, model).unwrap();
            assert_eq!((s.instance_averaged, s.class_averaged), (100.0, 100.0));
        }
    }

    #[test]
    fn building_class() {
        let t = PopulationTable::xview();
        let s1 = random_baseline(
            &t.train_counts(),
            &t.test_counts(),
            1,
            GuessModel::Independent,
        )
        .unwrap();
        let s5 = random_baseline(
            &t.train_counts(),
            &t.test_counts(),
            5,
            GuessModel::Independent,
        )
        .unwrap();
        assert!((s1.per_class[0] - 52.15).abs() < 0.01);
        assert!((s5.per_class[0] - 97.5).abs() < 0.05);
    }

    #[test]
    fn uniform_top1_class_average_is_one_over_c() {
        let s = random_baseline(&[5, 1, 9, 2], &[1, 1, 1, 1], 1, GuessModel::Independent).unwrap();
        assert!((s.class_averaged - 25.0).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_draws_without_replacement_always_hit() {
        let s = random_baseline(&[5, 1, 9], &[1, 2, 3], 3, GuessModel::WithoutReplacement).unwrap();
        assert_eq!(s.instance_averaged, 100.0);
    }

    #[test]
    fn successive_sampling_closed_form_for_two_draws() {
        // P(c in first 2) = q_c + Σ_{j≠c} q_j · q_c / (1 − q_j)
        let q = [0.5, 0.3, 0.15, 0.05];
        let hits = successive_hits(&q, 2);
        for c in 0..4 {
            let exact: f64 = q[c]
                + (0..4)
                    .filter(|&j| j != c)
                    .map(|j| q[j] * q[c] / (1.0 - q[j]))
                    .sum::<f64>();
            assert!(
                (hits[c] - exact).abs() < 1e-6,
                "{c}: {} vs {exact}",
                hits[c]
            );
        }
    }

    #[test]
    fn successive_hits_sum_to_draw_count() {
        let t = PopulationTable::xview();
        let total: u64 = t.train_counts().iter().sum();
        let q: Vec<f64> = t
            .train_counts()
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        let hits = successive_hits(&q, 5);
        assert!((hits.iter().sum::<f64>() - 5.0).abs() < 1e-4);
    }

    #[test]
    fn successive_sampling_matches_simulation() {
        let q = [0.6, 0.2, 0.1, 0.05, 0.03, 0.02];
        let hits = successive_hits(&q, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 200_000;
        let mut seen = [0usize; 6];
        for _ in 0..trials {
            let mut w = q.to_vec();
            for _ in 0..3 {
                let total: f64 = w.iter().sum();
                let mut r = rng.random_range(0.0..total);
                let pick = w.iter().position(|&x| {
                    r -= x;
                    r < 0.0
                });
                let pick = pick.unwrap_or(5);
                seen[pick] += 1;
                w[pick] = 0.0;
            }
        }
        for c in 0..6 {
            let p = seen[c] as f64 / trials as f64;
            assert!((p - hits[c]).abs() < 0.005, "{c}: {p} vs {}", hits[c]);
        }
    }
}
