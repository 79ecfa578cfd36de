//! Non-parametric softmax over the memory bank, its exact negative
//! log-likelihood, and the noise-contrastive approximation.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ufl_autodiff::{Real, Tape, Tensor, Var};

use crate::bank::{check_unit, MemoryBank};
use crate::error::{Error, Result};
use crate::models::softmax;
use crate::seed::mix;

/// `P(i|v)` for every bank row `i`, with max-logit subtraction.
pub fn nonparam_probs(bank: &MemoryBank, v: &[Real]) -> Result<Vec<f64>> {
    if v.len() != bank.dim() {
        return Err(Error::Invalid(format!(
            "query of length {} for a bank of dimension {}",
            v.len(),
            bank.dim()
        )));
    }
    check_unit(v)?;
    let logits: Vec<f64> = bank.similarities(v).iter().map(|s| s / bank.tau).collect();
    Ok(softmax(&logits))
}

/// `P(i|v) = exp(v_iᵀv/τ) / Σ_j exp(v_jᵀv/τ)`.
pub fn nonparam_prob(bank: &MemoryBank, v: &[Real], i: usize) -> Result<f64> {
    if i >= bank.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: bank.len(),
        });
    }
    Ok(nonparam_probs(bank, v)?[i])
}

/// The softmax denominator `Σ_j exp(v_jᵀv/τ)`.
pub fn exact_denominator(bank: &MemoryBank, v: &[Real]) -> f64 {
    bank.similarities(v)
        .iter()
        .map(|s| (s / bank.tau).exp())
        .sum()
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= n) {
        Some(&index) => Err(Error::IndexOutOfRange { index, len: n }),
        None => Ok(()),
    }
}

/// `−Σ_b log P(i_b | v_b)` over a batch of embeddings `v: [B, d]`.
///
/// `bank` is the `[n, d]` bank recorded as a constant.
pub fn ufl_loss_exact(
    tape: &mut Tape,
    bank: Var,
    v: Var,
    indices: &[usize],
    tau: f64,
) -> Result<Var> {
    check_indices(indices, tape.value(bank).shape()[0])?;
    let logits = tape.linear(bank, None, v)?;
    let logits = tape.scalar_mul(logits, (1.0 / tau) as Real);
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, indices)?;
    let total = tape.sum(picked);
    Ok(tape.neg(total))
}

/// Monte Carlo estimate of the softmax denominator.
///
/// Each query `queries[q]` gets its own `sample_count` bank rows drawn
/// without replacement; its estimate is `n · mean exp(v_jᵀv/τ)` and the
/// result is the mean over queries. Sampling every row is exact.
pub fn estimate_z(
    bank: &MemoryBank,
    queries: &Tensor,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    if sample_count == 0 {
        return Err(Error::Config("sample_count must be at least 1".into()));
    }
    let [q, d] = queries.shape() else {
        return Err(Error::Invalid(format!(
            "queries must be [q, d], got {:?}",
            queries.shape()
        )));
    };
    if *d != bank.dim() || *q == 0 {
        return Err(Error::Invalid(format!(
            "{q} queries of dimension {d} for a bank of dimension {}",
            bank.dim()
        )));
    }
    let n = bank.len();
    let m = sample_count.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for qi in 0..*q {
        let v = queries.row(qi);
        let sum: f64 = if m == n {
            exact_denominator(bank, v)
        } else {
            index::sample(&mut rng, n, m)
                .iter()
                .map(|j| (crate::bank::dot(bank.row(j), v) / bank.tau).exp())
                .sum::<f64>()
                * (n as f64 / m as f64)
        };
        total += sum;
    }
    Ok(total / *q as f64)
}

/// Settings of the noise-contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NceConfig {
    /// Noise draws `m` per positive.
    pub noise_samples: usize,
    /// The fixed normalizer; `None` until estimated.
    pub z: Option<f64>,
    /// Number of initial batches whose queries feed the estimate of `z`.
    pub z_batches: usize,
    /// Bank rows sampled per query when estimating `z`.
    pub z_samples: usize,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            noise_samples: 64,
            z: None,
            z_batches: 2,
            z_samples: 1024,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_samples == 0 {
            return Err(Error::Config("noise_samples must be at least 1".into()));
        }
        if self.z_batches == 0 || self.z_samples == 0 {
            return Err(Error::Config(
                "z_batches and z_samples must be at least 1".into(),
            ));
        }
        if let Some(z) = self.z {
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::Config(format!("z must be positive, got {z}")));
            }
        }
        Ok(())
    }
}

/// Uniform noise indices, `per_row` for each of `rows` positives.
pub fn draw_noise(n: usize, rows: usize, per_row: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[0x6e6f697365]));
    (0..rows * per_row)
        .map(|_| rng.random_range(0..n))
        .collect()
}

/// NCE loss summed over the batch, with uniform noise `P_n = 1/n`.
///
/// With `P̃(i|v) = exp(v_iᵀv/τ)/z` and `h = P̃/(P̃ + m·P_n)`, each positive
/// contributes `−log h(i, v) − Σ_noise log(1 − h(j, v))`. Written in log
/// space: `h = σ(a)` with `a = v_iᵀv/τ − ln(z·m/n)`, so the terms are
/// `softplus(−a_pos)` and `softplus(a_noise)`.
pub fn nce_loss(
    tape: &mut Tape,
    bank: Var,
    v: Var,
    indices: &[usize],
    noise: &[usize],
    cfg: &NceConfig,
    tau: f64,
) -> Result<Var> {
    let z = cfg.z.ok_or(Error::UninitializedZ)?;
    let m = cfg.noise_samples;
    let n = tape.value(bank).shape()[0];
    check_indices(indices, n)?;
    check_indices(noise, n)?;
    if noise.len() != indices.len() * m {
        return Err(Error::Invalid(format!(
            "{} noise indices for {} positives with m = {m}",
            noise.len(),
            indices.len()
        )));
    }
    let offset = -(z * m as f64 / n as f64).ln();
    let inv_tau = (1.0 / tau) as Real;

    let pos = tape.gather_dot(v, bank, indices, 1)?;
    let pos = tape.scalar_mul(pos, -inv_tau);
    let pos = tape.add_scalar(pos, -offset as Real);
    let pos = tape.softplus(pos);
    let pos = tape.sum(pos);

    let neg = tape.gather_dot(v, bank, noise, m)?;
    let neg = tape.scalar_mul(neg, inv_tau);
    let neg = tape.add_scalar(neg, offset as Real);
    let neg = tape.softplus(neg);
    let neg = tape.sum(neg);
    Ok(tape.add(pos, neg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::init_bank;
    use proptest::prelude::*;

    fn bank_of<const D: usize>(rows: &[[Real; D]], tau: f64) -> MemoryBank {
        let d = D;
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        MemoryBank::from_embeddings(&Tensor::new(vec![rows.len(), d], data).unwrap())
            .unwrap()
            .with_tau(tau)
            .unwrap()
    }

    #[test]
    fn two_orthogonal_rows() {
        let b = bank_of(&[[1.0, 0.0], [0.0, 1.0]], 0.07);
        let p = nonparam_prob(&b, &[1.0, 0.0], 0).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
        assert!((p - expected).abs() < 1e-12);
        assert!((1.0 - p - 6.2e-7).abs() < 0.1e-7);

        let b = b.with_tau(1.0).unwrap();
        let p = nonparam_prob(&b, &[1.0, 0.0], 0).unwrap();
        assert!((p - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn identical_rows_are_uniform() {
        let b = bank_of(&[[0.6, 0.8]; 5], 0.07);
        for p in nonparam_probs(&b, &[0.6, 0.8]).unwrap() {
            assert!((p - 0.2).abs() < 1e-12);
        }
        assert!(matches!(
            nonparam_probs(&b, &[1.0, 1.0]),
            Err(Error::NotUnitNorm { .. })
        ));
    }

    fn exact_loss(bank: &MemoryBank, queries: &Tensor, idx: &[usize]) -> Real {
        let mut tape = Tape::new();
        let bv = tape.constant(bank.to_tensor());
        let q = tape.param(queries.clone());
        let l = ufl_loss_exact(&mut tape, bv, q, idx, bank.tau).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn exact_loss_degenerate_cases() {
        let b = bank_of(&[[0.0, 1.0]], 0.07);
        let q = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(exact_loss(&b, &q, &[0]), 0.0);

        let b = bank_of(&[[0.6, 0.8]; 4], 0.07);
        let q = Tensor::new(vec![3, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
        let l = exact_loss(&b, &q, &[0, 2, 3]);
        assert!((l - 3.0 * 4f64.ln() as Real).abs() < 1e-9);

        let mut tape = Tape::new();
        let bv = tape.constant(b.to_tensor());
        let qv = tape.param(q);
        assert!(matches!(
            ufl_loss_exact(&mut tape, bv, qv, &[4, 0, 0], 0.07),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn exact_loss_matches_probabilities() {
        let b = init_bank(50, 8, 1).unwrap();
        let q = init_bank(3, 8, 2).unwrap().to_tensor();
        let idx = [4, 17, 49];
        let direct: f64 = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| -nonparam_prob(&b, q.row(r), i).unwrap().ln())
            .sum();
        assert!((exact_loss(&b, &q, &idx) as f64 - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn z_for_identical_rows_is_exact_at_any_sample() {
        let b = bank_of(&[[1.0, 0.0]; 10], 0.07);
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let expected = 10.0 * (1.0f64 / 0.07).exp();
        for s in [1, 3, 10] {
            let z = estimate_z(&b, &q, s, 9).unwrap();
            assert!((z / expected - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exhaustive_z_is_exact() {
        let b = init_bank(300, 16, 4).unwrap();
        let q = init_bank(5, 16, 5).unwrap().to_tensor();
        let exact: f64 = (0..5).map(|i| exact_denominator(&b, q.row(i))).sum::<f64>() / 5.0;
        let z = estimate_z(&b, &q, 300, 0).unwrap();
        assert!((z / exact - 1.0).abs() < 1e-6);
    }

    fn nce_value(
        bank: &MemoryBank,
        v: &Tensor,
        idx: &[usize],
        noise: &[usize],
        cfg: &NceConfig,
    ) -> f64 {
        let mut tape = Tape::new();
        let bv = tape.constant(bank.to_tensor());
        let q = tape.param(v.clone());
        let l = nce_loss(&mut tape, bv, q, idx, noise, cfg, bank.tau).unwrap();
        tape.value(l).item().unwrap() as f64
    }

    #[test]
    fn nce_balanced_sites() {
        // Every row equals the query; choose z so that P̃ = m·P_n everywhere.
        let (n, m) = (6, 4);
        let b = bank_of(&vec![[1.0, 0.0]; n], 0.07);
        let cfg = NceConfig {
            noise_samples: m,
            z: Some((1.0f64 / 0.07).exp() * n as f64 / m as f64),
            ..Default::default()
        };
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = nce_value(&b, &q, &[2], &[0, 1, 5, 5], &cfg);
        assert!((loss - (1.0 + m as f64) * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nce_single_noise_two_rows() {
        // m = 1, n = 2, P̃(i|v) = 0.5 = m·P_n, so h = 0.5 at the positive.
        let b = bank_of(&[[1.0, 0.0], [1.0, 0.0]], 1.0);
        let cfg = NceConfig {
            noise_samples: 1,
            z: Some(2.0 * 1f64.exp()),
            ..Default::default()
        };
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let total = nce_value(&b, &q, &[0], &[1], &cfg);
        assert!((total - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_requires_z() {
        let b = init_bank(4, 2, 0).unwrap();
        let mut tape = Tape::new();
        let bv = tape.constant(b.to_tensor());
        let q = tape.param(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let cfg = NceConfig::default();
        let noise = draw_noise(4, 1, cfg.noise_samples, 0);
        assert!(matches!(
            nce_loss(&mut tape, bv, q, &[0], &noise, &cfg, 0.07),
            Err(Error::UninitializedZ)
        ));
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(n in 1usize..300, d in 2usize..12, seed in any::<u64>()) {
            let b = init_bank(n, d, seed).unwrap();
            let q = init_bank(1, d, seed ^ 1).unwrap().to_tensor();
            let s: f64 = nonparam_probs(&b, q.row(0)).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn rotation_invariance(seed in any::<u64>(), angle in 0.0f64..6.3) {
            let b = init_bank(20, 2, seed).unwrap();
            let q = init_bank(1, 2, seed ^ 7).unwrap().to_tensor();
            let (s, c) = angle.sin_cos();
            let rot = |x: &[f64]| vec![(c * x[0] - s * x[1]) as Real, (s * x[0] + c * x[1]) as Real];
            let rows: Vec<Real> = b.rows().flat_map(|r| rot(&[r[0] as f64, r[1] as f64])).collect();
            let rb = MemoryBank::from_embeddings(&Tensor::new(vec![20, 2], rows).unwrap()).unwrap();
            let rq = rot(&[q.row(0)[0] as f64, q.row(0)[1] as f64]);
            let p = nonparam_probs(&b, q.row(0)).unwrap();
            let rp = nonparam_probs(&rb, &rq).unwrap();
            for (a, b) in p.iter().zip(rp) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
