//! Central finite-difference verification of recorded backward rules.
//!
//! The checker only ever runs forward passes to build its numerical
//! estimate, so it stays independent of the backward code it audits.
//! Meaningful tolerances need the `f64` feature.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Real;

/// Outcome of comparing analytic and numerical gradients for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub input: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both vanish.
    pub rel_error: Real,
}

/// Compares `backward` against central differences with step `step` for
/// every element of every input.
///
/// `build` receives the input vars in order and must return a scalar loss.
/// It is called once with differentiable inputs and then twice per element
/// with perturbed constants.
pub fn check_gradients<F>(inputs: &[Tensor], step: Real, build: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.collect(&tape, &vars);

    let eval = |perturbed: &[Tensor]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut out = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[e];
            work[idx].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = analytic[idx].data();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<Real>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<Real>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<Real>().sqrt();
        let scale = na.max(nn);
        let rel_error = if scale == 0.0 { diff } else { diff / scale };
        out.push(GradCheck {
            input: idx,
            rel_error,
        });
    }
    Ok(out)
}
