use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Real;

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// Plain gradient descent: `p ← p − lr·g` for every parameter.
///
/// All gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves `params` unchanged.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: Real) -> Result<()> {
    if grads.len() != params.len() {
        return Err(AutodiffError::InvalidArgument {
            op: "sgd_step",
            reason: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    for (i, (p, g)) in params.tensors.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(AutodiffError::NonFiniteGradient {
                name: params.names[i].clone(),
            });
        }
    }
    for (p, g) in params.tensors.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Elementwise `acc += other` over matching gradient lists.
pub fn accumulate(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.data_mut().iter_mut().zip(o.data()) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: Vec<Real>) -> ParamSet {
        let mut p = ParamSet::new();
        p.push(name, Tensor::vector(v));
        p
    }

    #[test]
    fn step_examples() {
        let mut p = single("w", vec![1.0]);
        sgd_step(&mut p, &[Tensor::vector(vec![2.0])], 0.5).unwrap();
        assert_eq!(p.get(0).data(), &[0.0]);

        let mut p = single("w", vec![1.0, 1.0]);
        sgd_step(&mut p, &[Tensor::vector(vec![1.0, -1.0])], 0.0).unwrap();
        assert_eq!(p.get(0).data(), &[1.0, 1.0]);

        sgd_step(&mut p, &[Tensor::vector(vec![1.0, -1.0])], 0.03).unwrap();
        let d = p.get(0).data();
        assert!((d[0] - 0.97).abs() < 1e-12 && (d[1] - 1.03).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single("conv1.weight", vec![1.0, 2.0]);
        let err = sgd_step(&mut p, &[Tensor::vector(vec![Real::NAN, 0.0])], 0.1).unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
        assert_eq!(p.get(0).data(), &[1.0, 2.0]);
    }
}
