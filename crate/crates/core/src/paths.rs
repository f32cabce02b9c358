//! Path counting over relation masks and the relation-reduction loss.
//!
//! With layer masks `M^1..M^L` and aggregation mask `M^out`, the number of
//! unmasked input→output paths (residual edges included) is
//! `|M^out (M^L + I)…(M^1 + I)|`. Its maximum over all masks is
//! `μ = n (n+1)^L`.

use crate::attention::{MaskSet, MaskVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PathMatrix<F> {
    /// Cumulative `(M^L+I)…(M^1+I)`, `n×n`.
    pub a: Tensor<F>,
    /// `M^out · A`, `1×n`.
    pub a_out: Tensor<F>,
    pub total: f64,
    pub mu: f64,
}

impl<F: Scalar> PathMatrix<F> {
    pub fn fraction(&self) -> f64 {
        self.total / self.mu
    }
}

/// `n (n+1)^L`.
pub fn max_paths(n: usize, layers: usize) -> f64 {
    n as f64 * ((n + 1) as f64).powi(layers as i32)
}

pub fn path_matrix<F: Scalar>(layers: &[Tensor<F>], output: &Tensor<F>) -> Result<PathMatrix<F>> {
    let n = match output.shape() {
        [1, n] => *n,
        s => return Err(Error::shape("path_matrix output mask", s, &[1, s.last().copied().unwrap_or(0)])),
    };
    let mut a = Tensor::<F>::eye(n);
    for m in layers {
        if m.shape() != [n, n] {
            return Err(Error::shape("path_matrix", m.shape(), &[n, n]));
        }
        let step = Tensor::new([n, n], m.data().iter().zip(Tensor::<F>::eye(n).data()).map(|(&x, &i)| x + i).collect())?;
        a = step.matmul(&a)?;
    }
    let a_out = output.matmul(&a)?;
    let total = a_out.data().iter().map(|v| v.as_f64()).sum();
    Ok(PathMatrix {
        a,
        a_out,
        total,
        mu: max_paths(n, layers.len()),
    })
}

/// Path matrix of the hard masks of one forward pass.
pub fn path_matrix_of<F: Scalar>(masks: &MaskSet<F>) -> Result<PathMatrix<F>> {
    path_matrix(&masks.hard_layers(), &masks.output.hard)
}

/// `(α − total/μ)²`.
pub fn mask_loss<F: Scalar>(pm: &PathMatrix<F>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((alpha - pm.fraction()).powi(2))
}

/// Batch mean of [`mask_loss`].
pub fn mask_loss_batch<F: Scalar>(pms: &[PathMatrix<F>], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if pms.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pms.iter().map(|p| (alpha - p.fraction()).powi(2)).sum();
    Ok(s / pms.len() as f64)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Token `i` can influence the output iff `A_out_i > 0`.
pub fn effective_input_relevance<F: Scalar>(pm: &PathMatrix<F>) -> Vec<bool> {
    pm.a_out.data().iter().map(|&v| v > F::zero()).collect()
}

/// Differentiable `|A^out|` on the tape from the mask nodes of a forward pass.
pub fn path_total_var<F: Scalar>(tape: &mut Tape<F>, masks: &MaskVars) -> Result<Var> {
    let n = tape.shape(masks.output)[1];
    let eye = tape.leaf(Tensor::eye(n));
    let mut a = eye;
    for &m in &masks.layers {
        let step = tape.add(m, eye)?;
        a = tape.matmul(step, a)?;
    }
    let a_out = tape.matmul(masks.output, a)?;
    tape.sum(a_out)
}

/// `(α − total/μ)²` on the tape.
pub fn mask_loss_var<F: Scalar>(tape: &mut Tape<F>, total: Var, mu: f64, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if !(mu > 0.0) {
        return Err(Error::config(format!("path maximum must be positive, got {mu}")));
    }
    let frac = tape.scale(total, F::lit(1.0 / mu))?;
    let target = tape.scalar(F::lit(alpha));
    let d = tape.sub(target, frac)?;
    tape.square(d)
}
