//! Small parameterized building blocks shared by the policies.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Uniform `[-bound, bound]` initialization.
pub fn uniform<F: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| F::lit(rng.gen_range(-bound..=bound)))
}

/// Affine map `x·W + b` applied to each row of an `m×in` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weights drawn from `U(-g/√in, g/√in)` with gain `g`, zero bias.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = gain / (inputs as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[inputs, outputs], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }
}

/// Valid strided convolution with per-filter bias and ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * spec.kernel * spec.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let kernels = store.add(
            format!("{name}.kernels"),
            uniform(&[spec.filters, in_channels, spec.kernel, spec.kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([spec.filters]));
        ConvLayer {
            kernels,
            bias,
            filters: spec.filters,
            kernel: spec.kernel,
            stride: spec.stride,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k, self.stride)?;
        let y = tape.channel_bias(y, b)?;
        tape.relu(y)
    }
}

/// Filters, kernel size and stride of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Per-token layer normalization parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm_rows(x, g, b)
    }
}
