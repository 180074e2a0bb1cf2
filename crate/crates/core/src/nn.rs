//! Small layer primitives shared by the extractor, embedding, and classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    /// No nonlinearity.
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> Result<Tensor> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..=a)).collect())
}

/// Something that owns named parameter tensors and can place them on a tape.
///
/// `params`, `params_mut`, and `Bound::vars` must enumerate tensors in the
/// same order.
pub trait Module {
    type Bound: BoundVars;

    /// Binds every parameter, in `params` order, to the handle returned by
    /// `leaf`.
    fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> Self::Bound;

    fn bind(&self, tape: &mut Tape, tracked: bool) -> Self::Bound {
        self.bind_with(&mut |t| tape.leaf(t.clone(), tracked))
    }

    /// Binds to pre-registered leaves listed in `params` order.
    fn bind_to(&self, leaves: &[Var]) -> Self::Bound {
        let mut it = leaves.iter();
        self.bind_with(&mut |_| *it.next().expect("one leaf per parameter"))
    }

    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

pub trait BoundVars {
    fn vars(&self) -> Vec<Var>;
}

impl BoundVars for Vec<Var> {
    fn vars(&self) -> Vec<Var> {
        self.clone()
    }
}

/// Affine map `x·W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl BoundVars for DenseVars {
    fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Result<Self> {
        Ok(Dense {
            weight: glorot_uniform(rng, input, output, &[input, output])?,
            bias: Tensor::zeros([output])?,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([_, o], [b]) if o == b => Ok(Dense { weight, bias }),
            (w, b) => Err(Error::dim("dense", w, b)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params_named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }
}

impl Module for Dense {
    type Bound = DenseVars;

    fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> DenseVars {
        DenseVars {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        self.params_named("dense")
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_bias(xw, self.bias)
    }
}
