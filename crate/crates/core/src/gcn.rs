//! Per-mode graph convolutional stack `H ← σ(R̂ H W)` with exact reverse-mode
//! gradients for both the weights and the input features.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`, given the activated value `out`.
    /// The relu derivative at exactly zero is taken as 0.
    pub fn derivative<T: Scalar>(self, z: T, out: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - out * out,
            Activation::Identity => T::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// Weight matrices `W⁽ˡ⁾ ∈ ℝ^{d_l × d_{l+1}}` plus activations. Hidden layers
/// use `activation`; the last layer uses `final_activation`. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnStack<T> {
    weights: Vec<Matrix<T>>,
    activation: Activation,
    final_activation: Activation,
}

impl<T: Scalar> GcnStack<T> {
    pub fn new(weights: Vec<Matrix<T>>, activation: Activation, final_activation: Activation) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("a GCN stack needs at least one layer".into()));
        }
        for (l, pair) in weights.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} outputs {} features, layer {} expects {}",
                    pair[0].cols(),
                    l + 1,
                    pair[1].rows()
                )));
            }
        }
        let d_in = weights[0].rows();
        let d_out = weights[weights.len() - 1].cols();
        if d_in != d_out {
            return Err(Error::ShapeMismatch(format!(
                "stack maps {d_in} features to {d_out}; refined factors must keep the rank"
            )));
        }
        Ok(Self {
            weights,
            activation,
            final_activation,
        })
    }

    /// Single layer with `W = I` and identity activations.
    pub fn identity(rank: usize) -> Self {
        Self {
            weights: vec![Matrix::identity(rank)],
            activation: Activation::Identity,
            final_activation: Activation::Identity,
        }
    }

    pub fn with_final_activation(mut self, act: Activation) -> Self {
        self.final_activation = act;
        self
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn rank(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn final_activation(&self) -> Activation {
        self.final_activation
    }

    fn layer_activation(&self, l: usize) -> Activation {
        if l + 1 == self.weights.len() {
            self.final_activation
        } else {
            self.activation
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.weights.iter().map(|w| w.rows()).collect();
        dims.push(self.weights[self.weights.len() - 1].cols());
        dims
    }
}

/// Glorot-uniform weights for `layer_dims = [R, d_1, ..., R]`. The final
/// layer's activation is identity; change it with
/// [`GcnStack::with_final_activation`].
pub fn init_stack<T: Scalar>(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<GcnStack<T>> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer dims {layer_dims:?} describe no layer"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer dims {layer_dims:?} contain a zero width"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = layer_dims
        .windows(2)
        .map(|d| {
            let s = (6.0 / (d[0] + d[1]) as f64).sqrt();
            Matrix::from_fn(d[0], d[1], |_, _| T::of(rng.random_range(-s..=s)))
        })
        .collect();
    GcnStack::new(weights, activation, Activation::Identity)
}

/// Intermediates of one forward pass, consumed by [`gcn_backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape<'a, T> {
    adjacency: &'a NormalizedAdjacency<T>,
    /// `H⁽⁰⁾ … H⁽ᴸ⁾`
    activations: Vec<Matrix<T>>,
    /// `R̂ H⁽ˡ⁾`
    aggregated: Vec<Matrix<T>>,
    /// `Z⁽ˡ⁾ = R̂ H⁽ˡ⁾ W⁽ˡ⁾`
    pre_activations: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardTape<'_, T> {
    pub fn depth(&self) -> usize {
        self.pre_activations.len()
    }

    pub fn input(&self) -> &Matrix<T> {
        &self.activations[0]
    }

    pub fn output(&self) -> &Matrix<T> {
        &self.activations[self.activations.len() - 1]
    }

    pub fn pre_activation(&self, l: usize) -> &Matrix<T> {
        &self.pre_activations[l]
    }
}

/// Runs the stack on `features`, returning the refined factor and the tape.
pub fn gcn_forward<'a, T: Scalar>(
    stack: &GcnStack<T>,
    features: &Matrix<T>,
    adjacency: &'a NormalizedAdjacency<T>,
) -> Result<(Matrix<T>, ForwardTape<'a, T>)> {
    if features.rows() != adjacency.node_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for an adjacency over {} nodes",
            features.rows(),
            adjacency.node_count()
        )));
    }
    if features.cols() != stack.rank() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature columns for a stack with input width {}",
            features.cols(),
            stack.rank()
        )));
    }
    let depth = stack.depth();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut aggregated = Vec::with_capacity(depth);
    let mut pre_activations = Vec::with_capacity(depth);
    activations.push(features.clone());
    for (l, w) in stack.weights.iter().enumerate() {
        let act = stack.layer_activation(l);
        let p = adjacency.propagate(&activations[l])?;
        let z = p.matmul(w)?;
        let h = z.map(|v| act.apply(v));
        aggregated.push(p);
        pre_activations.push(z);
        activations.push(h);
    }
    let refined = activations[depth].clone();
    Ok((
        refined,
        ForwardTape {
            adjacency,
            activations,
            aggregated,
            pre_activations,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnGradients<T> {
    /// `∂L/∂W⁽ˡ⁾`, one per layer.
    pub weights: Vec<Matrix<T>>,
    /// `∂L/∂H⁽⁰⁾`
    pub input: Matrix<T>,
}

/// Reverse pass: given `∂L/∂H⁽ᴸ⁾`, returns gradients for every weight matrix
/// and for the input features.
pub fn gcn_backward<T: Scalar>(
    stack: &GcnStack<T>,
    tape: &ForwardTape<'_, T>,
    output_grad: &Matrix<T>,
) -> Result<GcnGradients<T>> {
    if tape.depth() != stack.depth() {
        return Err(Error::ShapeMismatch(format!(
            "tape depth {} for a stack of depth {}",
            tape.depth(),
            stack.depth()
        )));
    }
    if output_grad.shape() != tape.output().shape() {
        return Err(Error::ShapeMismatch(format!(
            "output gradient {:?} for output {:?}",
            output_grad.shape(),
            tape.output().shape()
        )));
    }
    let mut weight_grads = vec![Matrix::zeros(0, 0); stack.depth()];
    let mut g = output_grad.clone();
    for l in (0..stack.depth()).rev() {
        let act = stack.layer_activation(l);
        let z = &tape.pre_activations[l];
        let h = &tape.activations[l + 1];
        for ((gv, &zv), &hv) in g.as_mut_slice().iter_mut().zip(z.as_slice()).zip(h.as_slice()) {
            *gv *= act.derivative(zv, hv);
        }
        weight_grads[l] = tape.aggregated[l].transpose_matmul(&g)?;
        g = tape
            .adjacency
            .propagate_transpose(&g.matmul_transpose(&stack.weights[l])?)?;
    }
    Ok(GcnGradients {
        weights: weight_grads,
        input: g,
    })
}
