//! First-order optimizers over a fixed list of parameter matrices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// First and second moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Matrix<T>,
    pub second: Matrix<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(param: &Matrix<T>) -> Self {
        Self {
            first: Matrix::zeros(param.rows(), param.cols()),
            second: Matrix::zeros(param.rows(), param.cols()),
        }
    }
}

/// One Adam update with bias correction; `step` is the 1-based global step.
pub fn adam_step<T: Scalar>(
    params: &mut Matrix<T>,
    grads: &Matrix<T>,
    moments: &mut Moments<T>,
    learning_rate: T,
    step: usize,
) -> Result<()> {
    if params.shape() != grads.shape()
        || params.shape() != moments.first.shape()
        || params.shape() != moments.second.shape()
    {
        return Err(Error::ShapeMismatch(format!(
            "adam: params {:?}, grads {:?}, moments {:?}",
            params.shape(),
            grads.shape(),
            moments.first.shape()
        )));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adam step count starts at 1".into()));
    }
    let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPSILON));
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let correction1 = T::one() - b1.powi(t);
    let correction2 = T::one() - b2.powi(t);
    let p = params.as_mut_slice();
    let m = moments.first.as_mut_slice();
    let v = moments.second.as_mut_slice();
    for (((p, &g), m), v) in p.iter_mut().zip(grads.as_slice()).zip(m).zip(v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub fn sgd_step<T: Scalar>(params: &mut Matrix<T>, grads: &Matrix<T>, learning_rate: T) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::ShapeMismatch(format!(
            "sgd: params {:?}, grads {:?}",
            params.shape(),
            grads.shape()
        )));
    }
    for (p, &g) in params.as_mut_slice().iter_mut().zip(grads.as_slice()) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Optimizer state for an ordered list of parameter matrices. The caller
/// passes parameters and gradients in the same order on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: T,
    step: usize,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new<'a>(kind: OptimizerKind, learning_rate: T, params: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => params.into_iter().map(Moments::zeros_like).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind,
            learning_rate,
            step: 0,
            moments,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    pub fn step(&mut self, params: Vec<&mut Matrix<T>>, grads: &[Matrix<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.kind == OptimizerKind::Adam && params.len() != self.moments.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Adam => adam_step(p, g, &mut self.moments[i], self.learning_rate, self.step)?,
                OptimizerKind::Sgd => sgd_step(p, g, self.learning_rate)?,
            }
        }
        Ok(())
    }
}
