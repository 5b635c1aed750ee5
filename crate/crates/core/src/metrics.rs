//! Normalized reconstruction error.

use serde::{Deserialize, Serialize};

use crate::cp::{check_compatible, predict_unchecked, FactorMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::SparseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub nre: f64,
    pub entry_count: usize,
    pub sum_sq_error: f64,
    pub sum_sq_truth: f64,
}

impl EvalResult {
    fn from_sums<T: Scalar>(sum_sq_error: T, sum_sq_truth: T, entry_count: usize) -> Result<Self> {
        if sum_sq_truth == T::zero() {
            return Err(Error::ZeroTruth);
        }
        Ok(Self {
            nre: (sum_sq_error.sqrt() / sum_sq_truth.sqrt()).as_f64(),
            entry_count,
            sum_sq_error: sum_sq_error.as_f64(),
            sum_sq_truth: sum_sq_truth.as_f64(),
        })
    }
}

/// `√Σ(x − x̂)² / √Σx²` over the observed entries of `truth`, with `x̂`
/// supplied per index by `predict`.
pub fn nre<T: Scalar>(predict: impl Fn(&[usize]) -> T, truth: &SparseTensor<T>) -> Result<EvalResult> {
    if truth.is_empty() {
        return Err(Error::Empty("NRE needs at least one evaluation entry".into()));
    }
    let mut err = T::zero();
    let mut norm = T::zero();
    for (index, x) in truth.iter() {
        let e = x - predict(index);
        err += e * e;
        norm += x * x;
    }
    EvalResult::from_sums(err, norm, truth.nnz())
}

/// NRE of a CP reconstruction. Predictions for all entries are materialized
/// first, then reduced against the truth values.
pub fn nre_batched<T: Scalar>(factors: &[FactorMatrix<T>], truth: &SparseTensor<T>) -> Result<EvalResult> {
    check_compatible(factors, truth)?;
    if truth.is_empty() {
        return Err(Error::Empty("NRE needs at least one evaluation entry".into()));
    }
    let predictions: Vec<T> = (0..truth.nnz())
        .map(|e| predict_unchecked(factors, truth.index(e)))
        .collect();
    let err = truth
        .values()
        .iter()
        .zip(&predictions)
        .map(|(&x, &p)| (x - p) * (x - p))
        .sum();
    EvalResult::from_sums(err, truth.sum_sq(), truth.nnz())
}
