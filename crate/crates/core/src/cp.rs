//! CP factor model, observed-entry squared loss, and its analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::tensor::SparseTensor;

/// One mode's latent representations: `I_n × R`.
pub type FactorMatrix<T> = Matrix<T>;

#[derive(Debug, Clone, PartialEq)]
pub struct CpModel<T> {
    rank: usize,
    factors: Vec<FactorMatrix<T>>,
}

impl<T: Scalar> CpModel<T> {
    pub fn new(factors: Vec<FactorMatrix<T>>) -> Result<Self> {
        let rank = factors.first().map(|f| f.cols()).unwrap_or(0);
        if factors.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a CP model needs at least 2 factors, got {}",
                factors.len()
            )));
        }
        if rank == 0 {
            return Err(Error::InvalidArgument("rank must be positive".into()));
        }
        for (n, f) in factors.iter().enumerate() {
            if f.cols() != rank {
                return Err(Error::ShapeMismatch(format!(
                    "factor {n} has {} columns, model rank is {rank}",
                    f.cols()
                )));
            }
            if f.rows() == 0 {
                return Err(Error::InvalidArgument(format!("factor {n} has no rows")));
            }
            if !f.is_finite() {
                return Err(Error::InvalidArgument(format!("factor {n} has non-finite values")));
            }
        }
        Ok(Self { rank, factors })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_modes(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows()).collect()
    }

    pub fn factors(&self) -> &[FactorMatrix<T>] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [FactorMatrix<T>] {
        &mut self.factors
    }

    pub fn into_factors(self) -> Vec<FactorMatrix<T>> {
        self.factors
    }

    pub fn predict(&self, index: &[usize]) -> Result<T> {
        predict_entry(&self.factors, index)
    }
}

/// Uniform `[-scale, scale]` factors from a seeded generator.
pub fn init_factors<T: Scalar>(shape: &[usize], rank: usize, seed: u64, scale: f64) -> Result<CpModel<T>> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!("zero-size mode in shape {shape:?}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "init scale must be positive, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = shape
        .iter()
        .map(|&rows| Matrix::from_fn(rows, rank, |_, _| T::of(rng.random_range(-scale..=scale))))
        .collect();
    CpModel::new(factors)
}

/// `Σ_r Π_n factors[n][index[n], r]`
pub fn predict_entry<T: Scalar>(factors: &[FactorMatrix<T>], index: &[usize]) -> Result<T> {
    if index.len() != factors.len() {
        return Err(Error::ModeCount {
            expected: factors.len(),
            found: index.len(),
        });
    }
    if factors.iter().zip(index).any(|(f, &i)| i >= f.rows()) {
        return Err(Error::IndexOutOfBounds {
            index: index.to_vec(),
            shape: factors.iter().map(|f| f.rows()).collect(),
        });
    }
    Ok(predict_unchecked(factors, index))
}

#[inline]
pub(crate) fn predict_unchecked<T: Scalar>(factors: &[FactorMatrix<T>], index: &[usize]) -> T {
    let rank = factors[0].cols();
    let mut sum = T::zero();
    for r in 0..rank {
        let mut prod = T::one();
        for (f, &i) in factors.iter().zip(index) {
            prod *= f[(i, r)];
        }
        sum += prod;
    }
    sum
}

pub(crate) fn check_compatible<T: Scalar>(factors: &[FactorMatrix<T>], data: &SparseTensor<T>) -> Result<()> {
    if factors.len() != data.n_modes() {
        return Err(Error::ShapeMismatch(format!(
            "{} factors for a {}-mode tensor",
            factors.len(),
            data.n_modes()
        )));
    }
    let rank = factors.first().map_or(0, |f| f.cols());
    for (n, (f, &d)) in factors.iter().zip(data.shape()).enumerate() {
        if f.rows() != d || f.cols() != rank {
            return Err(Error::ShapeMismatch(format!(
                "factor {n} is {:?}, tensor mode {n} has size {d} (rank {rank})",
                f.shape()
            )));
        }
    }
    Ok(())
}

/// `Σ_{α∈Ω} (x_α − x̂_α)²` over the observed entries of `data`.
pub fn loss_observed<T: Scalar>(factors: &[FactorMatrix<T>], data: &SparseTensor<T>) -> Result<T> {
    check_compatible(factors, data)?;
    Ok(data
        .iter()
        .map(|(index, x)| {
            let e = predict_unchecked(factors, index) - x;
            e * e
        })
        .sum())
}

/// Gradient of [`loss_observed`] with respect to every factor, accumulated
/// entry by entry in storage order.
pub fn grad_cpd<T: Scalar>(factors: &[FactorMatrix<T>], data: &SparseTensor<T>) -> Result<Vec<FactorMatrix<T>>> {
    Ok(loss_and_grad(factors, data)?.1)
}

/// Loss and gradient in one sweep over the observed entries.
pub fn loss_and_grad<T: Scalar>(
    factors: &[FactorMatrix<T>],
    data: &SparseTensor<T>,
) -> Result<(T, Vec<FactorMatrix<T>>)> {
    check_compatible(factors, data)?;
    let mut grads: Vec<_> = factors.iter().map(|f| Matrix::zeros(f.rows(), f.cols())).collect();
    let loss = accumulate(factors, data, 0..data.nnz(), &mut grads);
    Ok((loss, grads))
}

/// Parallel variant of [`loss_and_grad`]. Chunks of entries accumulate into
/// private buffers that are summed afterwards, so results match the
/// sequential path only up to floating-point reassociation.
pub fn loss_and_grad_parallel<T: Scalar>(
    factors: &[FactorMatrix<T>],
    data: &SparseTensor<T>,
) -> Result<(T, Vec<FactorMatrix<T>>)> {
    const CHUNK: usize = 4096;
    check_compatible(factors, data)?;
    let zeros = || -> Vec<FactorMatrix<T>> { factors.iter().map(|f| Matrix::zeros(f.rows(), f.cols())).collect() };
    let chunks = data.nnz().div_ceil(CHUNK);
    let (loss, grads) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut grads = zeros();
            let end = ((c + 1) * CHUNK).min(data.nnz());
            let loss = accumulate(factors, data, c * CHUNK..end, &mut grads);
            (loss, grads)
        })
        .reduce(
            || (T::zero(), zeros()),
            |(la, mut ga), (lb, gb)| {
                for (a, b) in ga.iter_mut().zip(&gb) {
                    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                        *x += y;
                    }
                }
                (la + lb, ga)
            },
        );
    Ok((loss, grads))
}

fn accumulate<T: Scalar>(
    factors: &[FactorMatrix<T>],
    data: &SparseTensor<T>,
    entries: std::ops::Range<usize>,
    grads: &mut [FactorMatrix<T>],
) -> T {
    let rank = factors[0].cols();
    let two = T::of(2.0);
    let mut loss = T::zero();
    for e in entries {
        let index = data.index(e);
        let residual = predict_unchecked(factors, index) - data.value(e);
        loss += residual * residual;
        let scaled = two * residual;
        for (n, g) in grads.iter_mut().enumerate() {
            let row = g.row_mut(index[n]);
            for (r, slot) in row.iter_mut().enumerate().take(rank) {
                let mut others = scaled;
                for (m, (f, &i)) in factors.iter().zip(index).enumerate() {
                    if m != n {
                        others *= f[(i, r)];
                    }
                }
                *slot += others;
            }
        }
    }
    loss
}
