//! Per-mode relation graphs: cosine-similarity KNN selection and the
//! self-loop, symmetrically normalized adjacency that feeds the GCN.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

fn row_norms<T: Scalar>(features: &Matrix<T>) -> Vec<T> {
    (0..features.rows())
        .map(|i| dot(features.row(i), features.row(i)).sqrt())
        .collect()
}

#[inline]
fn cosine<T: Scalar>(features: &Matrix<T>, norms: &[T], i: usize, j: usize) -> T {
    if i == j {
        return T::one();
    }
    let denom = norms[i] * norms[j];
    if denom == T::zero() {
        return T::zero();
    }
    dot(features.row(i), features.row(j)) / denom
}

/// Dense pairwise cosine similarity between rows. Zero rows are similar
/// only to themselves.
pub fn cosine_similarity<T: Scalar>(features: &Matrix<T>) -> Matrix<T> {
    let norms = row_norms(features);
    let n = features.rows();
    Matrix::from_fn(n, n, |i, j| cosine(features, &norms, i.min(j), i.max(j)))
}

/// Undirected KNN graph without self-edges. Edges are keyed `(lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph<T> {
    node_count: usize,
    k: usize,
    edges: BTreeMap<(usize, usize), T>,
}

impl<T: Scalar> KnnGraph<T> {
    /// A graph from explicit undirected edges. Self-edges, out-of-range
    /// endpoints, and negative or non-finite weights are rejected.
    pub fn from_edges(node_count: usize, edges: impl IntoIterator<Item = (usize, usize, T)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, j, w) in edges {
            if i == j || i >= node_count || j >= node_count {
                return Err(Error::InvalidArgument(format!(
                    "invalid edge ({i}, {j}) for {node_count} nodes"
                )));
            }
            if !(w >= T::zero() && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid edge weight {w}")));
            }
            map.insert((i.min(j), i.max(j)), w);
        }
        Ok(Self {
            node_count,
            k: 0,
            edges: map,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Effective neighbor count after clamping to `node_count - 1`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.edges.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<T> {
        self.edges.get(&(i.min(j), i.max(j))).copied()
    }

    /// Dense adjacency without self-loops.
    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.node_count, self.node_count);
        for (i, j, w) in self.edges() {
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
        m
    }
}

/// The `k` largest off-diagonal entries of one similarity row, ties broken
/// toward the lower node index.
fn top_k<T: Scalar>(node: usize, k: usize, similarity_to: impl Fn(usize) -> T, n: usize) -> Vec<usize> {
    let mut candidates: Vec<(usize, T)> = (0..n).filter(|&j| j != node).map(|j| (j, similarity_to(j))).collect();
    let order = |a: &(usize, T), b: &(usize, T)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or_else(|| a.1.is_nan().cmp(&b.1.is_nan()))
            .then(a.0.cmp(&b.0))
    };
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(order);
    candidates.into_iter().map(|(j, _)| j).collect()
}

fn assemble<T: Scalar>(
    n: usize,
    k: usize,
    weighted: bool,
    selections: Vec<Vec<usize>>,
    similarity: impl Fn(usize, usize) -> T,
) -> KnnGraph<T> {
    let mut edges = BTreeMap::new();
    for (i, picks) in selections.into_iter().enumerate() {
        for j in picks {
            let key = (i.min(j), i.max(j));
            edges.entry(key).or_insert_with(|| {
                if weighted {
                    similarity(key.0, key.1).max(T::zero())
                } else {
                    T::one()
                }
            });
        }
    }
    KnnGraph {
        node_count: n,
        k,
        edges,
    }
}

/// KNN graph from a dense similarity matrix. Each node picks its `k` most
/// similar peers and an edge is kept when either endpoint picked the other.
/// `k` is clamped to `node_count - 1`.
pub fn build_knn_graph<T: Scalar>(similarity: &Matrix<T>, k: usize, weighted: bool) -> Result<KnnGraph<T>> {
    let (n, cols) = similarity.shape();
    if n != cols {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix must be square, got {n}x{cols}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let k = k.min(n.saturating_sub(1));
    let selections = (0..n).map(|i| top_k(i, k, |j| similarity[(i, j)], n)).collect();
    Ok(assemble(n, k, weighted, selections, |i, j| similarity[(i, j)]))
}

/// Same graph as `build_knn_graph(&cosine_similarity(features), ..)` without
/// materializing the dense similarity matrix.
pub fn knn_graph_from_features<T: Scalar>(
    features: &Matrix<T>,
    k: usize,
    weighted: bool,
    parallel: bool,
) -> Result<KnnGraph<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let n = features.rows();
    let k = k.min(n.saturating_sub(1));
    let norms = row_norms(features);
    let sim = |i: usize, j: usize| cosine(features, &norms, i.min(j), i.max(j));
    let select = |i: usize| top_k(i, k, |j| sim(i, j), n);
    let selections: Vec<Vec<usize>> = if parallel {
        (0..n).into_par_iter().map(select).collect()
    } else {
        (0..n).map(select).collect()
    };
    Ok(assemble(n, k, weighted, selections, sim))
}

/// `D̃^{-1/2} (R + I) D̃^{-1/2}` in compressed-row form, columns ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency<T> {
    node_count: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> NormalizedAdjacency<T> {
    pub fn identity(n: usize) -> Self {
        Self {
            node_count: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// Wraps an arbitrary square matrix, keeping its nonzero pattern. Meant
    /// for tests and hand-built propagation operators.
    pub fn from_dense(matrix: &Matrix<T>) -> Result<Self> {
        let (n, cols) = matrix.shape();
        if n != cols {
            return Err(Error::ShapeMismatch(format!(
                "adjacency must be square, got {n}x{cols}"
            )));
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            for (j, &v) in matrix.row(i).iter().enumerate() {
                if v != T::zero() {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            node_count: n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(p) => self.values[span.start + p],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.node_count, self.node_count);
        for i in 0..self.node_count {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `R̂ · H`
    pub fn propagate(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        if features.rows() != self.node_count {
            return Err(Error::ShapeMismatch(format!(
                "adjacency over {} nodes applied to {} feature rows",
                self.node_count,
                features.rows()
            )));
        }
        let cols = features.cols();
        let mut out = Matrix::zeros(self.node_count, cols);
        for i in 0..self.node_count {
            for (j, a) in self.row(i) {
                let src = features.row(j);
                for (o, &h) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * h;
                }
            }
        }
        Ok(out)
    }

    /// `R̂ᵀ · G`. Equal to [`propagate`](Self::propagate) for the symmetric
    /// operators built by [`normalize_adjacency`].
    pub fn propagate_transpose(&self, grads: &Matrix<T>) -> Result<Matrix<T>> {
        if grads.rows() != self.node_count {
            return Err(Error::ShapeMismatch(format!(
                "adjacency over {} nodes applied to {} gradient rows",
                self.node_count,
                grads.rows()
            )));
        }
        let mut out = Matrix::zeros(self.node_count, grads.cols());
        for i in 0..self.node_count {
            for (j, a) in self.row(i) {
                let src = grads.row(i);
                for (o, &g) in out.row_mut(j).iter_mut().zip(src) {
                    *o += a * g;
                }
            }
        }
        Ok(out)
    }

    /// Largest `|A[i][j] - A[j][i]|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.node_count {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Adds self-loops and applies symmetric degree normalization.
pub fn normalize_adjacency<T: Scalar>(graph: &KnnGraph<T>) -> NormalizedAdjacency<T> {
    let n = graph.node_count();
    let mut neighbors: Vec<Vec<(usize, T)>> = (0..n).map(|i| vec![(i, T::one())]).collect();
    for (i, j, w) in graph.edges() {
        neighbors[i].push((j, w));
        neighbors[j].push((i, w));
    }
    let degree: Vec<T> = neighbors.iter().map(|row| row.iter().map(|&(_, w)| w).sum()).collect();

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (i, row) in neighbors.iter_mut().enumerate() {
        row.sort_unstable_by_key(|&(j, _)| j);
        for &(j, w) in row.iter() {
            col_idx.push(j);
            values.push(w / (degree[i] * degree[j]).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    NormalizedAdjacency {
        node_count: n,
        row_ptr,
        col_idx,
        values,
    }
}

/// Per-node neighbor sets chosen by the KNN rule, before symmetrization.
/// Exposed so graph-change detection can compare selections directly.
pub fn knn_selections<T: Scalar>(features: &Matrix<T>, k: usize) -> Vec<Vec<usize>> {
    let n = features.rows();
    let k = k.min(n.saturating_sub(1));
    let norms = row_norms(features);
    (0..n)
        .map(|i| {
            let mut picks = top_k(i, k, |j| cosine(features, &norms, i.min(j), i.max(j)), n);
            picks.sort_unstable();
            picks
        })
        .collect()
}
