//! Sparse COO tensors: ingestion, serialization, splitting, and synthetic data.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cp::{predict_entry, CpModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Partially observed N-way tensor in coordinate format.
///
/// Indices are stored flat (`n_modes` per entry). Construction validates
/// bounds, uniqueness, and finiteness, so every instance upholds them.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T> {
    shape: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(shape: Vec<usize>, entries: Vec<(Vec<usize>, T)>) -> Result<Self> {
        let mut indices = Vec::with_capacity(entries.len() * shape.len());
        let mut values = Vec::with_capacity(entries.len());
        for (index, value) in entries {
            if index.len() != shape.len() {
                return Err(Error::ModeCount {
                    expected: shape.len(),
                    found: index.len(),
                });
            }
            indices.extend_from_slice(&index);
            values.push(value);
        }
        Self::from_flat(shape, indices, values)
    }

    /// Validating constructor over flat index storage.
    pub fn from_flat(shape: Vec<usize>, indices: Vec<usize>, values: Vec<T>) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.len();
        if indices.len() != values.len() * n {
            return Err(Error::ShapeMismatch(format!(
                "{} index components for {} values of a {n}-mode tensor",
                indices.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(values.len());
        for (e, index) in indices.chunks_exact(n).enumerate() {
            if index.iter().zip(&shape).any(|(&i, &d)| i >= d) {
                return Err(Error::IndexOutOfBounds {
                    index: index.to_vec(),
                    shape: shape.clone(),
                });
            }
            if !seen.insert(index) {
                return Err(Error::DuplicateIndex {
                    line: e + 1,
                    index: index.to_vec(),
                });
            }
            if !values[e].is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite value at index {index:?}")));
            }
        }
        Ok(Self { shape, indices, values })
    }

    /// An empty tensor of the given shape.
    pub fn empty(shape: Vec<usize>) -> Result<Self> {
        Self::from_flat(shape, Vec::new(), Vec::new())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n_modes(&self) -> usize {
        self.shape.len()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, e: usize) -> &[usize] {
        let n = self.shape.len();
        &self.indices[e * n..(e + 1) * n]
    }

    pub fn value(&self, e: usize) -> T {
        self.values[e]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&[usize], T)> + '_ {
        self.indices
            .chunks_exact(self.shape.len())
            .zip(self.values.iter().copied())
    }

    pub fn sum_sq(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }

    /// Entries whose positions are listed in `positions`, in that order.
    fn select(&self, positions: &[usize]) -> Self {
        let mut indices = Vec::with_capacity(positions.len() * self.n_modes());
        let mut values = Vec::with_capacity(positions.len());
        for &p in positions {
            indices.extend_from_slice(self.index(p));
            values.push(self.values[p]);
        }
        Self {
            shape: self.shape.clone(),
            indices,
            values,
        }
    }

    /// Canonical COO text: a `# shape:` header, then one `i j k value` line
    /// per entry in storage order.
    pub fn to_coo_string(&self) -> String {
        let mut out = String::new();
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "# shape: {}", dims.join(" "));
        for (index, value) in self.iter() {
            for i in index {
                let _ = write!(out, "{i} ");
            }
            let _ = writeln!(out, "{}", value.as_f64());
        }
        out
    }

    pub fn write_coo(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_coo_string()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> SparseTensor<U> {
        SparseTensor {
            shape: self.shape.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a tensor needs at least 2 modes, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!("zero-size mode in shape {shape:?}")));
    }
    Ok(())
}

/// Parses COO text: `N` indices then a value per line, `#` comments, and an
/// optional `# shape: d1 .. dN` header. Indices are 0-based.
pub fn parse_coo<T: Scalar>(text: &str, expected_modes: Option<usize>) -> Result<SparseTensor<T>> {
    let mut declared: Option<Vec<usize>> = None;
    let mut modes = expected_modes;
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(dims) = comment.trim_start().strip_prefix("shape:") {
                let shape = dims
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<usize>().map_err(|_| Error::Parse {
                            line: line_no,
                            message: format!("bad shape component {t:?}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                check_modes(&mut modes, shape.len())?;
                declared = Some(shape);
            }
            continue;
        }

        let tokens: Vec<&str> = line.split_whitespace().collect();
        let n = tokens.len() - 1;
        if n == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "expected indices followed by a value".into(),
            });
        }
        match modes {
            Some(m) if m != n => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} fields, found {}", m + 1, tokens.len()),
                })
            }
            _ => check_modes(&mut modes, n)?,
        }
        let index = tokens[..n]
            .iter()
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad index {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let value: f64 = tokens[n].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad value {:?}", tokens[n]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("non-finite value {:?}", tokens[n]),
            });
        }
        if let Some(shape) = &declared {
            if index.iter().zip(shape).any(|(&i, &d)| i >= d) {
                return Err(Error::IndexOutOfBounds {
                    index,
                    shape: shape.clone(),
                });
            }
        }
        if !seen.insert(index.clone()) {
            return Err(Error::DuplicateIndex { line: line_no, index });
        }
        indices.extend_from_slice(&index);
        values.push(T::of(value));
    }

    let shape = match declared {
        Some(shape) => shape,
        None => {
            let n = modes.ok_or_else(|| Error::Empty("no entries and no shape header".into()))?;
            if values.is_empty() {
                return Err(Error::Empty("no entries and no shape header".into()));
            }
            let mut shape = vec![0usize; n];
            for index in indices.chunks_exact(n) {
                for (d, &i) in shape.iter_mut().zip(index) {
                    *d = (*d).max(i + 1);
                }
            }
            shape
        }
    };
    SparseTensor::from_flat(shape, indices, values)
}

fn check_modes(modes: &mut Option<usize>, found: usize) -> Result<()> {
    match *modes {
        Some(expected) if expected != found => Err(Error::ModeCount { expected, found }),
        _ => {
            *modes = Some(found);
            Ok(())
        }
    }
}

pub fn read_coo<T: Scalar>(path: impl AsRef<Path>, expected_modes: Option<usize>) -> Result<SparseTensor<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_coo(&text, expected_modes)
}

/// Train / validation / test partition of one tensor's observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: SparseTensor<T>,
    pub validation: SparseTensor<T>,
    pub test: SparseTensor<T>,
}

/// Part sizes for `count` entries: validation and test are rounded shares,
/// train takes the remainder.
pub fn split_sizes(count: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be finite and non-negative, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("split ratios sum to zero".into()));
    }
    let share = |r: f64| ((r / total) * count as f64).round() as usize;
    let validation = share(ratios[1]).min(count);
    let test = share(ratios[2]).min(count - validation);
    Ok([count - validation - test, validation, test])
}

/// Seeded shuffle of the observed entries followed by a ratio partition.
pub fn split_dataset<T: Scalar>(tensor: &SparseTensor<T>, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit<T>> {
    if tensor.nnz() < 3 {
        return Err(Error::Empty(format!(
            "splitting needs at least 3 entries, tensor has {}",
            tensor.nnz()
        )));
    }
    let [n_train, n_val, _] = split_sizes(tensor.nnz(), ratios)?;

    let mut order: Vec<usize> = (0..tensor.nnz()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (train, rest) = order.split_at_mut(n_train);
    let (validation, test) = rest.split_at_mut(n_val);
    for part in [&mut *train, &mut *validation, &mut *test] {
        part.sort_unstable();
    }
    Ok(DatasetSplit {
        train: tensor.select(train),
        validation: tensor.select(validation),
        test: tensor.select(test),
    })
}

/// Cluster structure for synthetic factor rows: each row is a randomly
/// chosen centroid plus isotropic Gaussian jitter of std `spread`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub spread: f64,
}

/// Samples a low-rank tensor: standard-normal ground-truth factors, then
/// `ceil(density * cells)` distinct cells valued at the CP reconstruction
/// plus Gaussian noise.
pub fn generate_synthetic<T: Scalar>(
    shape: &[usize],
    rank: usize,
    density: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(SparseTensor<T>, CpModel<T>)> {
    generate(shape, rank, None, density, noise_std, seed)
}

/// Like [`generate_synthetic`], but factor rows cluster around shared
/// centroids so each mode carries local similarity structure.
pub fn generate_clustered<T: Scalar>(
    shape: &[usize],
    rank: usize,
    clusters: ClusterSpec,
    density: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(SparseTensor<T>, CpModel<T>)> {
    if clusters.clusters == 0 || !(clusters.spread >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cluster count must be positive and spread non-negative, got {clusters:?}"
        )));
    }
    generate(shape, rank, Some(clusters), density, noise_std, seed)
}

fn generate<T: Scalar>(
    shape: &[usize],
    rank: usize,
    clusters: Option<ClusterSpec>,
    density: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(SparseTensor<T>, CpModel<T>)> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("empty shape".into()));
    }
    validate_shape(shape)?;
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise std must be non-negative, got {noise_std}"
        )));
    }
    let cells = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} overflows")))?;
    let requested = (density * cells as f64).ceil();
    if !(requested >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density {density} selects no entries of {cells} cells"
        )));
    }
    if requested > cells as f64 {
        return Err(Error::InvalidArgument(format!(
            "density {density} requests {requested} entries but the tensor has only {cells} cells"
        )));
    }
    let count = requested as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = shape
        .iter()
        .map(|&rows| match clusters {
            None => Matrix::from_fn(rows, rank, |_, _| T::of(rng.sample(StandardNormal))),
            Some(spec) => clustered_factor(&mut rng, rows, rank, spec),
        })
        .collect();
    let model = CpModel::new(factors)?;

    let mut cells_chosen = rand::seq::index::sample(&mut rng, cells, count).into_vec();
    cells_chosen.sort_unstable();

    let n = shape.len();
    let mut indices = vec![0usize; count * n];
    let mut values = Vec::with_capacity(count);
    for (e, &cell) in cells_chosen.iter().enumerate() {
        let index = &mut indices[e * n..(e + 1) * n];
        let mut rest = cell;
        for m in (0..n).rev() {
            index[m] = rest % shape[m];
            rest /= shape[m];
        }
        let mut value = predict_entry(model.factors(), index)?;
        if noise_std > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            value += T::of(noise_std * z);
        }
        values.push(value);
    }
    let tensor = SparseTensor::from_flat(shape.to_vec(), indices, values)?;
    Ok((tensor, model))
}

fn clustered_factor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, rank: usize, spec: ClusterSpec) -> Matrix<T> {
    let centroids: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| (0..rank).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut out = Matrix::zeros(rows, rank);
    for i in 0..rows {
        let c = rng.random_range(0..spec.clusters);
        for r in 0..rank {
            let jitter: f64 = rng.sample(StandardNormal);
            out[(i, r)] = T::of(centroids[c][r] + spec.spread * jitter);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_infers_shape_from_max_index() {
        let t: SparseTensor<f64> = parse_coo("0 0 0 1.5\n1 2 3 -2.0\n", None).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert_eq!(t.nnz(), 2);
        assert_eq!(t.index(1), &[1, 2, 3]);
        assert_eq!(t.value(1), -2.0);
    }

    #[test]
    fn parse_respects_shape_header() {
        let text = "# shape: 5000 5000 108\n# user business month rating\n12 4999 107 4.0\n0 17 3 2.5\n";
        let t: SparseTensor<f64> = parse_coo(text, Some(3)).unwrap();
        assert_eq!(t.shape(), &[5000, 5000, 108]);
        assert_eq!(t.nnz(), 2);
    }

    #[test]
    fn parse_bbc_news_style_header() {
        let text = "# shape: 100 100 400\r\n3 7 399 2\r\n7 3 0 1\r\n";
        let t: SparseTensor<f32> = parse_coo(text, None).unwrap();
        assert_eq!(t.shape(), &[100, 100, 400]);
        assert_eq!(t.value(0), 2.0);
    }

    #[test]
    fn parse_rejects_duplicates() {
        let err = parse_coo::<f64>("0 0 0 1.0\n0 0 0 1.0\n", None).unwrap_err();
        assert_eq!(
            err,
            Error::DuplicateIndex {
                line: 2,
                index: vec![0, 0, 0]
            }
        );
    }

    #[test]
    fn parse_error_paths() {
        assert!(matches!(
            parse_coo::<f64>("0 0 0 1.0\n0 1 2.0\n", None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_coo::<f64>("0 x 0 1.0\n", None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_coo::<f64>("0 0 0 abc\n", None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_coo::<f64>("# shape: 2 2 2\n0 2 0 1.0\n", None),
            Err(Error::IndexOutOfBounds { .. })
        ));
        assert!(matches!(
            parse_coo::<f64>("0 0 0 1.0\n", Some(4)),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_coo::<f64>("# shape: 3 3\n", Some(3)),
            Err(Error::ModeCount { expected: 3, found: 2 })
        ));
        assert!(matches!(
            parse_coo::<f64>("-1 0 0 1.0\n", None),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_coo::<f64>("0 0 0 NaN\n", None),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_coo::<f64>("3 1.0\n", None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(parse_coo::<f64>("# nothing\n", None), Err(Error::Empty(_))));
    }

    #[test]
    fn header_only_gives_empty_tensor() {
        let t: SparseTensor<f64> = parse_coo("# shape: 3 4 5\n", None).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.shape(), &[3, 4, 5]);
    }

    #[test]
    fn coo_text_round_trips() {
        let t: SparseTensor<f64> = parse_coo(
            "# shape: 4 4 4\n0 0 0 0.1\n3 2 1 -1e-300\n1 1 1 12345.678901234\n",
            None,
        )
        .unwrap();
        let again: SparseTensor<f64> = parse_coo(&t.to_coo_string(), None).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        assert_eq!(split_sizes(10, [8.0, 1.0, 1.0]).unwrap(), [8, 1, 1]);
        assert_eq!(split_sizes(10, [10.0, 0.0, 0.0]).unwrap(), [10, 0, 0]);
        assert_eq!(split_sizes(7, [8.0, 1.0, 1.0]).unwrap(), [5, 1, 1]);
        assert_eq!(split_sizes(3, [0.0, 1.0, 1.0]).unwrap(), [0, 2, 1]);
        assert!(split_sizes(10, [0.0, 0.0, 0.0]).is_err());
        assert!(split_sizes(10, [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn split_of_ten_entries() {
        let (t, _) = generate_synthetic::<f64>(&[5, 5, 5], 1, 0.08, 0.0, 1).unwrap();
        assert_eq!(t.nnz(), 10);
        let s = split_dataset(&t, [8.0, 1.0, 1.0], 7).unwrap();
        assert_eq!((s.train.nnz(), s.validation.nnz(), s.test.nnz()), (8, 1, 1));
        let s = split_dataset(&t, [10.0, 0.0, 0.0], 7).unwrap();
        assert_eq!((s.train.nnz(), s.validation.nnz(), s.test.nnz()), (10, 0, 0));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let (t, _) = generate_synthetic::<f64>(&[10, 10, 10], 2, 0.1, 0.0, 3).unwrap();
        assert_eq!(t.nnz(), 100);
        let a = split_dataset(&t, [8.0, 1.0, 1.0], 11).unwrap();
        let b = split_dataset(&t, [8.0, 1.0, 1.0], 11).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&t, [8.0, 1.0, 1.0], 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_errors() {
        let t = SparseTensor::<f64>::empty(vec![2, 2]).unwrap();
        assert!(matches!(split_dataset(&t, [8.0, 1.0, 1.0], 0), Err(Error::Empty(_))));
        let (t, _) = generate_synthetic::<f64>(&[3, 3], 1, 0.5, 0.0, 0).unwrap();
        assert!(matches!(
            split_dataset(&t, [0.0, 0.0, 0.0], 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rank_one_full_density_matches_outer_product() {
        let (t, model) = generate_synthetic::<f64>(&[4, 4, 4], 1, 1.0, 0.0, 5).unwrap();
        assert_eq!(t.nnz(), 64);
        let [a, b, c] = [&model.factors()[0], &model.factors()[1], &model.factors()[2]];
        for (idx, v) in t.iter() {
            assert_eq!(v, a[(idx[0], 0)] * b[(idx[1], 0)] * c[(idx[2], 0)]);
        }
    }

    #[test]
    fn synthetic_count_and_errors() {
        let (t, _) = generate_synthetic::<f64>(&[10, 10, 10], 3, 0.3, 0.0, 0).unwrap();
        assert_eq!(t.nnz(), 300);
        assert!(generate_synthetic::<f64>(&[4, 4], 1, 1.5, 0.0, 0).is_err());
        assert!(generate_synthetic::<f64>(&[4, 4], 0, 0.5, 0.0, 0).is_err());
        assert!(generate_synthetic::<f64>(&[], 1, 0.5, 0.0, 0).is_err());
        assert!(generate_synthetic::<f64>(&[4, 4], 1, 0.0, 0.0, 0).is_err());
        assert!(generate_synthetic::<f64>(&[4, 0], 1, 0.5, 0.0, 0).is_err());
    }

    #[test]
    fn clustered_rows_stay_near_centroids() {
        let spec = ClusterSpec {
            clusters: 2,
            spread: 0.0,
        };
        let (_, model) = generate_clustered::<f64>(&[12, 6, 5], 3, spec, 0.2, 0.0, 9).unwrap();
        for f in model.factors() {
            let mut distinct: Vec<Vec<u64>> = (0..f.rows())
                .map(|i| f.row(i).iter().map(|v| v.to_bits()).collect())
                .collect();
            distinct.sort();
            distinct.dedup();
            assert!(distinct.len() <= 2);
        }
    }
}
