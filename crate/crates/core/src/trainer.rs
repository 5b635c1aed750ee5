//! Full-batch training for plain CPD and for CPD with GCN-refined factors.
//!
//! A TGL epoch pushes every raw factor matrix through its mode's GCN stack,
//! scores the refined factors with the observed-entry squared loss, and
//! backpropagates into both the stack weights and the raw factors. The
//! relation graphs are rebuilt from the raw factors on a fixed epoch
//! schedule and are held constant in between.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::{init_factors, loss_and_grad, loss_and_grad_parallel, CpModel, FactorMatrix};
use crate::error::{Error, Result};
use crate::gcn::{gcn_backward, gcn_forward, init_stack, Activation, GcnGradients, GcnStack};
use crate::graph::{knn_graph_from_features, normalize_adjacency, NormalizedAdjacency};
use crate::linalg::Matrix;
use crate::metrics::{nre_batched, EvalResult};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::SparseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cpd,
    Tgl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cpd => "cpd",
            Method::Tgl => "tgl",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpd" => Ok(Method::Cpd),
            "tgl" => Ok(Method::Tgl),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub rank: usize,
    pub knn_k: usize,
    /// `None` means `[R, 2R, R]`.
    pub layer_dims: Option<Vec<usize>>,
    pub activation: Activation,
    pub final_activation: Activation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub graph_rebuild_period: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub weighted_edges: bool,
    pub factor_init_scale: f64,
    /// Keep GCN weights at their initial values and train only the factors.
    pub freeze_gcn_weights: bool,
    /// For TGL, first fit a plain CPD (same settings, own early stopping)
    /// and start the GCN phase from its best factors.
    pub cpd_warm_start: bool,
    /// Sequential, bit-reproducible arithmetic.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Tgl,
            rank: 8,
            knn_k: 10,
            layer_dims: None,
            activation: Activation::Relu,
            final_activation: Activation::Identity,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-2,
            max_epochs: 2000,
            patience: 200,
            graph_rebuild_period: 1,
            seed: 0,
            split_ratios: [8.0, 1.0, 1.0],
            weighted_edges: false,
            factor_init_scale: 0.1,
            freeze_gcn_weights: false,
            cpd_warm_start: true,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn new(method: Method, rank: usize) -> Self {
        Self {
            method,
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.graph_rebuild_period == 0 {
            return bad("graph rebuild period must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("at least one training epoch is required".into());
        }
        if self.knn_k == 0 {
            return bad("knn k must be at least 1".into());
        }
        if !(self.factor_init_scale > 0.0 && self.factor_init_scale.is_finite()) {
            return bad(format!("init scale must be positive, got {}", self.factor_init_scale));
        }
        if self.method == Method::Tgl {
            self.stack_dims()?;
        }
        Ok(())
    }

    /// Layer widths of every mode's stack.
    pub fn stack_dims(&self) -> Result<Vec<usize>> {
        let dims = self
            .layer_dims
            .clone()
            .unwrap_or_else(|| vec![self.rank, 2 * self.rank, self.rank]);
        if dims.len() < 2 || dims[0] != self.rank || dims[dims.len() - 1] != self.rank {
            return Err(Error::InvalidArgument(format!(
                "layer dims {dims:?} must start and end with the rank {}",
                self.rank
            )));
        }
        Ok(dims)
    }

    fn parallel(&self) -> bool {
        !self.deterministic
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parameters and effective factors at the best validation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub epoch: usize,
    pub validation: EvalResult,
    pub model: CpModel<T>,
    pub stacks: Vec<GcnStack<T>>,
    pub adjacencies: Vec<NormalizedAdjacency<T>>,
    /// Factors entering the reconstruction: refined for TGL, raw for CPD.
    pub effective: Vec<FactorMatrix<T>>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    method: Method,
    model: CpModel<T>,
    stacks: Vec<GcnStack<T>>,
    adjacencies: Vec<NormalizedAdjacency<T>>,
    optimizer: Optimizer<T>,
    train_weights: bool,
    epoch: usize,
    graph_builds: usize,
    best: Option<Snapshot<T>>,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state. For TGL the relation graphs are built immediately from
    /// the initial factors.
    pub fn new(shape: &[usize], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = init_factors(shape, config.rank, config.seed, config.factor_init_scale)?;
        Self::with_model(model, config)
    }

    /// Fresh stacks, graphs and optimizer around existing factors.
    pub fn with_model(model: CpModel<T>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.rank() != config.rank {
            return Err(Error::ShapeMismatch(format!(
                "model rank {} differs from configured rank {}",
                model.rank(),
                config.rank
            )));
        }
        let shape = model.shape();
        let stacks = match config.method {
            Method::Cpd => Vec::new(),
            Method::Tgl => {
                let dims = config.stack_dims()?;
                (0..shape.len())
                    .map(|n| {
                        init_stack(&dims, config.activation, stream_seed(config.seed, n as u64 + 1))
                            .map(|s| s.with_final_activation(config.final_activation))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let adjacencies = match config.method {
            Method::Cpd => Vec::new(),
            Method::Tgl => shape.iter().map(|&n| NormalizedAdjacency::identity(n)).collect(),
        };
        let mut state = Self::from_parts(model, stacks, adjacencies, config)?;
        if config.method == Method::Tgl {
            rebuild_graphs(&mut state, config)?;
        }
        Ok(state)
    }

    /// State from explicit components, with fresh optimizer moments. A CPD
    /// state takes no stacks or adjacencies; a TGL state takes one of each
    /// per mode.
    pub fn from_parts(
        model: CpModel<T>,
        stacks: Vec<GcnStack<T>>,
        adjacencies: Vec<NormalizedAdjacency<T>>,
        config: &TrainConfig,
    ) -> Result<Self> {
        let shape = model.shape();
        match config.method {
            Method::Cpd => {
                if !stacks.is_empty() || !adjacencies.is_empty() {
                    return Err(Error::InvalidArgument("a CPD state has no GCN stacks or graphs".into()));
                }
            }
            Method::Tgl => {
                if stacks.len() != shape.len() || adjacencies.len() != shape.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} modes need one stack and one adjacency each, got {} and {}",
                        shape.len(),
                        stacks.len(),
                        adjacencies.len()
                    )));
                }
                for (n, ((s, a), &rows)) in stacks.iter().zip(&adjacencies).zip(&shape).enumerate() {
                    if s.rank() != model.rank() {
                        return Err(Error::ShapeMismatch(format!(
                            "stack {n} has input width {}, model rank is {}",
                            s.rank(),
                            model.rank()
                        )));
                    }
                    if a.node_count() != rows {
                        return Err(Error::ShapeMismatch(format!(
                            "adjacency {n} covers {} nodes, mode has {rows}",
                            a.node_count()
                        )));
                    }
                }
            }
        }
        let train_weights = config.method == Method::Tgl && !config.freeze_gcn_weights;
        let weights = stacks.iter().flat_map(|s| s.weights()).filter(|_| train_weights);
        let optimizer = Optimizer::new(
            config.optimizer,
            T::of(config.learning_rate),
            model.factors().iter().chain(weights),
        );
        Ok(Self {
            method: config.method,
            model,
            stacks,
            adjacencies,
            optimizer,
            train_weights,
            epoch: 0,
            graph_builds: 0,
            best: None,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn model(&self) -> &CpModel<T> {
        &self.model
    }

    pub fn stacks(&self) -> &[GcnStack<T>] {
        &self.stacks
    }

    pub fn adjacencies(&self) -> &[NormalizedAdjacency<T>] {
        &self.adjacencies
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Number of times the relation graphs have been (re)built.
    pub fn graph_builds(&self) -> usize {
        self.graph_builds
    }

    pub fn best(&self) -> Option<&Snapshot<T>> {
        self.best.as_ref()
    }

    /// Factors that enter the reconstruction under the current parameters.
    pub fn effective_factors(&self, parallel: bool) -> Result<Vec<FactorMatrix<T>>> {
        match self.method {
            Method::Cpd => Ok(self.model.factors().to_vec()),
            Method::Tgl => {
                let refine = |n: usize| {
                    gcn_forward(&self.stacks[n], &self.model.factors()[n], &self.adjacencies[n]).map(|(out, _)| out)
                };
                if parallel {
                    (0..self.stacks.len()).into_par_iter().map(refine).collect()
                } else {
                    (0..self.stacks.len()).map(refine).collect()
                }
            }
        }
    }

    /// Records a snapshot if `validation` strictly beats the best so far.
    /// Returns whether it did.
    pub fn offer_snapshot(&mut self, validation: EvalResult, effective: Vec<FactorMatrix<T>>) -> bool {
        if self.best.as_ref().is_some_and(|b| validation.nre >= b.validation.nre) {
            return false;
        }
        self.best = Some(Snapshot {
            epoch: self.epoch,
            validation,
            model: self.model.clone(),
            stacks: self.stacks.clone(),
            adjacencies: self.adjacencies.clone(),
            effective,
        });
        true
    }

    fn require(&self, method: Method) -> Result<()> {
        if self.method != method {
            return Err(Error::InvalidArgument(format!(
                "{method} epoch requested on a {} state",
                self.method
            )));
        }
        Ok(())
    }

    fn check_data(&self, data: &SparseTensor<T>) -> Result<()> {
        if data.shape() != self.model.shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "model shape {:?}, data shape {:?}",
                self.model.shape(),
                data.shape()
            )));
        }
        Ok(())
    }

    fn apply_step(&mut self, grads: &[Matrix<T>]) -> Result<()> {
        let train_weights = self.train_weights;
        let weights = self
            .stacks
            .iter_mut()
            .flat_map(|s| s.weights_mut().iter_mut())
            .filter(|_| train_weights);
        let params: Vec<&mut Matrix<T>> = self.model.factors_mut().iter_mut().chain(weights).collect();
        self.optimizer.step(params, grads)?;
        self.epoch += 1;
        let finite = self.model.factors().iter().all(|f| f.is_finite())
            && self.stacks.iter().all(|s| s.weights().iter().all(|w| w.is_finite()));
        if !finite {
            return Err(Error::Diverged {
                epoch: self.epoch,
                loss: f64::NAN,
            });
        }
        Ok(())
    }
}

fn checked_loss<T: Scalar>(loss: T, epoch: usize) -> Result<T> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged {
            epoch,
            loss: loss.as_f64(),
        })
    }
}

/// One full-batch CPD step on the raw factors. Returns the pre-step loss.
pub fn train_epoch_cpd<T: Scalar>(
    state: &mut TrainState<T>,
    train: &SparseTensor<T>,
    config: &TrainConfig,
) -> Result<T> {
    state.require(Method::Cpd)?;
    state.check_data(train)?;
    let (loss, grads) = if config.parallel() {
        loss_and_grad_parallel(state.model.factors(), train)?
    } else {
        loss_and_grad(state.model.factors(), train)?
    };
    let loss = checked_loss(loss, state.epoch + 1)?;
    state.apply_step(&grads)?;
    Ok(loss)
}

/// One joint step over raw factors and GCN weights. Returns the pre-step
/// loss of the refined-factor reconstruction.
pub fn train_epoch_tgl<T: Scalar>(
    state: &mut TrainState<T>,
    train: &SparseTensor<T>,
    config: &TrainConfig,
) -> Result<T> {
    state.require(Method::Tgl)?;
    state.check_data(train)?;
    let parallel = config.parallel();
    let modes = state.stacks.len();

    let (loss, grads) = {
        let forward = |n: usize| gcn_forward(&state.stacks[n], &state.model.factors()[n], &state.adjacencies[n]);
        let passes: Vec<_> = if parallel {
            (0..modes).into_par_iter().map(forward).collect::<Result<_>>()?
        } else {
            (0..modes).map(forward).collect::<Result<_>>()?
        };
        let refined: Vec<Matrix<T>> = passes.iter().map(|(r, _)| r.clone()).collect();
        let (loss, refined_grads) = if parallel {
            loss_and_grad_parallel(&refined, train)?
        } else {
            loss_and_grad(&refined, train)?
        };
        let loss = checked_loss(loss, state.epoch + 1)?;

        let backward = |n: usize| gcn_backward(&state.stacks[n], &passes[n].1, &refined_grads[n]);
        let mode_grads: Vec<GcnGradients<T>> = if parallel {
            (0..modes).into_par_iter().map(backward).collect::<Result<_>>()?
        } else {
            (0..modes).map(backward).collect::<Result<_>>()?
        };

        let mut grads: Vec<Matrix<T>> = Vec::with_capacity(modes * 4);
        let mut weight_grads = Vec::new();
        for g in mode_grads {
            grads.push(g.input);
            weight_grads.extend(g.weights);
        }
        if state.train_weights {
            grads.extend(weight_grads);
        }
        (loss, grads)
    };

    state.apply_step(&grads)?;
    Ok(loss)
}

/// Rebuilds every mode's KNN graph and normalized adjacency from the current
/// raw factors. Returns, per mode, whether the adjacency changed.
pub fn rebuild_graphs<T: Scalar>(state: &mut TrainState<T>, config: &TrainConfig) -> Result<Vec<bool>> {
    state.require(Method::Tgl)?;
    let parallel = config.parallel();
    let build = |f: &FactorMatrix<T>| {
        knn_graph_from_features(f, config.knn_k, config.weighted_edges, parallel).map(|g| normalize_adjacency(&g))
    };
    let fresh: Vec<NormalizedAdjacency<T>> = if parallel {
        state.model.factors().par_iter().map(build).collect::<Result<_>>()?
    } else {
        state.model.factors().iter().map(build).collect::<Result<_>>()?
    };
    let changed = fresh.iter().zip(&state.adjacencies).map(|(a, b)| a != b).collect();
    state.adjacencies = fresh;
    state.graph_builds += 1;
    Ok(changed)
}

/// Patience-based stopping on a metric where lower is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale_epochs: 0,
        }
    }

    /// Feeds one epoch's metric. Returns true when it strictly improves.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some((_, best)) if value >= best || value.is_nan() => {
                self.stale_epochs += 1;
                false
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale_epochs = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale_epochs >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss before this epoch's update.
    pub train_loss: f64,
    /// `√loss / √Σx²` on the training entries, before the update.
    pub train_nre: f64,
    /// Validation NRE after the update.
    pub validation_nre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub rank: usize,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_nre: f64,
    pub test: EvalResult,
    pub stop_reason: StopReason,
    pub graph_builds: usize,
    /// CPD epochs run before the GCN phase; 0 without warm start.
    pub warm_start_epochs: usize,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn test_nre(&self) -> f64 {
        self.test.nre
    }
}

/// Epoch loop with early stopping; leaves the best snapshot in `state`.
fn run_epochs<T: Scalar>(
    state: &mut TrainState<T>,
    train: &SparseTensor<T>,
    validation: &SparseTensor<T>,
    config: &TrainConfig,
    train_norm: T,
) -> Result<(Vec<EpochRecord>, StopReason)> {
    let mut stopper = EarlyStopping::new(config.patience);
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        if config.method == Method::Tgl && epoch > 1 && (epoch - 1) % config.graph_rebuild_period == 0 {
            rebuild_graphs(state, config)?;
        }
        let loss = match config.method {
            Method::Cpd => train_epoch_cpd(state, train, config)?,
            Method::Tgl => train_epoch_tgl(state, train, config)?,
        };
        let effective = state.effective_factors(config.parallel())?;
        let val = nre_batched(&effective, validation)?;
        if stopper.observe(epoch, val.nre) {
            state.offer_snapshot(val, effective);
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss.as_f64(),
            train_nre: (loss.sqrt() / train_norm).as_f64(),
            validation_nre: val.nre,
        });
        if stopper.should_stop() {
            return Ok((epochs, StopReason::EarlyStop));
        }
    }
    Ok((epochs, StopReason::MaxEpochs))
}

/// Trains until `max_epochs` or until validation NRE has not improved for
/// `patience` epochs, then scores the best snapshot on `test`. With
/// `cpd_warm_start`, a TGL run first trains a CPD the same way and refines
/// its best factors.
pub fn fit<T: Scalar>(
    train: &SparseTensor<T>,
    validation: &SparseTensor<T>,
    test: &SparseTensor<T>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let started = Instant::now();
    config.validate()?;
    if validation.shape() != train.shape() || test.shape() != train.shape() {
        return Err(Error::ShapeMismatch(format!(
            "split shapes differ: train {:?}, validation {:?}, test {:?}",
            train.shape(),
            validation.shape(),
            test.shape()
        )));
    }
    if validation.is_empty() {
        return Err(Error::Empty("early stopping needs a non-empty validation set".into()));
    }
    if train.is_empty() {
        return Err(Error::Empty("no training entries".into()));
    }
    let train_norm = train.sum_sq().sqrt();
    if train_norm == T::zero() {
        return Err(Error::ZeroTruth);
    }

    let (mut state, warm_start_epochs) = if config.method == Method::Tgl && config.cpd_warm_start {
        let cpd_config = TrainConfig {
            method: Method::Cpd,
            ..config.clone()
        };
        let mut warm = TrainState::<T>::new(train.shape(), &cpd_config)?;
        let (warm_epochs, _) = run_epochs(&mut warm, train, validation, &cpd_config, train_norm)?;
        let best = warm.best.take().expect("at least one epoch records a snapshot");
        (TrainState::with_model(best.model, config)?, warm_epochs.len())
    } else {
        (TrainState::<T>::new(train.shape(), config)?, 0)
    };
    let (epochs, stop_reason) = run_epochs(&mut state, train, validation, config, train_norm)?;

    let best = state.best().expect("at least one epoch records a snapshot");
    let test_eval = nre_batched(&best.effective, test)?;
    Ok(TrainReport {
        method: config.method,
        rank: config.rank,
        config: config.clone(),
        epochs,
        best_epoch: best.epoch,
        best_validation_nre: best.validation.nre,
        test: test_eval,
        stop_reason,
        graph_builds: state.graph_builds(),
        warm_start_epochs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}
