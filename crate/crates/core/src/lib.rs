//! Sparse tensor completion with CP decomposition, optionally refining each
//! mode's factor matrix through a graph convolutional stack over a KNN
//! similarity graph built from the factors themselves.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the double-precision types used by the CLI.

pub mod cli;
pub mod cp;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use cp::{grad_cpd, init_factors, loss_and_grad, loss_observed, predict_entry, FactorMatrix};
pub use error::{Error, Result};
pub use gcn::{gcn_backward, gcn_forward, init_stack, Activation, ForwardTape, GcnGradients};
pub use graph::{build_knn_graph, cosine_similarity, normalize_adjacency, KnnGraph};
pub use linalg::Matrix;
pub use metrics::{nre, nre_batched, EvalResult};
pub use optim::{adam_step, Moments, Optimizer, OptimizerKind};
pub use report::{read_report, write_report, ReportDocument};
pub use scalar::Scalar;
pub use tensor::{generate_clustered, generate_synthetic, parse_coo, split_dataset, ClusterSpec, DatasetSplit};
pub use trainer::{
    fit, rebuild_graphs, train_epoch_cpd, train_epoch_tgl, EarlyStopping, Method, StopReason, TrainConfig, TrainReport,
};

pub type SparseTensor = tensor::SparseTensor<f64>;
pub type CpModel = cp::CpModel<f64>;
pub type GcnStack = gcn::GcnStack<f64>;
pub type NormalizedAdjacency = graph::NormalizedAdjacency<f64>;
pub type TrainState = trainer::TrainState<f64>;

pub type SparseTensorF32 = tensor::SparseTensor<f32>;
pub type CpModelF32 = cp::CpModel<f32>;
pub type GcnStackF32 = gcn::GcnStack<f32>;
pub type NormalizedAdjacencyF32 = graph::NormalizedAdjacency<f32>;
pub type TrainStateF32 = trainer::TrainState<f32>;
