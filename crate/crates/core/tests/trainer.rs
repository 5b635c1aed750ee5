mod common;

use std::collections::BTreeSet;

use approx::assert_relative_eq;
use common::*;
use rand::Rng;
use tgl_core::cp::CpModel;
use tgl_core::graph::{cosine_similarity, NormalizedAdjacency};
use tgl_core::tensor::SparseTensor;
use tgl_core::trainer::TrainState;
use tgl_core::{
    fit, gcn_forward, generate_synthetic, loss_observed, predict_entry, rebuild_graphs, split_dataset, train_epoch_cpd,
    train_epoch_tgl, GcnStack, Matrix, Method, OptimizerKind, TrainConfig,
};

/// First train losses of a TGL run on the 8x8x8 rank-2 fixture (seed 0,
/// no warm start), recorded from this implementation.
const RANK2_TRACE: [f64; 10] = [
    394.6744654880692,
    394.67407574301944,
    394.67321923290245,
    394.67164484933033,
    394.66901566702387,
    394.6648747268897,
    394.65863459771856,
    394.64952982720644,
    394.63656815330563,
    394.61849355471014,
];

fn random_model(seed: u64, shape: &[usize], rank: usize) -> CpModel<f64> {
    let mut r = rng(seed);
    CpModel::new(
        shape
            .iter()
            .map(|&d| uniform_matrix(&mut r, d, rank, -1.0, 1.0))
            .collect(),
    )
    .unwrap()
}

fn identity_tgl(model: CpModel<f64>, config: &TrainConfig) -> TrainState<f64> {
    let rank = model.rank();
    let adjs = model
        .shape()
        .iter()
        .map(|&d| NormalizedAdjacency::identity(d))
        .collect();
    TrainState::from_parts(model, vec![GcnStack::identity(rank); 3], adjs, config).unwrap()
}

fn refined(state: &TrainState<f64>) -> Vec<Matrix<f64>> {
    (0..3)
        .map(|n| {
            gcn_forward(&state.stacks()[n], &state.model().factors()[n], &state.adjacencies()[n])
                .unwrap()
                .0
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (data, _) = generate_synthetic::<f64>(&[6, 5, 4], 2, 0.5, 0.1, 3).unwrap();
    let config = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::new(Method::Tgl, 2)
    };
    let valid = TrainConfig::new(Method::Tgl, 2);
    let fresh = TrainState::<f64>::new(data.shape(), &valid).unwrap();
    let mut state = TrainState::from_parts(
        fresh.model().clone(),
        fresh.stacks().to_vec(),
        fresh.adjacencies().to_vec(),
        &config,
    )
    .unwrap();
    let entry_loss = loss_observed(&refined(&state), &data).unwrap();
    let loss = train_epoch_tgl(&mut state, &data, &config).unwrap();
    assert_eq!(loss, entry_loss);
    assert_eq!(state.model(), fresh.model());
    assert_eq!(state.stacks(), fresh.stacks());
}

#[test]
fn identity_stack_epoch_equals_cpd_epoch() {
    let (data, _) = generate_synthetic::<f64>(&[7, 6, 5], 2, 0.4, 0.1, 9).unwrap();
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let model = random_model(21, &[7, 6, 5], 3);
        let cpd_config = TrainConfig {
            optimizer,
            learning_rate: 1e-3,
            ..TrainConfig::new(Method::Cpd, 3)
        };
        let tgl_config = TrainConfig {
            method: Method::Tgl,
            freeze_gcn_weights: true,
            ..cpd_config.clone()
        };
        let mut cpd = TrainState::from_parts(model.clone(), vec![], vec![], &cpd_config).unwrap();
        let mut tgl = identity_tgl(model, &tgl_config);
        let a = train_epoch_cpd(&mut cpd, &data, &cpd_config).unwrap();
        let b = train_epoch_tgl(&mut tgl, &data, &tgl_config).unwrap();
        assert!((a - b).abs() <= 1e-10);
        for (x, y) in cpd.model().factors().iter().zip(tgl.model().factors()) {
            assert!(x.max_abs_diff(y).unwrap() <= 1e-10, "{optimizer}");
        }
    }
}

#[test]
fn rank_two_loss_trace_regression() {
    let (tensor, _) = generate_synthetic::<f64>(&[8, 8, 8], 2, 0.5, 0.0, 0).unwrap();
    let split = split_dataset(&tensor, [8.0, 1.0, 1.0], 0).unwrap();
    let config = TrainConfig {
        max_epochs: 200,
        cpd_warm_start: false,
        ..TrainConfig::new(Method::Tgl, 2)
    };
    let report = fit(&split.train, &split.validation, &split.test, &config).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses[..10].windows(2).all(|w| w[1] < w[0]), "{:?}", &losses[..10]);
    for (got, want) in losses.iter().zip(RANK2_TRACE) {
        assert_relative_eq!(*got, want, max_relative = 1e-9);
    }
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn cpd_loss_decreases_for_small_steps() {
    for seed in 0..5u64 {
        let (data, _) = generate_synthetic::<f64>(&[6, 6, 6], 2, 0.5, 0.2, seed).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::new(Method::Cpd, 2)
        };
        let mut state = TrainState::<f64>::new(data.shape(), &config).unwrap();
        let losses: Vec<f64> = (0..6)
            .map(|_| train_epoch_cpd(&mut state, &data, &config).unwrap())
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {losses:?}");
    }
}

#[test]
fn perfect_fit_is_stationary() {
    let model = random_model(5, &[4, 3, 5], 2);
    let (pattern, _) = generate_synthetic::<f64>(&[4, 3, 5], 1, 0.5, 0.0, 1).unwrap();
    let data = SparseTensor::from_flat(
        vec![4, 3, 5],
        pattern.iter().flat_map(|(i, _)| i.to_vec()).collect(),
        pattern
            .iter()
            .map(|(i, _)| predict_entry(model.factors(), i).unwrap())
            .collect(),
    )
    .unwrap();
    let config = TrainConfig::new(Method::Cpd, 2);
    let mut state = TrainState::from_parts(model.clone(), vec![], vec![], &config).unwrap();
    assert_eq!(train_epoch_cpd(&mut state, &data, &config).unwrap(), 0.0);
    assert_eq!(state.model(), &model);
}

#[test]
fn single_entry_adam_step_by_hand() {
    let model = CpModel::new(vec![
        Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
        Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
    ])
    .unwrap();
    let data = SparseTensor::new(vec![1, 1, 1], vec![(vec![0, 0, 0], 10.0)]).unwrap();
    let config = TrainConfig::new(Method::Cpd, 1);
    let mut state = TrainState::from_parts(model, vec![], vec![], &config).unwrap();
    let loss = train_epoch_cpd(&mut state, &data, &config).unwrap();
    assert_eq!(loss, 16.0);

    // residual e = 6 - 10; gradients 2e times the other two entries
    let lr = config.learning_rate;
    let step = |g: f64| -lr * g / (g.abs() + 1e-8);
    let expected = [1.0 + step(-48.0), 2.0 + step(-24.0), 3.0 + step(-16.0)];
    for (f, want) in state.model().factors().iter().zip(expected) {
        assert_relative_eq!(f[(0, 0)], want, max_relative = 1e-15);
    }
}

#[test]
fn rebuilding_unchanged_factors_is_a_no_op() {
    let config = TrainConfig {
        knn_k: 2,
        ..TrainConfig::new(Method::Tgl, 3)
    };
    let mut state = TrainState::<f64>::new(&[9, 7, 6], &config).unwrap();
    let before = state.adjacencies().to_vec();
    let changed = rebuild_graphs(&mut state, &config).unwrap();
    assert_eq!(changed, vec![false; 3]);
    assert_eq!(state.adjacencies(), &before[..]);
    assert_eq!(state.graph_builds(), 2);
}

#[test]
fn rebuild_period_equal_to_epochs_builds_once() {
    let (tensor, _) = generate_synthetic::<f64>(&[6, 6, 6], 2, 0.5, 0.0, 4).unwrap();
    let split = split_dataset(&tensor, [8.0, 1.0, 1.0], 4).unwrap();
    for warm in [false, true] {
        let config = TrainConfig {
            max_epochs: 30,
            graph_rebuild_period: 30,
            cpd_warm_start: warm,
            ..TrainConfig::new(Method::Tgl, 2)
        };
        let report = fit(&split.train, &split.validation, &split.test, &config).unwrap();
        assert_eq!(report.graph_builds, 1);

        let every = TrainConfig {
            graph_rebuild_period: 1,
            ..config.clone()
        };
        let report = fit(&split.train, &split.validation, &split.test, &every).unwrap();
        assert_eq!(report.graph_builds, report.epochs.len());
    }
}

/// Undirected edge set of the OR-symmetrized top-k graph, by brute force.
fn brute_force_edges(features: &Matrix<f64>, k: usize) -> BTreeSet<(usize, usize)> {
    let sim = cosine_similarity(features);
    let n = features.rows();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| sim[(i, b)].partial_cmp(&sim[(i, a)]).unwrap().then(a.cmp(&b)));
        for &j in others.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges
}

#[test]
fn adjacency_changes_exactly_when_neighbor_sets_change() {
    let mut r = rng(31);
    let mut seen = [0usize; 2];
    for trial in 0..200u64 {
        let k = r.random_range(1..=3);
        let config = TrainConfig {
            knn_k: k,
            ..TrainConfig::new(Method::Tgl, 2)
        };
        let first = random_model(trial, &[5, 5, 5], 2);
        let mut state = TrainState::from_parts(
            first.clone(),
            vec![GcnStack::identity(2); 3],
            vec![NormalizedAdjacency::identity(5); 3],
            &config,
        )
        .unwrap();
        rebuild_graphs(&mut state, &config).unwrap();

        let noise = if trial % 2 == 0 { 0.02 } else { 0.5 };
        let second = CpModel::new(
            first
                .factors()
                .iter()
                .map(|f| {
                    let shift = uniform_matrix(&mut r, f.rows(), f.cols(), -noise, noise);
                    f.add(&shift).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let mut moved = TrainState::from_parts(
            second.clone(),
            state.stacks().to_vec(),
            state.adjacencies().to_vec(),
            &config,
        )
        .unwrap();
        let changed = rebuild_graphs(&mut moved, &config).unwrap();
        for n in 0..3 {
            let expect = brute_force_edges(&first.factors()[n], k) != brute_force_edges(&second.factors()[n], k);
            assert_eq!(changed[n], expect, "trial {trial} mode {n}");
            seen[expect as usize] += 1;
        }
    }
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}

#[test]
fn fit_is_deterministic() {
    let (tensor, _) = generate_synthetic::<f64>(&[7, 6, 5], 2, 0.5, 0.05, 2).unwrap();
    let split = split_dataset(&tensor, [8.0, 1.0, 1.0], 2).unwrap();
    for method in [Method::Cpd, Method::Tgl] {
        let config = TrainConfig {
            max_epochs: 80,
            knn_k: 3,
            ..TrainConfig::new(method, 2)
        };
        let mut a = fit(&split.train, &split.validation, &split.test, &config).unwrap();
        let mut b = fit(&split.train, &split.validation, &split.test, &config).unwrap();
        a.wall_clock_seconds = 0.0;
        b.wall_clock_seconds = 0.0;
        assert_eq!(a, b);
    }
}

#[test]
fn best_snapshot_is_never_worse_than_any_epoch() {
    let (tensor, _) = generate_synthetic::<f64>(&[8, 7, 6], 2, 0.4, 0.2, 6).unwrap();
    let split = split_dataset(&tensor, [8.0, 1.0, 1.0], 6).unwrap();
    for method in [Method::Cpd, Method::Tgl] {
        let config = TrainConfig {
            max_epochs: 300,
            patience: 20,
            knn_k: 3,
            ..TrainConfig::new(method, 2)
        };
        let report = fit(&split.train, &split.validation, &split.test, &config).unwrap();
        let min = report
            .epochs
            .iter()
            .map(|e| e.validation_nre)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_validation_nre, min);
        assert_eq!(report.epochs[report.best_epoch - 1].validation_nre, min);
        assert!(report.epochs.len() <= report.best_epoch + config.patience);
    }
}

#[test]
fn warm_start_is_reported() {
    let (tensor, _) = generate_synthetic::<f64>(&[6, 6, 6], 2, 0.5, 0.0, 8).unwrap();
    let split = split_dataset(&tensor, [8.0, 1.0, 1.0], 8).unwrap();
    let config = TrainConfig {
        max_epochs: 40,
        knn_k: 2,
        ..TrainConfig::new(Method::Tgl, 2)
    };
    let warm = fit(&split.train, &split.validation, &split.test, &config).unwrap();
    assert_eq!(warm.warm_start_epochs, 40);
    let cold_config = TrainConfig {
        cpd_warm_start: false,
        ..config.clone()
    };
    let cold = fit(&split.train, &split.validation, &split.test, &cold_config).unwrap();
    assert_eq!(cold.warm_start_epochs, 0);
    let cpd = fit(
        &split.train,
        &split.validation,
        &split.test,
        &TrainConfig {
            method: Method::Cpd,
            ..config
        },
    )
    .unwrap();
    assert_eq!(cpd.warm_start_epochs, 0);
}

#[test]
fn noise_free_rank_two_recovery() {
    let (tensor, _) = generate_synthetic::<f64>(&[8, 8, 8], 2, 0.5, 0.0, 0).unwrap();
    let split = split_dataset(&tensor, [8.0, 1.0, 1.0], 0).unwrap();
    let report = fit(
        &split.train,
        &split.validation,
        &split.test,
        &TrainConfig::new(Method::Cpd, 2),
    )
    .unwrap();
    assert!(report.test_nre() < 0.05, "{}", report.test_nre());
}

#[test]
fn full_observation_rank_three_fit_converges() {
    let (tensor, _) = generate_synthetic::<f64>(&[10, 10, 10], 3, 0.3, 0.0, 0).unwrap();
    assert_eq!(tensor.nnz(), 300);
    let config = TrainConfig::new(Method::Cpd, 3);
    let mut state = TrainState::<f64>::new(tensor.shape(), &config).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..5000 {
        loss = train_epoch_cpd(&mut state, &tensor, &config).unwrap();
        if loss < 1e-6 {
            break;
        }
    }
    assert!(loss < 1e-6, "{loss}");
}
