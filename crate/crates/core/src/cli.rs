//! Command-line driver: load or synthesize a tensor, split it, train one or
//! more ranks, and write a report.

use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gcn::Activation;
use crate::optim::OptimizerKind;
use crate::report::{write_report, DatasetSummary, ReportDocument};
use crate::tensor::{generate_clustered, generate_synthetic, read_coo, split_dataset, ClusterSpec, SparseTensor};
use crate::trainer::{fit, Method, TrainConfig, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "tgl", about = "Sparse tensor completion with CPD and GCN-refined CPD")]
pub struct Cli {
    /// COO tensor file (`i j k value` per line, optional `# shape:` header)
    #[arg(
        long,
        value_name = "PATH",
        required_unless_present = "synthetic",
        conflicts_with = "synthetic"
    )]
    pub input: Option<PathBuf>,

    /// Generate a synthetic low-rank tensor instead of reading one
    #[arg(long)]
    pub synthetic: bool,

    /// Synthetic mode sizes, comma separated
    #[arg(long, value_delimiter = ',', default_value = "8,8,8", requires = "synthetic")]
    pub shape: Vec<usize>,

    /// Rank of the synthetic ground truth
    #[arg(long, default_value_t = 2, requires = "synthetic")]
    pub true_rank: usize,

    /// Fraction of synthetic cells observed
    #[arg(long, default_value_t = 0.1, requires = "synthetic")]
    pub density: f64,

    /// Std of Gaussian observation noise on synthetic values
    #[arg(long, default_value_t = 0.0, requires = "synthetic")]
    pub noise_std: f64,

    /// Draw synthetic factor rows around this many shared centroids
    #[arg(long, requires = "synthetic")]
    pub clusters: Option<usize>,

    /// Std of synthetic factor rows around their centroid
    #[arg(long, default_value_t = 0.1, requires = "clusters")]
    pub cluster_spread: f64,

    #[arg(long, default_value = "tgl", value_parser = ["cpd", "tgl"])]
    pub method: String,

    /// Model rank
    #[arg(long, required_unless_present = "rank_sweep", conflicts_with = "rank_sweep")]
    pub rank: Option<usize>,

    /// Train one model per rank and report each
    #[arg(long, value_delimiter = ',', value_name = "R1,R2,..")]
    pub rank_sweep: Option<Vec<usize>>,

    #[arg(long, default_value_t = 10)]
    pub knn_k: usize,

    /// GCN layer widths; must start and end with the rank (default R,2R,R)
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,

    #[arg(long, default_value = "relu", value_parser = ["relu", "tanh", "identity"])]
    pub activation: String,

    #[arg(long, default_value = "identity", value_parser = ["relu", "tanh", "identity"])]
    pub final_activation: String,

    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,

    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,

    #[arg(long, default_value_t = 200)]
    pub patience: usize,

    /// Rebuild KNN graphs every N epochs
    #[arg(long, default_value_t = 1)]
    pub rebuild_period: usize,

    /// Train/validation/test ratios
    #[arg(long, value_delimiter = ',', default_value = "8,1,1", num_args = 1)]
    pub split: Vec<f64>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Use clamped cosine similarities as edge weights instead of 1
    #[arg(long)]
    pub weighted_edges: bool,

    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    pub optimizer: String,

    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,

    /// Start TGL from randomly initialized factors instead of a fitted CPD
    #[arg(long)]
    pub no_warm_start: bool,

    /// Sequential arithmetic for bit-reproducible reports
    #[arg(long)]
    pub deterministic: bool,

    #[arg(long, default_value = "tgl_report.json")]
    pub output: PathBuf,
}

const HYPERPARAMETERS: [&str; 13] = [
    "knn_k",
    "layers",
    "activation",
    "final_activation",
    "lr",
    "epochs",
    "patience",
    "rebuild_period",
    "split",
    "optimizer",
    "init_scale",
    "no_warm_start",
    "seed",
];

fn defaulted(matches: &ArgMatches) -> Vec<String> {
    HYPERPARAMETERS
        .iter()
        .filter(|id| !matches!(matches.value_source(id), Some(ValueSource::CommandLine)))
        .map(|id| id.to_string())
        .collect()
}

impl Cli {
    fn ranks(&self) -> Vec<usize> {
        match (&self.rank_sweep, self.rank) {
            (Some(sweep), _) => sweep.clone(),
            (None, Some(r)) => vec![r],
            (None, None) => Vec::new(),
        }
    }

    fn config(&self, rank: usize) -> Result<TrainConfig> {
        let split: [f64; 3] = self
            .split
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("--split takes three ratios, got {}", self.split.len())))?;
        let config = TrainConfig {
            method: self.method.parse::<Method>()?,
            rank,
            knn_k: self.knn_k,
            layer_dims: self.layers.clone(),
            activation: self.activation.parse::<Activation>()?,
            final_activation: self.final_activation.parse::<Activation>()?,
            optimizer: self.optimizer.parse::<OptimizerKind>()?,
            learning_rate: self.lr,
            max_epochs: self.epochs,
            patience: self.patience,
            graph_rebuild_period: self.rebuild_period,
            seed: self.seed,
            split_ratios: split,
            weighted_edges: self.weighted_edges,
            factor_init_scale: self.init_scale,
            freeze_gcn_weights: false,
            cpd_warm_start: !self.no_warm_start,
            deterministic: self.deterministic,
        };
        config.validate()?;
        Ok(config)
    }

    fn load(&self) -> Result<(SparseTensor<f64>, String)> {
        match &self.input {
            Some(path) => Ok((read_coo(path, None)?, path.display().to_string())),
            None => {
                let tensor = match self.clusters {
                    Some(clusters) => {
                        let spec = ClusterSpec {
                            clusters,
                            spread: self.cluster_spread,
                        };
                        generate_clustered(
                            &self.shape,
                            self.true_rank,
                            spec,
                            self.density,
                            self.noise_std,
                            self.seed,
                        )?
                        .0
                    }
                    None => generate_synthetic(&self.shape, self.true_rank, self.density, self.noise_std, self.seed)?.0,
                };
                Ok((tensor, "synthetic".to_string()))
            }
        }
    }
}

/// Runs a parsed command line and returns the report it wrote.
pub fn run(cli: &Cli, defaulted_settings: Vec<String>) -> Result<ReportDocument> {
    let ranks = cli.ranks();
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no rank given".into()));
    }
    let configs = ranks.iter().map(|&r| cli.config(r)).collect::<Result<Vec<_>>>()?;
    let (tensor, source) = cli.load()?;
    let split = split_dataset(&tensor, configs[0].split_ratios, cli.seed)?;

    let train_one = |c: &TrainConfig| fit(&split.train, &split.validation, &split.test, c);
    let results: Vec<TrainReport> = if cli.deterministic {
        configs.iter().map(train_one).collect::<Result<_>>()?
    } else {
        configs.par_iter().map(train_one).collect::<Result<_>>()?
    };

    let dataset = DatasetSummary {
        source,
        shape: tensor.shape().to_vec(),
        entries: tensor.nnz(),
        train_entries: split.train.nnz(),
        validation_entries: split.validation.nnz(),
        test_entries: split.test.nnz(),
    };
    let mut doc = ReportDocument::new(dataset, results);
    doc.defaulted_settings = defaulted_settings;
    write_report(&doc, &cli.output)?;
    Ok(doc)
}

/// Parses `argv` (program name first), runs, and maps the outcome to a
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match run(&cli, defaulted(&matches)) {
        Ok(doc) => {
            for r in &doc.results {
                println!(
                    "method={} rank={} epochs={} best_epoch={} stop={} val_nre={:.6} test_nre={:.6} report={}",
                    r.method,
                    r.rank,
                    r.epochs.len(),
                    r.best_epoch,
                    match r.stop_reason {
                        crate::trainer::StopReason::EarlyStop => "early-stop",
                        crate::trainer::StopReason::MaxEpochs => "max-epochs",
                    },
                    r.best_validation_nre,
                    r.test_nre(),
                    cli.output.display()
                );
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}
