use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use ttclab::adaptation::{AdaptationConfig, Augmentation, Strategy};
use ttclab::benchmark::{Corruption, CorruptionKind, DEFAULT_BATCH_SIZE, DEFAULT_K, DEFAULT_N_TEST};
use ttclab::optim::OptimizerKind;

#[derive(Debug, Parser)]
#[command(name = "ttclab", version, about = "Test-time adaptation experiments on a synthetic signal benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source classifier and write its checkpoint.
    TrainSource(TrainSourceArgs),
    /// Stream one corrupted test set through one adaptation strategy.
    Adapt(AdaptArgs),
    /// Every strategy on every corruption for several seeds.
    Grid(GridArgs),
    /// Accuracy against batch size, with and without gradient accumulation.
    SweepBatchSize(SweepBatchSizeArgs),
    /// Accuracy against the sample-weight exponent.
    SweepTau(SweepTauArgs),
    /// Entropy descent on logits: the largest probability must never shrink.
    LemmaCheck(LemmaCheckArgs),
    /// Per-channel feature histograms of two strategies and a clean reference.
    Density(DensityArgs),
}

#[derive(Debug, Args)]
pub struct TrainSourceArgs {
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 3000)]
    pub train_size: usize,
    /// Size of the clean held-out split used to report accuracy.
    #[arg(long, default_value_t = 3000)]
    pub holdout_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Adaptation hyperparameters shared by the streaming commands.
#[derive(Debug, Clone, Args)]
pub struct AdaptFlags {
    #[arg(long)]
    pub tau: Option<f64>,
    /// Batches per optimizer step; default `max(1, round(200 / N))`. Implies `--ga`.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub no_rla: bool,
    #[arg(long)]
    pub no_wa: bool,
    #[arg(long, conflicts_with = "ga")]
    pub no_ga: bool,
    /// Turn on gradient accumulation for strategies where it is off by default.
    #[arg(long)]
    pub ga: bool,
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    /// Augmentation averaged in by robust label assignment.
    #[arg(long, value_parser = parse_augmentation)]
    pub augmentation: Option<Augmentation>,
}

impl AdaptFlags {
    pub fn config(&self, strategy: Strategy) -> Result<AdaptationConfig> {
        let mut cfg = AdaptationConfig::new(strategy);
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(o) = self.optimizer {
            cfg.optimizer = o;
        }
        if let Some(a) = self.augmentation {
            cfg.augmentation = a;
        }
        cfg.accumulation_q = self.q;
        cfg.filter_threshold = self.filter_threshold;
        cfg.rla_enabled &= !self.no_rla;
        cfg.wa_enabled &= !self.no_wa;
        if self.ga || self.q.is_some() {
            cfg.ga_enabled = true;
        }
        if self.no_ga {
            cfg.ga_enabled = false;
        }
        cfg.validate().map_err(|e| anyhow::anyhow!("invalid adaptation settings: {e}"))?;
        Ok(cfg)
    }
}

/// Where the stream comes from.
#[derive(Debug, Clone, Args)]
pub struct StreamFlags {
    #[arg(long, default_value = "out/source.json")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_N_TEST)]
    pub n_test: usize,
    #[arg(long, default_value_t = 5)]
    pub severity: u8,
}

impl StreamFlags {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            bail!("--batch-size must be at least 2, got {}", self.batch_size);
        }
        if !(1..=5).contains(&self.severity) {
            bail!("--severity must be in 1..=5, got {}", self.severity);
        }
        if self.n_test < 2 {
            bail!("--n-test must be at least 2, got {}", self.n_test);
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub stream: StreamFlags,
    #[arg(long, default_value = "ttc")]
    pub strategy: Strategy,
    /// A corruption name, or `none` for the clean stream.
    #[arg(long, default_value = "gaussian_noise", value_parser = parse_corruption)]
    pub corruption: CorruptionChoice,
    #[command(flatten)]
    pub adapt: AdaptFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/adapt")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub stream: StreamFlags,
    #[command(flatten)]
    pub adapt: AdaptFlags,
    /// First seed of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value = "out/grid")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepBatchSizeArgs {
    #[arg(long, default_value = "out/source.json")]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,10,50,100")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_N_TEST)]
    pub n_test: usize,
    #[arg(long, default_value_t = 5)]
    pub severity: u8,
    #[command(flatten)]
    pub adapt: AdaptFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value = "out/sweep_batch_size.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepTauArgs {
    #[command(flatten)]
    pub stream: StreamFlags,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5,1,5,10")]
    pub taus: Vec<f64>,
    #[command(flatten)]
    pub adapt: AdaptFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value = "out/sweep_tau.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LemmaCheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,10,100")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Random starting distributions checked in addition to the fixed ones.
    #[arg(long, default_value_t = 1000)]
    pub random_starts: usize,
    /// Steps taken from each random start.
    #[arg(long, default_value_t = 100)]
    pub random_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/lemma")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[command(flatten)]
    pub stream: StreamFlags,
    /// The two strategies to compare, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "tent,ttc")]
    pub strategies: Vec<Strategy>,
    #[arg(long, default_value = "gaussian_noise", value_parser = parse_corruption)]
    pub corruption: CorruptionChoice,
    #[command(flatten)]
    pub adapt: AdaptFlags,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/density")]
    pub out: PathBuf,
}

/// A corruption kind, or the clean stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionChoice {
    Clean,
    Kind(CorruptionKind),
}

impl CorruptionChoice {
    pub fn with_severity(self, severity: u8) -> Result<Option<Corruption>> {
        match self {
            CorruptionChoice::Clean => Ok(None),
            CorruptionChoice::Kind(k) => Ok(Some(Corruption::new(k, severity)?)),
        }
    }
}

fn parse_corruption(s: &str) -> std::result::Result<CorruptionChoice, String> {
    if s == "none" {
        return Ok(CorruptionChoice::Clean);
    }
    s.parse().map(CorruptionChoice::Kind).map_err(|e: ttclab::Error| e.to_string())
}

fn parse_augmentation(s: &str) -> std::result::Result<Augmentation, String> {
    match s {
        "flip" => Ok(Augmentation::Flip),
        "identity" => Ok(Augmentation::Identity),
        other => Err(format!("unknown augmentation `{other}` (expected flip or identity)")),
    }
}
