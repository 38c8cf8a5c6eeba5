use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mci", version, about = "Kernel conditional-dependence statistics and domain-adaptation training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a dependence or discrepancy statistic.
    Measure(MeasureArgs),
    /// Train with the conditional-dependence objective over several trials.
    Train(TrainArgs),
    /// Grid over beta1 × beta2 (× epsilon).
    Sweep(SweepArgs),
    /// Write a synthetic scenario as a feature file.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticChoice {
    /// Domain changes only the class prior (X ⟂ Z | Y).
    ChainCi,
    /// Domain also shifts the class means.
    ChainDep,
    ShiftedBlobs,
    RotatedMoons,
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "synthetic"])))]
pub struct DataArgs {
    /// Feature file with header `f0,...,f{d-1},label,domain`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Field delimiter of the feature file.
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Synthetic scenario instead of a file.
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticChoice>,
    /// Number of classes (synthetic default: 4 blobs, 2 moons, 3 chain).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub num_sources: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    /// Target translation along the first axis, in units of noise_sd (blobs).
    #[arg(long, default_value_t = 2.5)]
    pub shift: f64,
    /// Radius of the circle of class means (blobs, chain).
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    /// Per-domain mean offset, in units of noise_sd (chain-dep).
    #[arg(long, default_value_t = 2.0)]
    pub offset: f64,
    /// Feature dimension (blobs, chain).
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Target rotation in radians (moons).
    #[arg(long, default_value_t = 0.5)]
    pub angle: f64,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Report path; relative paths resolve against $MCI_OUT_DIR when set.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stat {
    Nocco,
    Cond,
    PerClassNocco,
    Mmd,
    ADistance,
}

#[derive(Debug, Clone, Args)]
pub struct MeasureArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub stat: Stat,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Permutation replicates for a p-value (dependence statistics only).
    #[arg(long)]
    pub permutations: Option<usize>,
    /// Class-conditional variant (mmd, a-distance).
    #[arg(long)]
    pub per_class: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PseudoLabels {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 1e-2)]
    pub beta1: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 100)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub adapt_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 512)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 512)]
    pub feature_dim: usize,
    #[arg(long, value_enum, default_value_t = PseudoLabels::Hard)]
    pub pseudo_labels: PseudoLabels,
    /// Trial i uses seed + i for initialisation and synthetic data.
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Also run beta1 = beta2 = 0 with the same seeds.
    #[arg(long)]
    pub baseline: bool,
    /// Save trained parameters (trial index appended when trials > 1).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Include per-epoch traces in the report.
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub beta1_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub beta2_grid: Vec<f64>,
    /// Defaults to the single value of --epsilon.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub epsilon_grid: Vec<f64>,
    /// Human-readable table on stderr.
    #[arg(long)]
    pub table: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination feature file.
    #[arg(long)]
    pub out: PathBuf,
}
