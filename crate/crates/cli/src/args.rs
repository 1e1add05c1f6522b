use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nnwm_core::codec::{DEFAULT_P_MAX, DEFAULT_P_MIN};
use nnwm_core::Criterion;

#[derive(Debug, Parser)]
#[command(name = "nnwm", version, about = "Structural watermarking of CNNs by keyed channel pruning")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed a payload by pruning key-selected conv layers.
    Embed(EmbedArgs),
    /// Read the payload back from a suspect model.
    Extract(ExtractArgs),
    /// Extract and compare with an expected payload (exit 1 on mismatch).
    Verify(VerifyArgs),
    /// Watermark capacity in bits for t conv layers.
    Capacity(CapacityArgs),
    /// Per-layer channel counts, observed rates and decoded segments.
    Inspect(InspectArgs),
    /// Apply a removal attack, optionally followed by verification.
    Attack(AttackArgs),
    /// Train a fixture on synthetic data, embed, fine-tune and report accuracy.
    TrainDemo(TrainDemoArgs),
    /// Write a fixture model to disk.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Architecture manifest (JSON).
    #[arg(long)]
    pub arch: PathBuf,
    /// Weight blob; defaults to the manifest path with a `.bin` extension.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

/// The model under examination.
#[derive(Debug, Args)]
pub struct SuspectArgs {
    /// Suspect model manifest (JSON).
    #[arg(long = "suspect", visible_alias = "arch")]
    pub arch: PathBuf,
    /// Weight blob; defaults to the manifest path with a `.bin` extension.
    #[arg(long = "suspect-weights", visible_alias = "weights")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct KeyArgs {
    /// Secret key as a UTF-8 string.
    #[arg(long)]
    pub key: Option<String>,
    /// Secret key as hex bytes.
    #[arg(long)]
    pub key_hex: Option<String>,
}

#[derive(Debug, Args)]
#[group(required = false, multiple = false)]
pub struct OptionalKeyArgs {
    /// Secret key as a UTF-8 string.
    #[arg(long)]
    pub key: Option<String>,
    /// Secret key as hex bytes.
    #[arg(long)]
    pub key_hex: Option<String>,
}

#[derive(Debug, Args)]
pub struct SchemeArgs {
    /// Segment length in bits.
    #[arg(long = "l", default_value_t = 3)]
    pub l: u32,
    #[arg(long, default_value_t = DEFAULT_P_MIN)]
    pub pmin: f64,
    #[arg(long, default_value_t = DEFAULT_P_MAX)]
    pub pmax: f64,
    /// Channel importance criterion: l1 or bn.
    #[arg(long, default_value = "l1")]
    pub criterion: Criterion,
    /// Coverage ratio; caps the payload at l * round(t * r_cov) bits.
    #[arg(long, visible_alias = "rcov")]
    pub r_cov: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    /// Original (unmarked) model manifest.
    #[arg(long = "original", visible_alias = "reference-arch", conflicts_with = "receipt")]
    pub reference_arch: Option<PathBuf>,
    /// Original weights; defaults to the manifest path with a `.bin` extension.
    #[arg(long = "original-weights", visible_alias = "reference-weights", requires = "reference_arch")]
    pub reference_weights: Option<PathBuf>,
    /// Receipt written at embedding time.
    #[arg(long)]
    pub receipt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Payload: binary string, 0x-prefixed hex, or @file.
    #[arg(long)]
    pub payload: String,
    #[command(flatten)]
    pub key: KeyArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Output prefix; writes <prefix>.json and <prefix>.bin.
    #[arg(long)]
    pub out_prefix: PathBuf,
    /// Receipt path; defaults to <prefix>.receipt.json.
    #[arg(long)]
    pub receipt: Option<PathBuf>,
    /// Fine-tune the marked model on synthetic data for this many epochs.
    #[arg(long, default_value_t = 0)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Also prune unselected layers at key-derived decoy rates.
    #[arg(long)]
    pub decoy: bool,
    #[arg(long, env = "NNWM_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub suspect: SuspectArgs,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[command(flatten)]
    pub key: KeyArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Payload length in bits (taken from the receipt when omitted).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub extract: ExtractArgs,
    /// Expected payload: binary string, 0x-prefixed hex, or @file.
    #[arg(long, visible_alias = "payload")]
    pub expect: String,
    /// Maximum bit error rate still reported as a match.
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    /// Number of conv layers.
    #[arg(long, conflicts_with = "model")]
    pub t: Option<usize>,
    /// Count conv layers (and eligible ones) of this manifest instead.
    #[arg(long = "arch")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub weights: Option<PathBuf>,
    #[arg(long = "l", default_value_t = 3)]
    pub l: u32,
    #[arg(long, visible_alias = "rcov", default_value_t = 1.0)]
    pub r_cov: f64,
    #[arg(long, default_value = "l1")]
    pub criterion: Criterion,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub suspect: SuspectArgs,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[arg(long = "l", default_value_t = 3)]
    pub l: u32,
    #[arg(long, default_value_t = DEFAULT_P_MIN)]
    pub pmin: f64,
    #[arg(long, default_value_t = DEFAULT_P_MAX)]
    pub pmax: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttackKind {
    /// Gaussian noise; strength is sigma relative to each tensor's std.
    Noise,
    /// Zero the smallest weights; strength is the fraction.
    Zero,
    /// Fine-tune on synthetic data for --epochs.
    Finetune,
    /// Randomly prune extra channels; strength is the extra rate.
    Structural,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "type", visible_alias = "kind")]
    pub kind: AttackKind,
    /// Noise sigma, zeroing fraction, or extra pruning rate, depending on the type.
    #[arg(long, visible_aliases = ["sigma", "fraction", "rate"], default_value_t = 0.1)]
    pub strength: f64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, env = "NNWM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_prefix: PathBuf,
    /// Verify this payload against the attacked model.
    #[arg(long)]
    pub verify_payload: Option<String>,
    #[command(flatten)]
    pub key: OptionalKeyArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    #[arg(long, env = "NNWM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    pub finetune_lr: f64,
    #[arg(long, default_value_t = 256)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_test: usize,
    /// Defaults to the key "nnwm-demo".
    #[command(flatten)]
    pub key: OptionalKeyArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Write per-epoch metrics (baseline then fine-tune) as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureName {
    VggTiny,
    Vgg19Conv16,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, value_enum, default_value = "vgg-tiny")]
    pub name: FixtureName,
    #[arg(long, env = "NNWM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Train on synthetic data before writing.
    #[arg(long, default_value_t = 0)]
    pub train_epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long)]
    pub out_prefix: PathBuf,
}
