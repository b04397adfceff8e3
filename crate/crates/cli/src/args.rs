use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rkm_core::cell::CellVariant;

#[derive(Parser, Debug)]
#[command(name = "rkm", version, about = "Recurrent kernel machine cells: training, evaluation and self-checks")]
pub struct Cli {
    /// key=value file of flag defaults; flags given on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a classifier or language model and write a checkpoint plus report CSV
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences for every variant
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Print the weight-matrix scalar count of a cell
    #[command(args_override_self = true)]
    Paramcount(ParamcountArgs),
    /// Check the reductions between variants and the kernel recursion
    #[command(args_override_self = true)]
    Equiv(EquivArgs),
    /// Impulse response of a static-gain cell as CSV
    #[command(args_override_self = true)]
    Impulse(ImpulseArgs),
    /// Write a synthetic dataset as token CSV
    #[command(args_override_self = true)]
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    DelayedRecall,
    Parity,
    Keyword,
    /// character-level language model over --data, or the bundled sonnets
    Lm,
    /// token CSV classification from --data
    Tokens,
    /// signal-matrix classification from --data
    Signal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Opt {
    Adam,
    Sgd,
}

fn variant(s: &str) -> Result<CellVariant, String> {
    s.parse().map_err(|e: rkm_core::RkmError| e.to_string())
}

#[derive(Args, Debug, Clone)]
pub struct CellArgs {
    /// cell variant
    #[arg(long, default_value = "rkm-lstm", value_parser = variant)]
    pub variant: CellVariant,
    /// input width: embedding size for tokens (default 8, or 32 for lm); must match the channel count for signals
    #[arg(long)]
    pub m: Option<usize>,
    /// hidden and memory width
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// n-gram window length
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
    /// static input gain for the linear-kernel and cnn variants
    #[arg(long, default_value_t = 0.5)]
    pub sigma_i: f64,
    /// static forget gain for the linear-kernel variants
    #[arg(long, default_value_t = 0.5)]
    pub sigma_f: f64,
    /// layer normalization of the memory cell (default on for lm)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub layer_norm: Option<bool>,
    /// train the static gains
    #[arg(long, num_args = 0..=1, default_value = "false", default_missing_value = "true")]
    pub learn_sigma: bool,
    /// Morlet-wavelet content filters
    #[arg(long, num_args = 0..=1, default_value = "false", default_missing_value = "true")]
    pub wavelet: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// task; inferred from --data when omitted (.txt lm, .bin/.sig signal, otherwise tokens)
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// delayed recall: distance between the recalled symbol and the query marker
    #[arg(long, default_value_t = 10)]
    pub lag: usize,
    /// delayed recall: symbol alphabet size
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// sequence length for delayed recall and parity
    #[arg(long, default_value_t = 30)]
    pub length: usize,
    /// generated training examples
    #[arg(long, default_value_t = 4000)]
    pub count: usize,
    /// generated validation examples
    #[arg(long, default_value_t = 1000)]
    pub val_count: usize,
    /// held-out share of a --data file
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// minibatch size; parallel streams for lm
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: Opt,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// global gradient-norm bound
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    /// stop after this many epochs without improvement
    #[arg(long)]
    pub patience: Option<usize>,
    /// stop once validation accuracy (or perplexity) reaches this value
    #[arg(long)]
    pub target: Option<f64>,
    /// truncated backpropagation window for lm
    #[arg(long, default_value_t = 35)]
    pub bptt: usize,
    /// disable rayon parallelism
    #[arg(long)]
    pub sequential: bool,
    /// seeds the cell, the head, data generation and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// checkpoint path [default: <out>/model.rkm]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// output directory for the checkpoint and report.csv
    #[arg(long, default_value = "rkm-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// seed for generated evaluation data
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// window lengths to check
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ParamcountArgs {
    #[arg(long, value_parser = variant)]
    pub variant: CellVariant,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
}

#[derive(Args, Debug, Clone)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ImpulseArgs {
    #[arg(long, default_value = "linear-kernel", value_parser = variant)]
    pub variant: CellVariant,
    #[arg(long, default_value_t = 0.5)]
    pub sigma_i: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma_f: f64,
    /// largest lag N
    #[arg(long, default_value_t = 10)]
    pub lags: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; a `.vocab` sidecar is written next to it
    #[arg(long)]
    pub out: PathBuf,
}

const SUBCOMMANDS: [&str; 7] = ["train", "eval", "gradcheck", "paramcount", "equiv", "impulse", "gen"];

/// Parse `key=value` lines into `--key=value` arguments.
pub fn config_args(text: &str) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got `{line}`", i + 1))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("config line {}: bad key `{}`", i + 1, k.trim()));
        }
        out.push(format!("--{key}={}", v.trim()).into());
    }
    Ok(out)
}

/// Splice the `--config` file's arguments in right after the subcommand so
/// that anything on the command line overrides them.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if s == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let extra = config_args(&text)?;
    let Some(at) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(argv);
    };
    let mut out = argv[..=at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}
