//! `iotprint` command-line front end.
//!
//! Stages: `make-fixtures` → `preprocess` → `experiment` / `kfold` → `predict`.
//! Every stage writes a JSON manifest next to its outputs.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iotprint::dataset::{DatasetError, Scheme, DEFAULT_MIN_SESSIONS};
use iotprint::eval::DEFAULT_GRID_STEPS;
use iotprint::nn::{AdamConfig, NnError, TrainConfig};
use iotprint::transform::Direction;

pub mod cmd;
pub mod corpus;
pub mod manifest;
pub mod table;

/// Epoch budget when `--epochs` is absent; scheme 5 searches a little longer.
pub const DEFAULT_EPOCHS: usize = 25;
pub const DEFAULT_EPOCHS_UNKNOWN: usize = 30;

#[derive(Debug, Parser)]
#[command(name = "iotprint", version, about = "IoT device fingerprinting from TCP payload images")]
pub struct Cli {
    /// Only print warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn pcap files into per-device 784-byte payload corpora.
    Preprocess(PreprocessArgs),
    /// Label, train, select the epoch, retrain, evaluate.
    Experiment(ExperimentArgs),
    /// Classify the sessions of a pcap file or raw payload files.
    Predict(PredictArgs),
    /// Write synthetic pcap captures for testing.
    MakeFixtures(FixtureArgs),
    /// Stratified k-fold cross-validation (schemes 1 to 4).
    Kfold(KfoldArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    /// Payloads from both directions, in capture order.
    Both,
    /// Only the initiating side's payloads.
    Initiator,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Both => Direction::Both,
            DirectionArg::Initiator => Direction::InitiatorOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// pcap files, or directories whose `*.pcap` files are read in name order.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Tab-separated `MAC  device name  iot|non-iot` lines.
    #[arg(long)]
    pub mac_map: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Devices need strictly more sessions than this to be used downstream.
    #[arg(long, default_value_t = DEFAULT_MIN_SESSIONS)]
    pub min_sessions: usize,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    pub direction: DirectionArg,
    /// Also write every kept payload as a raw `.bin` file under this directory.
    #[arg(long)]
    pub dump_bins: Option<PathBuf>,
}

/// Hyperparameters. Defaults:
///
/// | flag | default |
/// |---|---|
/// | --epochs | 25 (30 for scheme 5) |
/// | --batch-size | 100 |
/// | --hidden | 784 |
/// | --lr | 0.001 |
/// | --beta1 / --beta2 / --adam-epsilon | 0.9 / 0.999 / 1e-7 |
/// | --init-std | 0.05 |
/// | --seed | 0, or `IOTPRINT_SEED` |
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Seeds the split, the initial weights and the batch order.
    #[arg(long, env = "IOTPRINT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Epochs to search (experiment) or to train (kfold).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Hidden layer width.
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    pub hidden: usize,
    #[arg(long, default_value_t = AdamConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = AdamConfig::default().beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = AdamConfig::default().beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = AdamConfig::default().epsilon)]
    pub adam_epsilon: f64,
    /// Standard deviation of the normal weight initialisation.
    #[arg(long, default_value_t = TrainConfig::default().init_std)]
    pub init_std: f64,
}

impl TrainArgs {
    pub fn config(&self, scheme: &Scheme) -> TrainConfig {
        let default_epochs = match scheme {
            Scheme::UnknownDetection { .. } => DEFAULT_EPOCHS_UNKNOWN,
            _ => DEFAULT_EPOCHS,
        };
        TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size,
            hidden: self.hidden,
            init_std: self.init_std,
            adam: AdamConfig {
                learning_rate: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.adam_epsilon,
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SchemeArgs {
    /// 1 IoT vs non-IoT, 2 device vs other IoT, 3 device vs all,
    /// 4 multiclass, 5 unknown-device detection.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub scheme: u8,
    /// Target device for schemes 2 and 3 (`all` runs every IoT device).
    #[arg(long)]
    pub target: Option<String>,
    /// Withheld device for scheme 5 (`all` runs every IoT device).
    #[arg(long)]
    pub exclude: Option<String>,
}

/// A device named on the command line, or every IoT device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceChoice {
    None,
    One(String),
    AllIot,
}

impl SchemeArgs {
    pub fn device_choice(&self) -> Result<DeviceChoice, UsageError> {
        let pick = |v: &Option<String>, flag: &str| match v.as_deref() {
            None => Err(UsageError(format!("scheme {} needs --{flag}", self.scheme))),
            Some("all") => Ok(DeviceChoice::AllIot),
            Some(name) => Ok(DeviceChoice::One(name.to_string())),
        };
        match self.scheme {
            1 | 4 => {
                if self.target.is_some() || self.exclude.is_some() {
                    return Err(UsageError(format!("scheme {} takes neither --target nor --exclude", self.scheme)));
                }
                Ok(DeviceChoice::None)
            }
            2 | 3 => {
                if self.exclude.is_some() {
                    return Err(UsageError("--exclude only applies to scheme 5".into()));
                }
                pick(&self.target, "target")
            }
            _ => {
                if self.target.is_some() {
                    return Err(UsageError("--target only applies to schemes 2 and 3".into()));
                }
                pick(&self.exclude, "exclude")
            }
        }
    }

    pub fn scheme_for(&self, device: Option<&str>) -> Scheme {
        let name = || device.expect("device-specific scheme").to_string();
        match self.scheme {
            1 => Scheme::IotVsNonIot,
            2 => Scheme::OneVsRestIot { target: name() },
            3 => Scheme::OneVsAll { target: name() },
            4 => Scheme::Multiclass,
            _ => Scheme::UnknownDetection { excluded: name() },
        }
    }
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = DEFAULT_MIN_SESSIONS)]
    pub min_sessions: usize,
    /// Number of equal steps in the 0..1 threshold grid (scheme 5).
    #[arg(long, default_value_t = DEFAULT_GRID_STEPS as u32, value_parser = clap::value_parser!(u32).range(1..=100_000))]
    pub threshold_grid: u32,
    /// Also write the labeled train/validation/test IDX files.
    #[arg(long)]
    pub write_split: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file written by `experiment` (`model.iotp`).
    #[arg(long)]
    pub model: PathBuf,
    /// A pcap file, a raw payload `.bin` file, or a directory of `.bin` files.
    pub input: PathBuf,
    /// Overrides the threshold stored with the model.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    pub direction: DirectionArg,
    /// Also write the verdicts as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    /// TOML fixture spec; without it a four-device desk-scale corpus is written.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Sessions per device for the built-in corpus.
    #[arg(long, default_value_t = 1200)]
    pub sessions: usize,
    /// Seed for the built-in corpus (a spec file carries its own).
    #[arg(long, env = "IOTPRINT_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct KfoldArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, short, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_SESSIONS)]
    pub min_sessions: usize,
}

/// Bad flags or flag combinations discovered after parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// 2 for argument problems (including naming a device the corpus lacks),
/// 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            if matches!(
                e,
                DatasetError::UnknownDevice { .. }
                    | DatasetError::NotIot { .. }
                    | DatasetError::SchemeNotSupported { .. }
                    | DatasetError::InvalidFoldCount { .. }
            ) {
                return EXIT_USAGE;
            }
        }
        if let Some(NnError::InvalidConfig(_)) = cause.downcast_ref::<NnError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_FAILURE
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess(a) => cmd::preprocess::run(&a),
        Command::Experiment(a) => cmd::experiment::run(&a),
        Command::Predict(a) => cmd::predict::run(&a),
        Command::MakeFixtures(a) => cmd::fixtures::run(&a),
        Command::Kfold(a) => cmd::kfold::run(&a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn scheme_flags() {
        let s = |scheme, target: Option<&str>, exclude: Option<&str>| SchemeArgs {
            scheme,
            target: target.map(Into::into),
            exclude: exclude.map(Into::into),
        };
        assert_eq!(s(1, None, None).device_choice(), Ok(DeviceChoice::None));
        assert!(s(1, Some("x"), None).device_choice().is_err());
        assert!(s(2, None, None).device_choice().is_err());
        assert_eq!(s(3, Some("all"), None).device_choice(), Ok(DeviceChoice::AllIot));
        assert!(s(5, Some("x"), None).device_choice().is_err());
        assert_eq!(s(5, None, Some("Cam")).device_choice(), Ok(DeviceChoice::One("Cam".into())));
        assert_eq!(
            s(5, None, Some("Cam")).scheme_for(Some("Cam")),
            Scheme::UnknownDetection { excluded: "Cam".into() }
        );
    }

    #[test]
    fn epoch_defaults_depend_on_scheme() {
        let cli = Cli::try_parse_from(["iotprint", "kfold", "--corpus", "c", "-o", "o", "--scheme", "1"]).unwrap();
        let Command::Kfold(a) = cli.command else { panic!() };
        assert_eq!(a.train.config(&Scheme::Multiclass).epochs, DEFAULT_EPOCHS);
        let c = a.train.config(&Scheme::UnknownDetection { excluded: "x".into() });
        assert_eq!(c.epochs, DEFAULT_EPOCHS_UNKNOWN);
        assert_eq!(c.batch_size, 100);
        assert_eq!(c.hidden, 784);
        assert_eq!(c.adam, AdamConfig::default());
    }

    #[test]
    fn usage_errors_map_to_two() {
        let e = anyhow::Error::new(DatasetError::UnknownDevice { name: "x".into() }).context("loading");
        assert_eq!(exit_code(&e), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow::anyhow!("disk full")), EXIT_FAILURE);
    }
}
