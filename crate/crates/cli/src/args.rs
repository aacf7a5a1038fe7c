//! Command-line surface and `--config` merging.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use tatl_core::data::Preset;
use tatl_core::maskops::Attribute;
use tatl_core::nnet::{MergeMode, NetConfig};
use tatl_core::training::{OptConfig, OptMode, Stages, TrainPlan};

use crate::CliError;

#[derive(Debug, Parser, Serialize)]
#[command(name = "tatl", version, about = "Transfer learning from union-mask pretext to per-attribute segmenters")]
pub struct Cli {
    /// Seed for data generation, initialization, shuffling and fold splits.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic dataset.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Run the selected training stages.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score trained weights on a dataset.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Compare initializations by their stability bound score.
    #[command(args_override_self = true)]
    Bound(BoundArgs),
    /// k-fold cross-validation of a training configuration.
    #[command(args_override_self = true)]
    Cv(CvArgs),
    /// Cross-validated sweep over crop offsets.
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Bound(_) => "bound",
            Command::Cv(_) => "cv",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    Isic2017,
    Isic2018,
    Uniform,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Isic2017 => Preset::Isic2017,
            PresetArg::Isic2018 => Preset::Isic2018,
            PresetArg::Uniform => Preset::Uniform,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "isic2018")]
    pub preset: PresetArg,
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NetArgs {
    #[arg(long, default_value = "concat")]
    pub merge: MergeMode,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
}

impl NetArgs {
    pub fn config(&self, seed: u64) -> NetConfig {
        NetConfig {
            merge_mode: self.merge,
            depth: self.depth,
            base_channels: self.base_channels,
            seed,
            ..NetConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlanArgs {
    /// Stages to run, e.g. `1,2,3` or `3`.
    #[arg(long, default_value = "1,2,3")]
    pub stages: Stages,
    /// Keep encoder weights fixed at their pretext values in stage 3.
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Margin in pixels around the predicted lesion box.
    #[arg(long, default_value_t = 40)]
    pub offset: usize,
    /// Attributes to train, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "G,M,N,P,S")]
    pub attributes: Vec<Attribute>,
    #[arg(long, default_value = "momentum")]
    pub opt: OptMode,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Step scale of the `c/t` schedule in theory mode.
    #[arg(long, default_value_t = 0.01)]
    pub c: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[command(flatten)]
    pub net: NetArgs,
}

impl PlanArgs {
    pub fn plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            stages: self.stages,
            freeze_encoder: self.freeze_encoder,
            attributes: self.attributes.clone(),
            crop_offset: self.offset,
            opt: OptConfig {
                mode: self.opt,
                learning_rate: self.lr,
                momentum: self.momentum,
                c: self.c,
                max_epochs: self.epochs,
                patience: self.patience,
                batch_size: self.batch_size,
                seed,
            },
            net: self.net.config(seed),
            ..TrainPlan::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of a `train` run.
    #[arg(long)]
    pub weights_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Second `train` output (usually the other merge mode); predictions
    /// average both networks' probabilities.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub attribute: Attribute,
    /// Candidate as `name=weights-file`; repeat for each candidate.
    #[arg(long = "init", required = true, action = ArgAction::Append)]
    pub inits: Vec<String>,
    #[arg(long, default_value_t = 0.01)]
    pub c: f64,
    #[arg(long, default_value_t = 20)]
    pub power_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub power_tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub fd_step: f64,
    /// Use only the first this many samples.
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,20,40,60")]
    pub offsets: Vec<usize>,
    #[command(flatten)]
    pub plan: PlanArgs,
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn flag_values(key: &str, value: &Value, append: bool) -> Result<Vec<OsString>, CliError> {
    let flag = OsString::from(format!("--{key}"));
    let scalar = |v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(CliError::Usage(format!("config key `{key}`: unsupported value {other}"))),
    };
    Ok(match value {
        Value::Bool(true) => vec![flag],
        Value::Bool(false) | Value::Null => vec![],
        Value::Array(items) if append => {
            let mut out = Vec::new();
            for v in items {
                out.push(flag.clone());
                out.push(scalar(v)?.into());
            }
            out
        }
        Value::Array(items) => {
            let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
            vec![flag, joined.into()]
        }
        v => vec![flag, scalar(v)?.into()],
    })
}

/// Inserts flags from the `--config` file right after the subcommand name,
/// skipping any flag also given on the command line.
/// Keys name flags without the leading dashes (`batch-size` or `batch_size`).
/// Keys that belong only to other subcommands are ignored.
pub fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config { path: path.clone(), reason: e.to_string() })?;
    let Value::Object(entries) = serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config { path: path.clone(), reason: e.to_string() })?
    else {
        return Err(CliError::Config { path, reason: "expected a JSON object".into() });
    };
    let root = Cli::command();
    let names: Vec<String> = root.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let Some(pos) = argv.iter().position(|a| names.iter().any(|n| a.to_str() == Some(n.as_str()))) else {
        return Ok(argv);
    };
    let sub = root
        .find_subcommand(argv[pos].to_str().unwrap_or_default())
        .expect("position found by name");
    let long_of = |a: &clap::Arg| a.get_long().map(str::to_string);
    let mut inserted = Vec::new();
    for (raw_key, value) in &entries {
        let key = &raw_key.replace('_', "-");
        if key == "config" {
            return Err(CliError::Usage("config files cannot nest `config`".into()));
        }
        let flag = format!("--{key}");
        let explicit = argv.iter().filter_map(|a| a.to_str()).any(|a| {
            a == flag || a.strip_prefix(flag.as_str()).is_some_and(|rest| rest.starts_with('='))
        });
        let own = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| long_of(a).as_deref() == Some(key));
        match own {
            Some(_) if explicit => {}
            Some(arg) => {
                let append = matches!(arg.get_action(), ArgAction::Append);
                inserted.extend(flag_values(key, value, append)?);
            }
            None => {
                let known = root
                    .get_subcommands()
                    .flat_map(|c| c.get_arguments())
                    .any(|a| long_of(a).as_deref() == Some(key));
                if !known {
                    return Err(CliError::Usage(format!("unknown config key `{key}` in {}", path.display())));
                }
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(inserted);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
