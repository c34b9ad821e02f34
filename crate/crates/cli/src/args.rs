//! Command-line and config-file options.
//!
//! Every subcommand's options double as a flat TOML document whose keys are
//! the flag names. Values are layered: built-in defaults, then `--config`,
//! then flags given on the command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "protoseg", version, about = "Few-shot segmentation with prototype alignment")]
pub struct Cli {
    /// TOML file with default values for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Train an encoder episodically.
    Train(TrainArgs),
    /// Measure IoU of a checkpoint over sampled episodes.
    Eval(EvalArgs),
    /// Segment one query image from annotated supports.
    Segment(SegmentArgs),
    /// Merge evaluation reports into one table.
    Report(ReportArgs),
}

/// Layered option sets.
pub trait Options: Serialize + DeserializeOwned + Sized {
    fn defaults() -> Self;
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Number of samples [default: 200]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Image side length [default: 224]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

impl Options for GenerateArgs {
    fn defaults() -> Self {
        Self {
            out: None,
            count: Some(200),
            seed: Some(0),
            size: Some(224),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Encoder preset: tiny, vgg16_like, vgg19_like, res18_like or res50_like [default: vgg19_like]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Foreground classes per episode [default: 2]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub way: Option<usize>,
    /// Supports per class [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shot: Option<usize>,
    /// Queries per class [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    /// SGD steps, one episode each [default: 2000]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Seed for initialisation and episode sampling [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Loss curve CSV path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    /// Disable the prototype alignment loss [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_par: Option<bool>,
    /// Cosine similarity multiplier [default: 20]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Momentum [default: 0.9]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    /// Iterations between logged loss rows [default: 10]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
}

impl Options for TrainArgs {
    fn defaults() -> Self {
        Self {
            data: None,
            preset: Some("vgg19_like".into()),
            way: Some(2),
            shot: Some(1),
            queries: Some(1),
            iterations: Some(2000),
            seed: Some(0),
            out: None,
            log: None,
            no_par: Some(false),
            alpha: Some(20.0),
            lr: Some(1e-3),
            momentum: Some(0.9),
            log_every: Some(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// Foreground classes per episode [default: 2]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub way: Option<usize>,
    /// Supports per class [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shot: Option<usize>,
    /// Queries per class [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    /// Evaluation episodes [default: 200]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    /// Episode sampling seed [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Report CSV path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Cosine similarity multiplier [default: 20]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Method name in the report [default: derived from the encoder preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

impl Options for EvalArgs {
    fn defaults() -> Self {
        Self {
            data: None,
            ckpt: None,
            way: Some(2),
            shot: Some(1),
            queries: Some(1),
            episodes: Some(200),
            seed: Some(0),
            report: None,
            alpha: Some(20.0),
            method: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SegmentArgs {
    /// Checkpoint path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// Support images.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_images: Option<Vec<PathBuf>>,
    /// Support masks, one per support image.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_masks: Option<Vec<PathBuf>>,
    /// Query image.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<PathBuf>,
    /// Predicted indexed mask PNG.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Overlay PNG [default: <out stem>_overlay.png]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlay: Option<PathBuf>,
    /// Foreground classes [default: highest label in the support masks]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub way: Option<usize>,
    /// Cosine similarity multiplier [default: 20]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Options for SegmentArgs {
    fn defaults() -> Self {
        Self {
            ckpt: None,
            support_images: None,
            support_masks: None,
            query: None,
            out: None,
            overlay: None,
            way: None,
            alpha: Some(20.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ReportArgs {
    /// Report CSVs written by `eval`.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<PathBuf>>,
    /// Output table: Markdown when the extension is `.md`, CSV otherwise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Options for ReportArgs {
    fn defaults() -> Self {
        Self {
            inputs: None,
            out: None,
        }
    }
}

fn table_of<T: Serialize>(value: &T) -> toml::Table {
    toml::Table::try_from(value).expect("option structs serialize to tables")
}

/// Defaults overlaid by the config file, overlaid by explicit flags.
pub fn resolve<T: Options>(flags: &T, config: Option<&Path>) -> Result<T, CliError> {
    let mut table = table_of(&T::defaults());
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        table.extend(file);
    }
    table.extend(table_of(flags));
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("bad configuration: {}", e.message())))
}

/// TOML rendering of resolved options, readable back through `--config`.
pub fn dump<T: Serialize>(options: &T) -> String {
    toml::to_string(options).expect("option structs serialize")
}

pub fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}
