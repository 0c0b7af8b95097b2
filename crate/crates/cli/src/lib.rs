//! Command-line entry points and the HTTP prompting service.

pub mod commands;
pub mod raster;
pub mod server;

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use octseg::data::Shape3;
use octseg::prompts::Connectivity;
use octseg::Regimen;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] octseg::Error),

    #[error("config file: {0}")]
    Yaml(#[from] serde_yaml::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Yaml(_) => "config",
            CliError::Image(_) => "image",
            CliError::Usage(_) => "usage",
        }
    }

    /// One JSON object on one line, for stderr.
    pub fn error_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "octseg", version, about = "Promptable OCT fluid segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Fine-tune a model on the training split of a dataset.
    Train(TrainArgs),
    /// Score predicted masks against one or two reference annotations.
    Eval(EvalArgs),
    /// Print simulated clicks for one class of a mask slice as JSON.
    SimulatePrompts(SimulateArgs),
    /// Segment a volume and write per-slice masks and overlays.
    Predict(PredictArgs),
    /// Run the HTTP prompting service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Volume shape as DEPTHxHEIGHTxWIDTH.
    #[arg(long, default_value = "16x256x256", value_parser = parse_shape)]
    pub shape: Shape3,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write a second annotation per volume.
    #[arg(long)]
    pub dual_annotation: bool,
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimenArg {
    #[value(name = "decoder_only")]
    DecoderOnly,
    #[value(name = "lora_samed")]
    LoraSamed,
}

impl From<RegimenArg> for Regimen {
    fn from(r: RegimenArg) -> Self {
        match r {
            RegimenArg::DecoderOnly => Regimen::DecoderOnly,
            RegimenArg::LoraSamed => Regimen::LoraSamed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// YAML file with `model`, `train`, `lora` and `data` sections.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub regimen: RegimenArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root; overrides `data` from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted mask files.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub ref_a: PathBuf,
    /// Second annotation; only voxels where both agree are scored.
    #[arg(long)]
    pub ref_b: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Name written to the `experiment` column.
    #[arg(long, default_value = "prediction")]
    pub experiment: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// A mask file, or a PNG whose pixel values are class ids.
    #[arg(long)]
    pub mask: PathBuf,
    /// Slice of a volume mask; ignored for PNG input.
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
    #[arg(long = "class")]
    pub class_id: u8,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "8", value_parser = parse_connectivity)]
    pub connectivity: Connectivity,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter archive applied on top of the checkpoint.
    #[arg(long)]
    pub lora: Option<PathBuf>,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Simulated clicks per class and slice, taken from `--reference`.
    #[arg(long, requires = "reference")]
    pub clicks: Option<usize>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "8", value_parser = parse_connectivity)]
    pub connectivity: Connectivity,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "OCTSEG_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Image embeddings kept per session.
    #[arg(long, default_value_t = octseg::serving::DEFAULT_CACHE_CAPACITY)]
    pub cache_size: usize,
}

pub fn parse_shape(s: &str) -> Result<Shape3, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("`{s}`: {e}"))?;
    match dims[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok(Shape3::new(d, h, w)),
        _ => Err(format!("`{s}`: expected DEPTHxHEIGHTxWIDTH with positive sizes")),
    }
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    let n: u8 = s.parse().map_err(|_| format!("`{s}` is not 4 or 8"))?;
    Connectivity::from_number(n).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SimulatePrompts(a) => commands::simulate_prompts(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Serve(a) => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(server::serve(SocketAddr::new(a.host, a.port), a.cache_size))
        }
    }
}
