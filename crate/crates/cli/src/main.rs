use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graph_words::cdk::DistanceFlavor;
use graph_words::cluster::Linkage;
use graph_words::error::{Error, Result};
use graph_words::graph::LayerSpec;
use graph_words::pipeline::{self, PipelineConfig, SplitSource};
use graph_words::retrieval::EvalReport;
use graph_words::signature::{Metric, Normalization};
use serde::de::{DeserializeOwned, IntoDeserializer};

/// Nested graph words: graph features, kernel dictionaries and retrieval evaluation.
#[derive(Debug, Parser)]
#[command(name = "graph-words", version)]
struct Cli {
    /// JSON or TOML config file; flags below override its fields.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the bundled synthetic benchmark as a dataset.
    Synth {
        /// Target directory (default: directory of the configured manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build graph features for every image.
    Extract,
    /// Build codebooks from the training features.
    BuildDict {
        /// Only this layer (default: all).
        #[arg(long)]
        layer: Option<usize>,
        /// Only this size (default: every configured size).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Compute signatures for every configured dictionary size.
    Signatures,
    /// Evaluate every (size, layer subset) and write the reports.
    Evaluate,
    /// Extract, build-dict, signatures and evaluate in one go.
    Run,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    T::deserialize(s.into_deserializer()).map_err(|e: serde::de::value::Error| e.to_string())
}

fn parse_layers(s: &str) -> std::result::Result<LayerSpec, String> {
    let counts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    LayerSpec::new(counts).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    n_seeds: Option<usize>,
    /// Neighbour counts per layer, e.g. 0,3,6,9.
    #[arg(long, global = true, value_parser = parse_layers)]
    layers: Option<LayerSpec>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// squared_l2 or l2.
    #[arg(long, global = true, value_parser = parse_enum::<DistanceFlavor>)]
    distance_flavor: Option<DistanceFlavor>,
    /// single, complete or average.
    #[arg(long, global = true, value_parser = parse_enum::<Linkage>)]
    linkage: Option<Linkage>,
    #[arg(long, global = true)]
    first_pass_k: Option<usize>,
    /// Comma-separated dictionary sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    dict_sizes: Option<Vec<usize>>,
    /// raw_counts or l1_normalized.
    #[arg(long, global = true, value_parser = parse_enum::<Normalization>)]
    normalization: Option<Normalization>,
    /// l1, l2 or hamming.
    #[arg(long, global = true, value_parser = parse_enum::<Metric>)]
    metric: Option<Metric>,
    /// resplit or manifest.
    #[arg(long, global = true, value_parser = parse_enum::<SplitSource>)]
    split_source: Option<SplitSource>,
    #[arg(long, global = true)]
    split_fraction: Option<f64>,
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
}

impl Overrides {
    fn apply(self, c: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        set!(
            manifest,
            output_dir,
            n_seeds,
            layers,
            alpha,
            beta,
            iterations,
            distance_flavor,
            linkage,
            first_pass_k,
            dict_sizes,
            normalization,
            metric,
            split_source,
            split_fraction,
            rng_seed
        );
    }
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        let layers: Vec<String> = r.config.layers.iter().map(usize::to_string).collect();
        println!(
            "size {:>5}  layers {:<8}  mean MAP {:.4}",
            r.config.dict_size.map_or("-".into(), |s| s.to_string()),
            layers.join("+"),
            r.overall_mean
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => pipeline::load_config(path)?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut config);
    config.validate()?;

    match cli.command {
        Command::Synth { out } => {
            let path = pipeline::cmd_synth(&config, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::Extract => {
            let total = pipeline::cmd_extract(&config)?;
            println!("{total} features written to {}", config.output_dir.join("features").display());
        }
        Command::BuildDict { layer, size } => {
            for path in pipeline::cmd_build_dict(&config, layer, size)? {
                println!("{}", path.display());
            }
        }
        Command::Signatures => {
            for path in pipeline::cmd_signatures(&config)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate => print_reports(&pipeline::cmd_evaluate(&config)?),
        Command::Run => print_reports(&pipeline::cmd_run(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(Error::exit_code(&e)).unwrap_or(2))
        }
    }
}
