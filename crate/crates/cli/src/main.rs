mod analyze;
mod artifact;
mod config;
mod error;
mod stages;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posbias::corpus::Schema;
use posbias::harness::TokenOffset;
use posbias::steer::Method;

use crate::artifact::Store;
use crate::config::{CorpusEntry, RunConfig};
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "posbias", version, about = "Answer-position bias analysis and steering experiments")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "posbias-out")]
    out_dir: PathBuf,
    /// Grouping dimension for `analyze` (repeatable).
    #[arg(long, global = true)]
    group_by: Vec<String>,
    /// Comma-separated alpha values for `intervene`.
    #[arg(long, global = true, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Comma-separated layers for probing and steering.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, global = true)]
    token_offset: Option<OffsetArg>,
    /// Steering method(s), comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    method: Option<Vec<MethodArg>>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    svg: bool,
    /// Let `report` merge artifacts produced under a different config.
    #[arg(long, global = true)]
    allow_hash_mismatch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OffsetArg {
    Final,
    Penultimate,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    MeanDiff,
    Classifier,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    Task1,
    Task2,
    Task3,
    Auto,
}

#[derive(Subcommand)]
enum Command {
    /// Position-bias metrics and Fisher tests for recorded corpora.
    Analyze {
        /// Corpus files (JSON array or JSON lines).
        paths: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "auto")]
        schema: SchemaArg,
    },
    /// Generate the synthetic task splits.
    Synth,
    /// Train the toy language model.
    TrainLm,
    /// Capture hidden states for probing and steering.
    Capture,
    /// Probe sweep over layers and tokens, plus the capacity sweep.
    Probe,
    /// Build steering vectors.
    SteerBuild,
    /// Run the intervention grid.
    Intervene,
    /// Merge stage outputs into one summary.
    Report,
    /// All pipeline stages in order.
    Run,
    /// Print the resolved configuration and its hash.
    Config,
}

impl Opts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.group_by.is_empty() {
            cfg.analyze.group_by = self.group_by.clone();
        }
        if let Some(a) = &self.alpha_grid {
            cfg.intervene.alphas = Some(a.clone());
        }
        if let Some(l) = &self.layers {
            cfg.probe.layers = l.clone();
            cfg.steer.layers = l.clone();
        }
        if let Some(o) = self.token_offset {
            cfg.steer.offsets = vec![match o {
                OffsetArg::Final => TokenOffset::Final,
                OffsetArg::Penultimate => TokenOffset::Penultimate,
            }];
        }
        if let Some(m) = &self.method {
            cfg.steer.methods = m
                .iter()
                .map(|m| match m {
                    MethodArg::MeanDiff => Method::MeanDiff,
                    MethodArg::Classifier => Method::Classifier,
                    MethodArg::Random => Method::Random,
                })
                .collect();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.opts.resolve()?;
    if let Command::Analyze { paths, schema } = &cli.command {
        let schema = match schema {
            SchemaArg::Task1 => Schema::Task1,
            SchemaArg::Task2 => Schema::Task2,
            SchemaArg::Task3 => Schema::Task3,
            SchemaArg::Auto => Schema::Auto,
        };
        cfg.analyze.corpora.extend(paths.iter().map(|p| CorpusEntry {
            path: p.clone(),
            schema,
            task: None,
            model_name: None,
            condition: None,
            group_keys: Default::default(),
        }));
    }
    cfg.validate().map_err(CliError::Config)?;
    let hash = cfg.hash();
    log::info!("config hash {hash}");
    let store = Store::new(&cli.opts.out_dir, hash.clone(), cli.opts.allow_hash_mismatch);
    let svg = cli.opts.svg;
    match cli.command {
        Command::Analyze { .. } => {
            let report = analyze::analyze(&cfg, &store, svg)?;
            for f in &report.failures {
                eprintln!("failed: {}: {}", f.path.display(), f.error);
            }
            Ok(())
        }
        Command::Synth => stages::synth(&cfg, &store),
        Command::TrainLm => stages::train_lm(&cfg, &store),
        Command::Capture => stages::capture(&cfg, &store),
        Command::Probe => stages::probe(&cfg, &store, svg),
        Command::SteerBuild => stages::steer_build(&cfg, &store),
        Command::Intervene => stages::intervene(&cfg, &store, svg),
        Command::Report => stages::report(&store),
        Command::Run => {
            stages::synth(&cfg, &store)?;
            stages::train_lm(&cfg, &store)?;
            stages::capture(&cfg, &store)?;
            stages::probe(&cfg, &store, svg)?;
            stages::steer_build(&cfg, &store)?;
            stages::intervene(&cfg, &store, svg)?;
            stages::report(&store)
        }
        Command::Config => {
            print!("# config_hash = \"{hash}\"\n{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors are validation failures here, not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
