//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use procnet_core::evalkit::CategoryAggregation;

use crate::commands::{corpus_stats_report, eval_report, EvalInputs, Pipeline};
use crate::config::{Overrides, PipelineConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "procnet",
    version,
    about = "Personalized process networks from therapy transcripts"
)]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for example sampling and explanation choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Keep clustering violations instead of repairing them.
    #[arg(long, global = true)]
    pub no_repair: bool,
    /// Link ensemble: prompt, model or temperature.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// In-context examples per detection prompt.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Response cache directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Route every backend to the scripted mock.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Output directory; overrides paths.output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Aggregation {
    Weighted,
    Mean,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage 1: annotate the working phase of a session.
    Detect { session: PathBuf },
    /// Stage 2: group detected processes into themes.
    Cluster {
        session: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Stage 3: infer edges between themes by ensemble vote.
    Link { clustering: PathBuf },
    /// Assemble the network and its DOT rendering.
    Network { clustering: PathBuf, edges: PathBuf },
    /// Single-prompt comparison network.
    Baseline {
        session: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// All stages for one or more sessions, with a manifest per session.
    RunAll {
        #[arg(required = true)]
        sessions: Vec<PathBuf>,
    },
    /// Evaluation tables from predictions, gold labels, ratings and preferences.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Gold annotations; repeat once per rater.
        #[arg(long)]
        gold: Vec<PathBuf>,
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        preferences: Option<PathBuf>,
        #[arg(long, requires = "clustering")]
        network: Option<PathBuf>,
        #[arg(long, requires = "network")]
        clustering: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "weighted")]
        aggregation: Aggregation,
        /// Field delimiter of the tabular inputs.
        #[arg(long, default_value = ",")]
        delimiter: char,
    },
    /// Word, utterance and duration totals for a directory of sessions.
    Stats { corpus: PathBuf },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            no_repair: self.no_repair,
            strategy: self.strategy.clone(),
            k: self.k,
            cache: self.cache.clone(),
            mock: self.mock,
            output: self.out.clone(),
        }
    }

    fn pipeline(&self) -> Result<Pipeline, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::validation("this command needs --config", Some("--config".into())))?;
        Pipeline::new(PipelineConfig::load(path, &self.overrides())?)
    }
}

fn listing(files: &[PathBuf]) -> String {
    files.iter().map(|f| format!("{}\n", f.display())).collect()
}

/// Runs a parsed command and returns what goes to stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Detect { session } => {
            let p = cli.pipeline()?;
            Ok(listing(&p.detect(&p.gateway()?, session, p.out_dir())?.files))
        }
        Command::Cluster { session, annotations } => {
            let p = cli.pipeline()?;
            Ok(listing(
                &p.cluster(&p.gateway()?, annotations, session, p.out_dir())?.files,
            ))
        }
        Command::Link { clustering } => {
            let p = cli.pipeline()?;
            Ok(listing(&p.link(&p.gateway()?, clustering, p.out_dir())?.files))
        }
        Command::Network { clustering, edges } => {
            let p = cli.pipeline()?;
            Ok(listing(&p.network(clustering, edges, p.out_dir())?.files))
        }
        Command::Baseline { session, annotations } => {
            let p = cli.pipeline()?;
            Ok(listing(
                &p.baseline(&p.gateway()?, session, annotations, p.out_dir())?.files,
            ))
        }
        Command::RunAll { sessions } => {
            let p = cli.pipeline()?;
            if let [one] = sessions.as_slice() {
                let m = p.run_all(one, p.out_dir())?;
                return Ok(m.to_json());
            }
            let mut out = String::new();
            let mut first_err = None;
            for (path, r) in p.run_many(sessions, p.out_dir()) {
                match r {
                    Ok(m) => out.push_str(&format!("{}\tok\t{} outputs\n", path.display(), m.outputs.len())),
                    Err(e) => {
                        out.push_str(&format!("{}\terror\t{}\n", path.display(), e));
                        first_err.get_or_insert(e);
                    }
                }
            }
            match first_err {
                Some(e) => {
                    print!("{out}");
                    Err(e)
                }
                None => Ok(out),
            }
        }
        Command::Eval {
            predictions,
            gold,
            ratings,
            preferences,
            network,
            clustering,
            aggregation,
            delimiter,
        } => {
            if !delimiter.is_ascii() {
                return Err(CliError::validation(
                    "--delimiter must be a single ASCII character",
                    Some("--delimiter".into()),
                ));
            }
            eval_report(&EvalInputs {
                predictions: predictions.clone(),
                gold: gold.clone(),
                ratings: ratings.clone(),
                preferences: preferences.clone(),
                network: network.clone(),
                clustering: clustering.clone(),
                aggregation: match aggregation {
                    Aggregation::Weighted => CategoryAggregation::Weighted,
                    Aggregation::Mean => CategoryAggregation::Mean,
                },
                delimiter: *delimiter as u8,
            })
        }
        Command::Stats { corpus } => corpus_stats_report(corpus),
    }
}
