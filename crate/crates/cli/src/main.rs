//! `mc`: command-line front end to the project service.

mod serve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use mc_core::active_learning::{Sampler, DEFAULT_STRATA};
use mc_core::miner::{DEFAULT_MUTATION_ROUNDS, DEFAULT_PER_QUERY_K};
use mc_core::service::config::ServiceConfig;
use mc_core::service::demo::{run_demo, DemoOptions};
use mc_core::service::{Api, ErrorCode, Request, Response, ValidationLabel};
use mc_core::trainer::TrainConfig;

#[derive(Parser)]
#[command(name = "mc", version, about = "Build image classifiers for subjective concepts")]
struct Cli {
    /// Service configuration file (TOML). MC_* variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store root; overrides MC_HOME and the config file.
    #[arg(long, global = true)]
    home: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Stratified,
    Margin,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a corpus file under a name.
    Ingest {
        #[arg(long)]
        name: String,
        file: PathBuf,
    },
    /// List projects.
    List,
    /// Create a project and initialize its concept.
    Create {
        #[arg(long)]
        name: String,
        #[arg(long)]
        corpus: String,
        #[arg(long)]
        description: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Show a project summary.
    Show {
        #[arg(long)]
        project: String,
    },
    /// Replace the concept description and re-extract attributes.
    Describe {
        #[arg(long)]
        project: String,
        text: String,
    },
    /// Retrieve candidates with generated and mutated queries.
    Mine {
        #[arg(long)]
        project: String,
        #[arg(long, default_value_t = DEFAULT_PER_QUERY_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_MUTATION_ROUNDS)]
        rounds: usize,
    },
    /// Candidates awaiting a validation label.
    Queue {
        #[arg(long)]
        project: String,
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Submit validation labels, from a JSON lines file of
    /// `{"image_id": .., "positive": ..}` and/or id lists.
    Label {
        #[arg(long)]
        project: String,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        positive: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        negative: Vec<String>,
    },
    /// Score every annotator strategy on the validation labels.
    SelectStrategy {
        #[arg(long)]
        project: String,
    },
    /// Label mined candidates with the selected strategy.
    Annotate {
        #[arg(long)]
        project: String,
        #[arg(long)]
        n: usize,
    },
    /// Page through stored annotations.
    Annotations {
        #[arg(long)]
        project: String,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = 50)]
        limit: usize,
    },
    /// Train the student on the labeled pool.
    Train {
        #[arg(long)]
        project: String,
        /// Training configuration as a JSON file.
        #[arg(long)]
        train_config: Option<PathBuf>,
    },
    /// Run one active-learning round.
    AlRound {
        #[arg(long)]
        project: String,
        #[arg(long, value_enum, default_value_t = SamplerArg::Stratified)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_STRATA)]
        strata: usize,
    },
    /// Round history, strategy scores and model history.
    Metrics {
        #[arg(long)]
        project: String,
    },
    /// Write the active model file.
    ExportModel {
        #[arg(long)]
        project: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Import a model file and make it active.
    ImportModel {
        #[arg(long)]
        project: String,
        file: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Run the synthetic end-to-end pipeline with mock backends.
    Demo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DemoOptions::default().records)]
        records: usize,
        #[arg(long, default_value_t = DemoOptions::default().rounds)]
        rounds: usize,
    },
}

fn load_config(cli: &Cli) -> Result<ServiceConfig> {
    let mut config = match &cli.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    if let Some(home) = &cli.home {
        config.home = Some(home.clone());
    }
    Ok(config)
}

fn read_labels(path: &Path) -> Result<Vec<ValidationLabel>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn request(command: &Command) -> Result<Request> {
    let project = |p: &String| p.clone();
    Ok(match command {
        Command::Ingest { name, file } => Request::IngestCorpus { name: name.clone(), path: file.clone() },
        Command::List => Request::ListProjects,
        Command::Create { name, corpus, description, seed } => Request::CreateProject {
            name: name.clone(),
            description: description.clone(),
            corpus: corpus.clone(),
            seed: *seed,
        },
        Command::Show { project: p } => Request::GetProject { project: project(p) },
        Command::Describe { project: p, text } => Request::SetDescription { project: project(p), text: text.clone() },
        Command::Mine { project: p, k, rounds } => {
            Request::RunMining { project: project(p), per_query_k: *k, mutation_rounds: *rounds }
        }
        Command::Queue { project: p, n } => Request::ValidationQueue { project: project(p), n: *n },
        Command::Label { project: p, file, positive, negative } => {
            let mut labels = match file {
                Some(f) => read_labels(f)?,
                None => Vec::new(),
            };
            labels.extend(positive.iter().map(|id| ValidationLabel { image_id: id.clone(), positive: true }));
            labels.extend(negative.iter().map(|id| ValidationLabel { image_id: id.clone(), positive: false }));
            if labels.is_empty() {
                bail!("no labels given: use --file, --positive or --negative");
            }
            Request::SubmitValidationLabels { project: project(p), labels }
        }
        Command::SelectStrategy { project: p } => Request::RunStrategySelection { project: project(p) },
        Command::Annotate { project: p, n } => Request::RunTeacherAnnotation { project: project(p), n: *n },
        Command::Annotations { project: p, offset, limit } => {
            Request::GetAnnotations { project: project(p), offset: *offset, limit: *limit }
        }
        Command::Train { project: p, train_config } => {
            let config: Option<TrainConfig> = match train_config {
                Some(f) => Some(
                    serde_json::from_str(&std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?)
                        .with_context(|| format!("parsing {}", f.display()))?,
                ),
                None => None,
            };
            Request::TrainStudent { project: project(p), config }
        }
        Command::AlRound { project: p, sampler, n, strata } => Request::RunAlRound {
            project: project(p),
            sampler: match sampler {
                SamplerArg::Stratified => Sampler::Stratified,
                SamplerArg::Margin => Sampler::Margin,
            },
            n: *n,
            strata: *strata,
        },
        Command::Metrics { project: p } => Request::GetMetrics { project: project(p) },
        Command::ExportModel { project: p, .. } => Request::ExportModel { project: project(p) },
        Command::ImportModel { project: p, file } => {
            let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
            Request::ImportModel { project: project(p), model_hex: hex::encode(bytes) }
        }
        Command::Serve { .. } | Command::Demo { .. } => unreachable!("handled before dispatch"),
    })
}

/// Table view: any tab-separated tables in the result, else the result as
/// indented JSON.
fn render_table(result: &Value) -> String {
    let tables: Vec<&str> = ["stats", "table", "strategy_table", "rounds_table"]
        .iter()
        .filter_map(|k| result.get(*k).and_then(Value::as_str))
        .collect();
    if tables.is_empty() {
        serde_json::to_string_pretty(result).expect("json value") + "\n"
    } else {
        tables.join("\n")
    }
}

fn exit_code(code: ErrorCode) -> u8 {
    match code {
        ErrorCode::InvalidInput => 2,
        ErrorCode::NotFound => 3,
        ErrorCode::Precondition => 4,
        ErrorCode::Conflict => 5,
        ErrorCode::Backend => 6,
        ErrorCode::Storage | ErrorCode::Internal => 1,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli)?;
    if let Command::Demo { seed, records, rounds } = cli.command {
        let home = config.home()?;
        let opts = DemoOptions { seed, records, rounds, ..Default::default() };
        let report = run_demo(home, &opts, None)?;
        match cli.format {
            Format::Table => print!("{}", report.render()),
            Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        }
        return Ok(ExitCode::SUCCESS);
    }
    let api = Api::new(config.home()?, config.gateway()?);
    if let Command::Serve { addr } = &cli.command {
        serve::serve(api, addr)?;
        return Ok(ExitCode::SUCCESS);
    }
    let response: Response = api.handle(request(&cli.command)?);
    if cli.format == Format::Json {
        println!("{}", serde_json::to_string_pretty(&response)?);
    }
    match response.into_result() {
        Ok(result) => {
            if let Command::ExportModel { out, .. } = &cli.command {
                let hex = result["model_hex"].as_str().context("export returned no model")?;
                std::fs::write(out, hex::decode(hex)?).with_context(|| format!("writing {}", out.display()))?;
            }
            if cli.format == Format::Table {
                match &cli.command {
                    Command::ExportModel { out, .. } => {
                        println!("wrote model {} to {}", result["model_ref"].as_str().unwrap_or("-"), out.display())
                    }
                    _ => print!("{}", render_table(&result)),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error ({:?}): {}", e.code, e.message);
            Ok(ExitCode::from(exit_code(e.code)))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
