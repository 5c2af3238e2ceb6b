//! Command-line driver. Every subcommand resolves a [`PipelineConfig`]
//! (defaults, then `--config` file, then flag overrides), runs one or more
//! stages, and prints a one-line summary per stage. Exit codes: 0 success,
//! 2 invalid setup, 3 missing stage dependency, 4 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trieval::config::{ConfigError, PipelineConfig};
use trieval::pipeline::{run_decode, run_pipeline, run_stage, PipelineError, Stage, StageSummary};

#[derive(Parser)]
#[command(
    name = "trieval",
    version,
    about = "Trie-constrained generative retrieval pipeline"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Key=value config file; flags below override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed, recorded into every artifact header.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Stage selector for train, train-rl, decode, and pipeline.
    #[arg(long, global = true, value_name = "STAGE")]
    stage: Option<String>,
    /// Titles kept per query after reranking.
    #[arg(long, global = true, value_name = "N")]
    k_titles: Option<usize>,
    /// Contexts kept per query after reranking.
    #[arg(long, global = true, value_name = "N")]
    k_contexts: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Split corpus pages into fixed-size word chunks.
    Chunk,
    /// Build the title vocabulary and prefix trie.
    BuildTrie,
    /// Build the BM25 title and chunk indexes.
    BuildIndex,
    /// Supervised teacher forcing (--stage pretrain or few-shot).
    Train,
    /// Policy-gradient fine-tuning (--stage reinforce-zero or reinforce-few).
    TrainRl,
    /// Dump constrained beams for the evaluation queries (--stage picks the parameters).
    Decode,
    /// Build reranker training examples and labeled context pairs.
    MakeRerankData,
    /// Decode and rerank titles for the evaluation queries.
    RerankTitles,
    /// Retrieve chunk contexts for the reranked titles.
    RetrieveContexts,
    /// Rerank each query's retrieved contexts.
    RerankContexts,
    /// Assemble reader inputs from the reranked contexts.
    ReaderInputs,
    /// Score reranked titles and contexts against gold labels.
    Evaluate,
    /// Run every stage in dependency order (--stage runs just one).
    Pipeline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summaries) => {
            for summary in &summaries {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<StageSummary>, PipelineError> {
    let config = build_config(&cli.overrides)?;
    let flag = cli.overrides.stage.as_deref();
    let one = |r: Result<StageSummary, PipelineError>| r.map(|s| vec![s]);
    match cli.command {
        Command::Chunk => one(run_stage(&config, Stage::Chunk)),
        Command::BuildTrie => one(run_stage(&config, Stage::BuildTrie)),
        Command::BuildIndex => one(run_stage(&config, Stage::BuildIndex)),
        Command::Train => {
            let stage = pick_stage(flag, Stage::Pretrain, &[Stage::Pretrain, Stage::FewShot])?;
            one(run_stage(&config, stage))
        }
        Command::TrainRl => {
            let stage = pick_stage(
                flag,
                Stage::ReinforceZero,
                &[Stage::ReinforceZero, Stage::ReinforceFew],
            )?;
            one(run_stage(&config, stage))
        }
        Command::Decode => {
            let stage = pick_stage(
                flag,
                Stage::ReinforceFew,
                &[
                    Stage::Pretrain,
                    Stage::ReinforceZero,
                    Stage::FewShot,
                    Stage::ReinforceFew,
                ],
            )?;
            one(run_decode(&config, stage))
        }
        Command::MakeRerankData => one(run_stage(&config, Stage::MakeRerankData)),
        Command::RerankTitles => one(run_stage(&config, Stage::RerankTitles)),
        Command::RetrieveContexts => one(run_stage(&config, Stage::RetrieveContexts)),
        Command::RerankContexts => one(run_stage(&config, Stage::RerankContexts)),
        Command::ReaderInputs => one(run_stage(&config, Stage::BuildReaderInputs)),
        Command::Evaluate => one(run_stage(&config, Stage::Evaluate)),
        Command::Pipeline => match flag {
            Some(name) => {
                let stage = parse_stage(name)?;
                one(run_stage(&config, stage))
            }
            None => run_pipeline(&config),
        },
    }
}

fn build_config(overrides: &Overrides) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &overrides.config {
        Some(path) => PipelineConfig::from_file(path).map_err(validation)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.set("seed", &seed.to_string()).map_err(validation)?;
    }
    if let Some(out) = &overrides.out {
        config
            .set("out", &out.display().to_string())
            .map_err(validation)?;
    }
    if let Some(k) = overrides.k_titles {
        config.set("k_titles", &k.to_string()).map_err(validation)?;
    }
    if let Some(k) = overrides.k_contexts {
        config
            .set("k_contexts", &k.to_string())
            .map_err(validation)?;
    }
    Ok(config)
}

fn validation(err: ConfigError) -> PipelineError {
    PipelineError::Validation(err.to_string())
}

fn parse_stage(name: &str) -> Result<Stage, PipelineError> {
    Stage::parse(name).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        PipelineError::Validation(format!(
            "unknown stage {name:?}; stages are: {}",
            names.join(", ")
        ))
    })
}

fn pick_stage(
    flag: Option<&str>,
    default: Stage,
    allowed: &[Stage],
) -> Result<Stage, PipelineError> {
    let Some(name) = flag else {
        return Ok(default);
    };
    let stage = parse_stage(name)?;
    if allowed.contains(&stage) {
        return Ok(stage);
    }
    let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
    Err(PipelineError::Validation(format!(
        "stage {stage} does not fit this command; expected one of: {}",
        names.join(", ")
    )))
}
