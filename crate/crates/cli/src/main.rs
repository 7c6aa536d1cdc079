//! `scriptweave` command-line front end.
//!
//! Every subcommand runs one pipeline stage for one task (or every task in
//! the tasks file), reading earlier artifacts from `--out-dir` and writing
//! its own there. Failures print a JSON object `{"error", "message"}` to
//! stderr and exit with status 1.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scriptweave::graphgen::{export_graph, GraphFormat};
use scriptweave::pipeline::{Pipeline, PipelineConfig, Stage};
use scriptweave::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "scriptweave",
    version,
    about = "Induce graph scripts from step-sequence corpora"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "scriptweave.toml")]
    config: PathBuf,
    /// Task id to process; all tasks in the tasks file when omitted.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Overrides the config's rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding per-task artifact folders.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Also copy the stage's main output to this path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Match documents and build the step library.
    Library,
    /// Ground corpus records onto the library.
    Ground,
    /// Reversal rate and frequent-successor statistics.
    Stats {
        /// Videos a pair must exceed to count as frequent.
        #[arg(long)]
        threshold: Option<u32>,
    },
    /// Fit the path model on all grounded sequences.
    Train {
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Contrastive and cross-entropy losses per observed sequence.
    Losses {
        /// Curriculum epoch for negative sampling.
        #[arg(long)]
        epoch: Option<u32>,
    },
    /// Step-constrained beam search over the trained model.
    Decode {
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Build and label the graph from decoded paths.
    Graph {
        #[arg(long)]
        prune_threshold: Option<f64>,
        /// Format of the `--out` copy; inferred from its extension otherwise.
        #[arg(long)]
        format: Option<String>,
    },
    /// Next-step and completion metrics against baselines.
    Eval {
        /// Training fraction of the sequence split.
        #[arg(long)]
        split: Option<f64>,
    },
    /// Run every stage in order.
    Run,
}

fn stage_of(command: &Command) -> Option<Stage> {
    Some(match command {
        Command::Library => Stage::Library,
        Command::Ground => Stage::Ground,
        Command::Stats { .. } => Stage::Stats,
        Command::Train { .. } => Stage::Train,
        Command::Losses { .. } => Stage::Losses,
        Command::Decode { .. } => Stage::Decode,
        Command::Graph { .. } => Stage::Graph,
        Command::Eval { .. } => Stage::Eval,
        Command::Run => return None,
    })
}

fn apply_overrides(mut cfg: PipelineConfig, cli: &Cli) -> Result<PipelineConfig> {
    if let Some(seed) = cli.common.seed {
        cfg = cfg.with_seed(seed);
    }
    match &cli.command {
        Command::Stats { threshold: Some(t) } => cfg.frequency_threshold = *t,
        Command::Train { order, lambda } => {
            if let Some(o) = order {
                cfg.pathmodel.order = *o;
            }
            if let Some(l) = lambda {
                cfg.pathmodel.smoothing_lambda = *l;
            }
        }
        Command::Losses { epoch: Some(e) } => cfg.curriculum_epoch = *e,
        Command::Decode {
            beam_width: Some(b),
        } => cfg.decode.beam_width = *b,
        Command::Graph {
            prune_threshold: Some(p),
            ..
        } => cfg.prune_threshold = *p,
        Command::Eval { split: Some(s) } => cfg.train_fraction = *s,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn copy_output(
    pipeline: &Pipeline,
    stage: Stage,
    task: &str,
    dest: &Path,
    format: Option<&str>,
) -> Result<()> {
    if stage == Stage::Graph {
        let fmt = match format {
            Some(f) => f.parse::<GraphFormat>()?,
            None => match dest.extension().and_then(|e| e.to_str()) {
                Some("json") => GraphFormat::Json,
                _ => GraphFormat::Dot,
            },
        };
        let path = pipeline.artifact(task, scriptweave::pipeline::artifacts::GRAPH_JSON);
        let text = fs::read_to_string(&path).map_err(|source| Error::Io { path, source })?;
        let graph = scriptweave::graphgen::GraphScript::from_json(&text)?;
        return fs::write(dest, export_graph(&graph, fmt)).map_err(|source| Error::Io {
            path: dest.to_path_buf(),
            source,
        });
    }
    let src = pipeline.artifact(task, stage.outputs()[0]);
    fs::copy(&src, dest)
        .map(drop)
        .map_err(|source| Error::Io { path: src, source })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = apply_overrides(PipelineConfig::load(&cli.common.config)?, cli)?;
    let pipeline = Pipeline::new(cfg, &cli.common.out_dir);
    let tasks: Vec<String> = match &cli.common.task {
        Some(t) => vec![pipeline.task(t)?.task_id],
        None => pipeline.tasks()?.into_iter().map(|t| t.task_id).collect(),
    };
    if tasks.is_empty() {
        return Err(Error::Invalid("the tasks file lists no tasks".into()));
    }
    if cli.common.out.is_some() && tasks.len() > 1 {
        return Err(Error::Invalid("--out needs a single --task".into()));
    }
    let stages: Vec<Stage> = match stage_of(&cli.command) {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    let mut stdout = io::stdout().lock();
    for task in &tasks {
        for &stage in &stages {
            pipeline.run(stage, task)?;
            let written: Vec<String> = stage
                .outputs()
                .iter()
                .map(|name| pipeline.artifact(task, name).display().to_string())
                .collect();
            match writeln!(stdout, "{stage}\t{task}\t{}", written.join(" ")) {
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
                other => other.map_err(|source| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })?,
            }
        }
        if let (Some(dest), Some(&stage)) = (&cli.common.out, stages.last()) {
            let format = match &cli.command {
                Command::Graph { format, .. } => format.as_deref(),
                _ => None,
            };
            copy_output(&pipeline, stage, task, dest, format)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
