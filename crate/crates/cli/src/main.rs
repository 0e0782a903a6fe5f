mod ablate;
mod config;
mod output;
mod prepare;
mod report;
mod run;

use std::fmt;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cre_core::corpus;
use cre_core::prompting::PromptTemplateId;
use cre_core::protocol::{self, MockFault, MockOptions};
use cre_core::synthetic::{self, SyntheticSpec};
use serde_json::json;

use config::ConfigArgs;

/// Errors caused by bad input rather than by a failing run. They exit with 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

const EXIT_INVALID: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cre",
    version,
    about = "Continual relation extraction experiments with memory replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Partition the corpus into one task stream per seed.
    Prepare {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the continual loop for every seed.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue each seed from its newest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run one arm per memory size or template over shared streams.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        memory_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        templates: Vec<PromptTemplateId>,
        /// Unpaired Welch test instead of the paired test.
        #[arg(long)]
        welch: bool,
    },
    /// Aggregate completed runs: a run directory, or a directory of seed-* runs.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write the aggregate files; defaults to the first directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the backend protocol on stdin/stdout with a memorizing echo model.
    MockBackend {
        /// Misbehave on purpose: no-embedding-dim, wrong-request-id, exit-after-init, silent.
        #[arg(long)]
        fault: Option<MockFault>,
    },
    /// Write the synthetic corpus, its relation order and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 99)]
        seed: u64,
    },
}

fn resolve(config: &ConfigArgs) -> Result<config::ExperimentConfig> {
    config.resolve().map_err(|e| Invalid(render_chain(&e)).into())
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Prepare { config } => {
            let cfg = resolve(&config)?;
            let streams = prepare::build_streams(&cfg)?;
            prepare::write_streams(&cfg, &cfg.output_dir, &streams)?;
            for s in &streams {
                print!("{}", prepare::summary(s));
                println!("  -> {}", prepare::stream_path(&cfg.output_dir, s.seed).display());
            }
            Ok(0)
        }
        Command::Run { config, resume } => {
            let cfg = resolve(&config)?;
            let streams = prepare::load_or_prepare(&cfg, &cfg.output_dir)?;
            let outcomes = run::run_streams(&cfg, &streams, &cfg.output_dir, resume)?;
            Ok(if run::print_outcomes(&outcomes) {
                0
            } else {
                EXIT_RUNTIME
            })
        }
        Command::Ablate {
            config,
            memory_sizes,
            templates,
            welch,
        } => {
            let cfg = resolve(&config)?;
            let arms = ablate::arms(&memory_sizes, &templates)?;
            let streams = prepare::load_or_prepare(&cfg, &cfg.output_dir)?;
            let result = ablate::ablate(&cfg, &streams, &cfg.output_dir, &arms, !welch)?;
            match &result.table {
                Some(table) => {
                    ablate::print_ablation(table);
                    Ok(0)
                }
                None => {
                    for (arm, o) in result.outcomes.iter().filter(|(_, o)| !o.completed()) {
                        println!(
                            "{} seed {}: FAILED: {}",
                            arm.name(),
                            o.seed,
                            o.error.as_deref().unwrap_or_default()
                        );
                    }
                    Ok(EXIT_RUNTIME)
                }
            }
        }
        Command::Report { dirs, out } => {
            let out = out.unwrap_or_else(|| dirs[0].clone());
            let summary = report::summarize(report::find_reports(&dirs)?)?;
            report::write_summary(&out, &summary)?;
            report::print_summary(&summary);
            Ok(0)
        }
        Command::MockBackend { fault } => {
            let stdin = io::stdin().lock();
            let stdout = BufWriter::new(io::stdout().lock());
            protocol::serve(stdin, stdout, &MockOptions { fault })?;
            Ok(0)
        }
        Command::Synth { out, seed } => {
            write_synthetic(&out, seed)?;
            println!(
                "wrote synthetic.jsonl, synthetic_order.txt, synthetic.json to {}",
                out.display()
            );
            Ok(0)
        }
    }
}

/// The bundled synthetic benchmark: 10 tasks of 4 relations, 60 sentences each.
fn write_synthetic(dir: &Path, seed: u64) -> Result<()> {
    let (instances, order) = synthetic::generate(&SyntheticSpec::default(), seed);
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = dir.join(".synthetic.jsonl.tmp");
    corpus::write_normalized(&tmp, &instances)?;
    std::fs::rename(&tmp, dir.join("synthetic.jsonl"))?;
    let order_text: String = order.iter().map(|task| task.join(" ") + "\n").collect();
    output::write_atomic(&dir.join("synthetic_order.txt"), order_text.as_bytes())?;
    let cfg = json!({
        "dataset": "normalized",
        "input": "synthetic.jsonl",
        "relation_order": "synthetic_order.txt",
        "dataset_id": "synthetic",
        "train_cap": 40,
        "eval_cap": 10,
        "epochs_new": 5,
        "epochs_replay": 5,
        "lr0": 0.5,
        "seeds": [1, 2, 3, 4, 5],
        "output_dir": "runs"
    });
    output::write_json(&dir.join("synthetic.json"), &cfg)
}

/// The error chain joined by ": ", skipping causes a parent already quotes.
pub fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            if e.chain().any(|c| c.is::<Invalid>()) {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
