use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fairproto_cli::commands::{self, FixtureOptions};
use fairproto_cli::config::{RunFlags, ENV_CACHE_DIR};
use fairproto_core::ReportFormat;

#[derive(Parser)]
#[command(name = "fairproto", version, about = "Build fused text/image class prototypes and evaluate them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every rendered prompt for the target axis
    Prompts(RunFlags),
    /// Build and archive prototypes for every method and strategy
    Build(RunFlags),
    /// Evaluate the method x strategy grid and write reports
    Evaluate(RunFlags),
    /// Re-render a report.jsonl as text, csv or jsonl
    Report {
        input: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        /// Write here instead of stdout
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Inspect or purge the embedding cache
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Write a runnable synthetic scenario (geometry, manifest, config)
    Fixture {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Build a file store from `text|image <TAB> key <TAB> values` lines
    ImportStore {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "1")]
        version: String,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Inspect {
        #[arg(long, env = ENV_CACHE_DIR)]
        cache_dir: PathBuf,
    },
    Purge {
        #[arg(long, env = ENV_CACHE_DIR)]
        cache_dir: PathBuf,
        /// Only drop this backend's records
        #[arg(long)]
        backend: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prompts(flags) => {
            let r = flags.load().context("prompts")?;
            let o = commands::cmd_prompts(&r).context("prompts")?;
            println!("wrote {} prompts to {}", o.count, o.path.display());
        }
        Command::Build(flags) => {
            let r = flags.load().context("build")?;
            let o = commands::cmd_build(&r).context("build")?;
            println!(
                "wrote {} prototypes to {} ({} backend calls)",
                o.prototypes,
                o.path.display(),
                o.backend_calls
            );
        }
        Command::Evaluate(flags) => {
            let r = flags.load().context("evaluate")?;
            let o = commands::cmd_evaluate(&r).context("evaluate")?;
            for f in &o.files {
                println!("wrote {}", f.display());
            }
            println!("{} backend calls", o.backend_calls);
        }
        Command::Report { input, format, out } => {
            let format: ReportFormat = format.parse().context("report")?;
            let bytes = commands::cmd_report(&input, format).context("report")?;
            match out {
                Some(p) => std::fs::write(&p, bytes).with_context(|| format!("report: writing `{}`", p.display()))?,
                None => std::io::stdout().write_all(&bytes)?,
            }
        }
        Command::Cache { action } => match action {
            CacheAction::Inspect { cache_dir } => {
                print!("{}", commands::cmd_cache_inspect(&cache_dir).context("cache inspect")?);
            }
            CacheAction::Purge { cache_dir, backend } => {
                let n = commands::cmd_cache_purge(&cache_dir, backend.as_deref()).context("cache purge")?;
                println!("purged {n} records");
            }
        },
        Command::Fixture { out, per_class, seed } => {
            let opts = FixtureOptions {
                per_class,
                seed,
                ..Default::default()
            };
            for f in commands::cmd_fixture(&out, &opts).context("fixture")? {
                println!("wrote {}", f.display());
            }
        }
        Command::ImportStore {
            input,
            out,
            id,
            version,
        } => {
            let n = commands::cmd_import_store(&input, &out, &id, &version).context("import-store")?;
            println!("imported {n} records into {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
