use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use segdg::{Error, ErrorKind};
use segdg_cli::commands::{cmd_eval, cmd_generate, cmd_run, cmd_table};
use segdg_cli::FileConfig;

#[derive(Parser)]
#[command(name = "segdg", version, about = "Cross-domain segmentation strategy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark for both tasks.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root; defaults to the config's data.root.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-validate all three strategies on both tasks.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset root; defaults to the config's data.root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = ["desk", "paper"])]
        preset: Option<String>,
        /// Reuse folds already present in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score every ensemble targeting the manifest's task.
    Eval {
        /// Run directory produced by `run`.
        run: PathBuf,
        /// Dataset manifest, e.g. data/cross_organ/unseen_test.json.
        manifest: PathBuf,
    },
    /// Print the strategy comparison table.
    Table {
        run: PathBuf,
    },
}

fn execute(command: Command) -> segdg::Result<()> {
    match command {
        Command::Generate { config, out, seed } => {
            let (cfg, base) = FileConfig::load_or_default(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.data_root(&base));
            for m in cmd_generate(&cfg, &out, seed)? {
                println!("{}", m.train.display());
                println!("{}", m.seen_test.display());
                println!("{}", m.unseen_test.display());
            }
        }
        Command::Run {
            config,
            out,
            data,
            seed,
            preset,
            resume,
            workers,
        } => {
            let (cfg, base) = FileConfig::load_or_default(config.as_deref())?;
            let experiment = cfg.experiment(preset.as_deref(), seed)?;
            let data = data.unwrap_or_else(|| cfg.data_root(&base));
            let workers = workers.unwrap_or_else(|| cfg.workers());
            if workers == 0 {
                return Err(Error::InvalidConfig {
                    field: "workers".into(),
                    message: "must be positive".into(),
                });
            }
            let manifest = cmd_run(&experiment, &data, &out, workers, resume)?;
            for r in &manifest.runs {
                println!("{}", out.join(&r.cv_report).display());
            }
        }
        Command::Eval { run, manifest } => {
            for p in cmd_eval(&run, &manifest)? {
                println!("{}", p.display());
            }
        }
        Command::Table { run } => print!("{}", cmd_table(&run)?.text),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Generate { .. } => "generate",
        Command::Run { .. } => "run",
        Command::Eval { .. } => "eval",
        Command::Table { .. } => "table",
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Config => ("config", 2),
                ErrorKind::Data => ("data", 3),
                ErrorKind::Training => ("training", 4),
            };
            eprintln!(
                "{}",
                json!({
                    "error_kind": kind,
                    "message": e.to_string(),
                    "context": { "command": name, "error": format!("{e:?}") },
                })
            );
            ExitCode::from(code)
        }
    }
}
