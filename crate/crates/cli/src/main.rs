use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use sicql::obs::RunStore;
use sicql::store::ConstraintStore;
use sicql_cli::api::{serve, AppState};
use sicql_cli::commands;
use sicql_cli::config::{Config, ModelConfig};

#[derive(Parser)]
#[command(name = "sicql", version, about = "Semantic queries with integrity constraints")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan and execute a query.
    Run {
        query: PathBuf,
        /// Directory holding `<table>.jsonl` or `<table>.csv`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Use the scripted model with this script.
        #[arg(long)]
        model_script: Option<PathBuf>,
    },
    /// Print the optimized plan.
    Explain {
        query: PathBuf,
        #[arg(long, default_value = "physical", value_parser = ["logical", "physical"])]
        level: String,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        model_script: Option<PathBuf>,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Manage the constraint store.
    Store {
        #[command(subcommand)]
        command: StoreCommand,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    Register {
        #[arg(long)]
        id: String,
        /// A single `ASSERT ...` declaration.
        #[arg(long)]
        decl: String,
        #[arg(long)]
        description: String,
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long)]
        soft: bool,
    },
    Recommend {
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    Conflicts,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let mut config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Run {
            query,
            data,
            profile,
            seed,
            run_dir,
            model_script,
        } => {
            config.profile = profile.or(config.profile);
            config.seed = seed.unwrap_or(config.seed);
            config.run_dir = run_dir.unwrap_or(config.run_dir);
            if let Some(s) = model_script {
                config.model = ModelConfig::Fake { script: Some(s) };
            }
            let out = commands::run(&query, &data, &config)?;
            let summary = serde_json::json!({
                "run_id": out.run_id,
                "status": out.status,
                "results": config.run_dir.join(&out.run_id).join("results.jsonl"),
                "tuples_out": out.record.totals.tuples_out,
                "flagged": out.record.totals.flagged,
                "cost": out.record.totals.cost,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(err) = &out.record.error {
                eprintln!("error: {err}");
            }
            Ok(commands::exit_code(out.status))
        }
        Command::Explain {
            query,
            level,
            profile,
            model_script,
        } => {
            config.profile = profile.or(config.profile);
            if let Some(s) = model_script {
                config.model = ModelConfig::Fake { script: Some(s) };
            }
            print!("{}", commands::explain(&query, &level, &config)?);
            Ok(0)
        }
        Command::Serve { port, run_dir } => {
            let port = port.unwrap_or(config.port);
            let state = Arc::new(AppState {
                runs: RunStore::open(run_dir.unwrap_or(config.run_dir)),
                constraints: ConstraintStore::open(&config.store)?,
            });
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on port {port}");
            rt.block_on(serve(state, port))?;
            Ok(0)
        }
        Command::Store { command } => {
            let out = match command {
                StoreCommand::Register {
                    id,
                    decl,
                    description,
                    tags,
                    soft,
                } => commands::store_register(&config, &id, &decl, &description, tags, soft)?,
                StoreCommand::Recommend { query, k } => commands::store_recommend(&config, &query, k)?,
                StoreCommand::Conflicts => commands::store_conflicts(&config)?,
            };
            println!("{out}");
            Ok(0)
        }
    }
}
