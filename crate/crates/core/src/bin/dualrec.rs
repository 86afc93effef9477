use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualrec_core::cli::{self, AblationAxis, CliError, Context, GraphBuild, EXIT_CONFIG};
use dualrec_core::config::RunConfig;
use dualrec_core::eval::Part;

#[derive(Parser)]
#[command(name = "dualrec", version, about = "Multimodal graph recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets both split.seed and train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Rebuild cached artifacts
    #[arg(long)]
    force: bool,
    /// Override a config key, e.g. --set train.lr=0.001
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// k-core filter, split and align features
    Preprocess(Common),
    /// Build or validate the graph cache
    BuildGraphs(Common),
    /// Train and write a checkpoint
    Train(Common),
    /// Evaluate a checkpoint on the validation or test part
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        part: Part,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one variant per setting of an ablation axis
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Finite-difference gradient check over all configurations
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn context(common: &Common) -> Result<Context, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        config.split.seed = seed;
        config.train.seed = seed;
    }
    Ok(Context {
        config,
        out: common.out.clone(),
        force: common.force,
    })
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess(c) => {
            let s = cli::cmd_preprocess(&context(&c)?)?;
            println!(
                "users={} items={} interactions={} train={} valid={} test={}",
                s.users, s.items, s.interactions, s.train, s.valid, s.test
            );
            println!("manifest: {}", s.manifest.display());
        }
        Command::BuildGraphs(c) => match cli::cmd_build_graphs(&context(&c)?)? {
            GraphBuild::Built => println!("graphs built in {}", cli::graphs_dir(&c.out).display()),
            GraphBuild::Cached => println!("graph cache is up to date"),
        },
        Command::Train(c) => {
            let s = cli::cmd_train(&context(&c)?)?;
            println!(
                "best_epoch={} epochs_run={} stop={:?} valid recall@20={:.6} ndcg@20={:.6}",
                s.best_epoch,
                s.epochs_run,
                s.stop_reason,
                s.valid.recall_at(20).unwrap_or(f64::NAN),
                s.valid.ndcg_at(20).unwrap_or(f64::NAN)
            );
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Evaluate { common, part, checkpoint } => {
            let (report, _) = cli::cmd_evaluate(&context(&common)?, checkpoint.as_deref(), part)?;
            println!("{}", serde_json::to_string_pretty(&report.to_json()).expect("serializable"));
        }
        Command::Ablate { common, axis } => {
            let (rows, path) = cli::cmd_ablate(&context(&common)?, axis)?;
            println!("{}", cli::ABLATION_HEADER);
            for r in &rows {
                println!("{}", r.to_line());
            }
            println!("written: {}", path.display());
        }
        Command::Gradcheck { seed } => {
            cli::cmd_gradcheck(seed, &mut std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
