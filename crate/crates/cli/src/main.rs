//! `styleinv`: corpus generation, collaborative training, inversion,
//! benchmarks, latent editing and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "styleinv", version, about = "Collaborative GAN inversion at desk scale")]
struct Cli {
    /// Directory every configured path is relative to.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// key=value config file, relative to the workdir.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus with its frozen generator and phi.
    GenCorpus,
    /// Train the embedding network (resumes from train_dir when possible).
    Train,
    /// Invert one image.
    Invert {
        #[arg(long)]
        image: Option<String>,
        /// encoder, mean or random.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reproduce the benchmark tables.
    Bench,
    /// Morph, style-mix or colorize two images.
    Edit {
        /// morph, mix or colorize.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Held-out reconstruction metrics of a trained model.
    Eval,
    /// Print every config key with its default.
    Config,
}

impl Command {
    /// Subcommand flags expressed as config overrides.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        match self {
            Command::Invert { image, init, steps } => {
                push("image", image.clone());
                push("init", init.clone());
                push("invert_steps", steps.map(|s| s.to_string()));
            }
            Command::Edit { op, a, b, k } => {
                push("edit_op", op.clone());
                push("edit_a", a.clone());
                push("edit_b", b.clone());
                push("mix_layers", k.map(|s| s.to_string()));
            }
            _ => {}
        }
        out
    }

    /// Training is single-threaded unless a thread count is requested.
    fn default_threads(&self) -> usize {
        match self {
            Command::Train => 1,
            _ => 0,
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    if !cli.workdir.is_dir() {
        return Err(ConfigError(format!("workdir {} is not a directory", cli.workdir.display())));
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(&cli.workdir.join(p))?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    for (k, v) in cli.command.overrides() {
        cfg.set(k, &v)?;
    }
    if let Ok(v) = std::env::var("STYLEINV_THREADS") {
        cfg.set("threads", &v)
            .map_err(|e| ConfigError(format!("STYLEINV_THREADS: {e}")))?;
    }
    if cfg.usize("threads") == 0 {
        cfg.set("threads", &cli.command.default_threads().to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", RunConfig::template());
        return Ok(());
    }
    let threads = cfg.usize("threads");
    let ctx = Ctx { workdir: cli.workdir, cfg };
    log::info!("{} with {} threads", commands::VERSION, threads);
    styleinv_core::parallel::with_threads(threads, || match cli.command {
        Command::GenCorpus => commands::gen_corpus_cmd(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Invert { .. } => commands::invert_cmd(&ctx),
        Command::Bench => commands::bench_cmd(&ctx),
        Command::Edit { .. } => commands::edit_cmd(&ctx),
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Config => unreachable!(),
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<styleinv_core::Error>(), Some(styleinv_core::Error::Config(_)))
    });
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
