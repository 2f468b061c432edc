use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nash_dqn::checkpoint::Checkpoint;
use nash_dqn::config::RunConfig;
use nash_dqn::figures::{self, HeatmapGrid};
use nash_dqn::trainer;

/// Overrides the output directory of every subcommand.
const OUTPUT_DIR_ENV: &str = "NASH_DQN_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "nash-dqn", version, about = "Train and inspect Nash-DQN execution agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config; writes checkpoints and a JSON-lines log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Agent 1's equilibrium trade over (inventory, step) per price and
    /// other-agent inventory, plus the buy/sell threshold curve.
    Heatmap(HeatmapArgs),
    /// Greedy inventory and price paths on a rows x cols grid of episodes.
    Paths {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Greedy evaluation summary as JSON on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write every transition as JSON lines to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One or more prices, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "6,8,10,12,14")]
    price: Vec<f64>,
    /// One or more other-agent inventories, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "-20,0,20", allow_hyphen_values = true)]
    qbar: Vec<f64>,
    /// Defaults to minus the inventory bound.
    #[arg(long, allow_hyphen_values = true)]
    q_min: Option<f64>,
    /// Defaults to the inventory bound.
    #[arg(long, allow_hyphen_values = true)]
    q_max: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    q_step: f64,
    #[arg(long, default_value_t = 0)]
    t_min: usize,
    /// Defaults to the last step of the horizon.
    #[arg(long)]
    t_max: Option<usize>,
}

/// Failure classes with distinct exit codes.
enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn output_dir(default: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| default.to_path_buf())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    output_dir(path.parent().unwrap_or(Path::new(".")))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config_path: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let mut config = RunConfig::from_toml(&text).map_err(|e| anyhow!(e))?;
    config.output_dir = output_dir(&config.output_dir);
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("config.toml"), &config.to_toml().map_err(|e| anyhow!(e))?)?;

    let game = config.game().map_err(|e| anyhow!(e))?;
    let mut model = config
        .build_model(&mut ChaCha8Rng::seed_from_u64(config.train.seed))
        .map_err(|e| anyhow!(e))?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;

    let total = config.train.episodes;
    let every = config.train.eval_every;
    let result = trainer::train(&game, &mut model, &config.train, |rec, m| {
        let line = serde_json::to_string(rec).expect("log records serialize");
        writeln!(log, "{line}")?;
        let done = rec.episode + 1;
        if done % every == 0 || done == total {
            let mean_return = rec.returns.iter().sum::<f64>() / rec.returns.len() as f64;
            println!(
                "episode {done}/{total} loss {:.6} mean_return {:.3} sigma {:.3}",
                rec.mean_loss, mean_return, rec.sigma
            );
            let ck = Checkpoint {
                model: m.clone(),
                config: config.clone(),
                episode: done,
            };
            ck.save(&dir.join(format!("checkpoint_{done:06}.ckpt")))?;
        }
        Ok(())
    });
    match result {
        Ok(_) => {}
        Err(nash_dqn::Error::NonFinite {
            episode,
            step,
            diagnostics,
        }) => {
            let path = dir.join("diagnostics.json");
            write_file(&path, &diagnostics)?;
            return Err(Failure::Numerical(anyhow!(
                "non-finite loss at episode {episode}, step {step}; diagnostics written to {}",
                path.display()
            )));
        }
        Err(e) => return Err(Failure::Usage(anyhow!(e))),
    }
    let final_path = dir.join("model.ckpt");
    Checkpoint {
        model,
        config: config.clone(),
        episode: total,
    }
    .save(&final_path)
    .map_err(|e| anyhow!(e))?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn cmd_heatmap(args: &HeatmapArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let game = ck.config.game().map_err(|e| anyhow!(e))?;
    let bound = game.params.q_bound;
    let grid = HeatmapGrid::new(
        args.q_min.unwrap_or(-bound),
        args.q_max.unwrap_or(bound),
        args.q_step,
        args.t_min,
        args.t_max.unwrap_or(game.params.horizon - 1),
    )
    .map_err(|e| anyhow!(e))?;
    let dir = checkpoint_dir(&args.checkpoint);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for &price in &args.price {
        for &qbar in &args.qbar {
            let h = figures::heatmap(&game, &ck.model, price, qbar, &grid).map_err(|e| anyhow!(e))?;
            let tag = format!("p{price}_q{qbar}");
            write_file(&dir.join(format!("heatmap_{tag}.csv")), &h.to_csv())?;
            write_file(&dir.join(format!("thresholds_{tag}.csv")), &h.thresholds_csv())?;
        }
    }
    println!("wrote {} heatmaps to {}", args.price.len() * args.qbar.len(), dir.display());
    Ok(())
}

fn cmd_paths(checkpoint: &Path, rows: usize, cols: usize, seed: u64) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let game = ck.config.game().map_err(|e| anyhow!(e))?;
    let paths = figures::simulate_paths(&game, &ck.model, rows, cols, seed).map_err(|e| anyhow!(e))?;
    let dir = checkpoint_dir(checkpoint);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("paths.csv");
    write_file(&path, &figures::paths_csv(&paths, game.params.n_agents))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, episodes: usize, seed: u64, dump: Option<&Path>) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let game = ck.config.game().map_err(|e| anyhow!(e))?;
    let mut records = Vec::new();
    let summary = figures::evaluate(
        &game,
        &ck.model,
        episodes,
        seed,
        ck.config.train.gamma,
        dump.is_some().then_some(&mut records),
    )
    .map_err(|e| anyhow!(e))?;
    if let Some(path) = dump {
        let mut out = String::new();
        for r in &records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        write_file(path, &out)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Heatmap(args) => cmd_heatmap(&args),
        Command::Paths {
            checkpoint,
            rows,
            cols,
            seed,
        } => cmd_paths(&checkpoint, rows, cols, seed),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            dump,
        } => cmd_eval(&checkpoint, episodes, seed, dump.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
