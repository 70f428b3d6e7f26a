use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avdqn::agent::{self, AgentKind, TrainConfig};
use avdqn::harness;
use avdqn::{Error, Result};

#[derive(Parser)]
#[command(name = "avdqn", about = "Amortized variational DQN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write its per-episode CSV.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "run.csv")]
        out: PathBuf,
    },
    /// Train one run per seed in parallel; writes per-seed CSVs and the mean curve.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "sweep")]
        out_dir: PathBuf,
        /// Also write an SVG of the mean reward curve.
        #[arg(long)]
        svg: bool,
    },
    /// Train on a chain and write windowed visit frequencies of s_1, s_N/2, s_N.
    Visits {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "visits.csv")]
        out: PathBuf,
    },
    /// Print parameter counts of both networks on every benchmark task.
    Params,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    omega: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Any other config key, e.g. `--set grad_clip=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => harness::load_config(path)?,
            None => TrainConfig::new("chain:5", AgentKind::Avdqn),
        };
        let flags = [
            ("env", &self.env),
            ("agent", &self.agent),
            ("episodes", &self.episodes),
            ("seed", &self.seed),
            ("omega", &self.omega),
            ("gamma", &self.gamma),
            ("lr", &self.lr),
            ("tau", &self.tau),
            ("batch", &self.batch),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                harness::apply_kv(&mut c, key, v)?;
            }
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected KEY=VALUE, got `{o}`")))?;
            harness::apply_kv(&mut c, k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, out } => {
            let config = run.resolve()?;
            let record = agent::train(&config)?;
            harness::emit_csv(&record, &out)?;
            let k = record.episodes.len().min(10);
            println!(
                "{} {} seed {}: final reward {:.3} over last {k} episodes, {} skipped steps -> {}",
                config.env,
                config.agent.as_str(),
                config.seed,
                harness::final_reward(&record, k)?,
                record.total_skipped(),
                out.display()
            );
        }
        Command::Sweep {
            run,
            seeds,
            out_dir,
            svg,
        } => {
            let config = run.resolve()?;
            create_dir(&out_dir)?;
            let base = config.seed;
            let seed_list: Vec<u64> = (0..seeds).map(|i| base + i).collect();
            let records = harness::sweep(&config, &seed_list)?;
            for r in &records {
                let path = out_dir.join(format!("seed{}.csv", r.seed));
                harness::emit_csv(r, &path)?;
                let k = r.episodes.len().min(10);
                println!(
                    "seed {}: final reward {:.3}",
                    r.seed,
                    harness::final_reward(r, k)?
                );
            }
            let curve = harness::mean_curve(&records);
            harness::emit_mean_curve(&curve, &out_dir.join("mean.csv"))?;
            if svg {
                let ys: Vec<f64> = curve.iter().map(|c| c.1).collect();
                let path = out_dir.join("mean.svg");
                fs::write(&path, harness::svg_line_chart(&ys, 800.0, 300.0)).map_err(|e| {
                    Error::Io {
                        path: path.clone(),
                        source: e,
                    }
                })?;
            }
        }
        Command::Visits { run, out } => {
            let config = run.resolve()?;
            let record = agent::train(&config)?;
            let visits = harness::record_visits(&record)?;
            harness::emit_visits(&visits, &out)?;
            println!("{} windows -> {}", visits.len(), out.display());
        }
        Command::Params => print!(
            "{}",
            harness::format_params_report(&harness::params_report())
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
