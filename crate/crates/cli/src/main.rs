use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ddpm_ticket::config::{ExperimentConfig, Preset};
use ddpm_ticket::error::Error;
use ddpm_ticket::experiment::{self, TICKET_CKPT};
use ddpm_ticket::similarity::CkaMode;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  bad command line
  3  missing or invalid configuration
  4  corrupt or incompatible checkpoint
  5  I/O failure or unreadable input data
  6  training diverged (non-finite loss or gradient)";

#[derive(Parser)]
#[command(name = "ddpm-ticket", version, about = "Winning-ticket search for tiny diffusion models", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). Flags below override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Synthetic)]
    preset: PresetArg,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Maximum pruning rounds.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Base pruning ratio p (percent).
    #[arg(long, global = true, value_name = "PCT")]
    p: Option<f64>,
    /// Per-module increment q (percent).
    #[arg(long, global = true, value_name = "PCT")]
    q: Option<f64>,
    /// Target global sparsity.
    #[arg(long, global = true, value_name = "F")]
    delta: Option<f64>,
    /// Rewind point as a fraction of the iterations per round.
    #[arg(long = "rewind-frac", global = true, value_name = "F")]
    rewind_frac: Option<f64>,
    /// Training iterations per round.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<usize>,
    /// CKA normalization printed by `cka`.
    #[arg(long = "cka-mode", global = true, value_enum, default_value_t = CkaArg::Root)]
    cka_mode: CkaArg,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Synthetic,
    Mnist,
}

#[derive(Clone, Copy, ValueEnum)]
enum CkaArg {
    Root,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model for one round; writes dense.ckpt and train_loss.csv.
    Train,
    /// Run the graded prune-and-rewind search; writes curve.csv and ticket.ckpt.
    Ticket,
    /// Sample an image grid and a denoising strip from a checkpoint.
    Sample {
        /// Defaults to <out>/ticket.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Trajectory frame spacing in steps (0 disables).
        #[arg(long = "trajectory-every", default_value_t = 10)]
        trajectory_every: usize,
    },
    /// Per-module CKA between two checkpoints; writes cka.csv.
    Cka {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Second ticket (defaults to the first).
        #[arg(long, value_name = "PATH")]
        against: Option<PathBuf>,
    },
    /// FLOPs per forward pass, dense or under a checkpoint's mask; writes flops.csv.
    Flops {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Summary table of a finished run; writes report.txt.
    Report,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::Json(_) | Error::UnknownDatasetKind(_) => 3,
            Error::Checkpoint(_) => 4,
            Error::Io(_) | Error::Idx(_) => 5,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 6,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: String) -> Failure {
    Failure { code: 3, message }
}

impl Cli {
    fn experiment(&self) -> Result<ExperimentConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => {
                if !path.is_file() {
                    return Err(config_error(format!("config file {} not found", path.display())));
                }
                ExperimentConfig::from_file(path).map_err(|e| match e {
                    Error::Io(io) => config_error(format!("cannot read {}: {io}", path.display())),
                    other => other.into(),
                })?
            }
            None => ExperimentConfig::preset(match self.preset {
                PresetArg::Synthetic => Preset::Synthetic,
                PresetArg::Mnist => Preset::Mnist,
            }),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.rounds {
            c.prune.max_rounds = v;
        }
        if let Some(v) = self.p {
            c.prune.base_ratio_pct = v;
        }
        if let Some(v) = self.q {
            c.prune.increment_pct = v;
        }
        if let Some(v) = self.delta {
            c.prune.target_sparsity = v;
        }
        if let Some(v) = self.rewind_frac {
            c.prune.rewind_fraction = v;
        }
        if let Some(v) = self.iterations {
            c.prune.iterations_per_round = v;
        }
        if let Some(v) = self.batch_size {
            c.training.batch_size = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self) -> Result<PathBuf, Failure> {
        match &self.out {
            Some(o) => Ok(o.clone()),
            None => Ok(self.experiment()?.output_dir),
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let quiet = cli.quiet;
    let log = |m: &str| {
        if !quiet {
            eprintln!("{m}");
        }
    };
    match &cli.command {
        Command::Train => {
            let c = cli.experiment()?;
            let ckpt = experiment::run_train(&c, &c.output_dir, log)?;
            println!("dense checkpoint at round {} step {} written to {}", ckpt.round, ckpt.step, c.output_dir.display());
        }
        Command::Ticket => {
            let c = cli.experiment()?;
            let run = experiment::run_ticket(&c, &c.output_dir, log)?;
            print!("{}", run.curve);
            let last = run.outcome.reports.last().expect("at least one round");
            println!(
                "ticket: {} rounds, global sparsity {:.4}, written to {}",
                run.outcome.rounds,
                last.global_sparsity,
                c.output_dir.display()
            );
        }
        Command::Sample {
            checkpoint,
            samples,
            trajectory_every,
        } => {
            let out = cli.out_dir()?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join(TICKET_CKPT));
            let seed = cli.seed.unwrap_or(0);
            let r = experiment::run_sample(&ckpt, *samples, seed, *trajectory_every, &out)?;
            println!("{}", r.grid.display());
            if let Some(t) = r.trajectory {
                println!("{}", t.display());
            }
        }
        Command::Cka { checkpoint, against } => {
            let out = cli.out_dir()?;
            let other = against.as_deref().unwrap_or(checkpoint);
            let p = experiment::run_cka(checkpoint, other, &out)?;
            let mode = match cli.cka_mode {
                CkaArg::Root => CkaMode::Root,
                CkaArg::Paper => CkaMode::Paper,
            };
            println!("module,cka");
            for (j, v) in p.values(mode).iter().enumerate() {
                match v {
                    Some(v) => println!("{j},{v:.6}"),
                    None => println!("{j},undefined"),
                }
            }
        }
        Command::Flops { checkpoint } => {
            let c = cli.experiment()?;
            let r = experiment::run_flops(&c, checkpoint.as_deref(), &c.output_dir)?;
            println!("{r}");
        }
        Command::Report => {
            let out = cli.out_dir()?;
            print!("{}", experiment::run_report(Path::new(&out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
