use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use socfusion::ekf::FilterMode;
use socfusion_cli::pipeline::{self, Layout};
use socfusion_cli::{CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "socfusion", version, about = "SOC estimation with a virtual sensor fused into an EKF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Calibration evaluation budget.
    #[arg(long, global = true)]
    budget: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the protocol records and the train/test sets.
    Simulate,
    /// Identify the cell model from the protocol records.
    Identify,
    /// Train the virtual sensor.
    TrainVs,
    /// Tune the filter noise on the training set.
    Calibrate {
        #[arg(long, value_enum, default_value_t = Mode::Fusion)]
        mode: Mode,
    },
    /// Score BEKF, VS and VSF on the test set.
    Evaluate,
    /// Summarize the evaluation as Markdown.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Fusion,
}

fn load(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(budget) = cli.budget {
        cfg.calibration.budget = budget;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    let layout = Layout::new(&cfg.out_dir);
    match &cli.command {
        Command::Simulate => {
            for s in pipeline::cmd_simulate(&cfg, &layout)? {
                println!("{} {} rows {}..{} current jump {:+.3} A", s.dataset, s.profile, s.start, s.start + s.rows, s.current_jump);
            }
        }
        Command::Identify => {
            let p = pipeline::cmd_identify(&cfg, &layout)?;
            println!("Q = {:.1} A·s, eta_c = {:.5}", p.q_total, p.eta_c);
        }
        Command::TrainVs => {
            let vs = pipeline::cmd_train_vs(&cfg, &layout)?;
            println!("virtual sensor with {} observers written to {}", vs.n_theta(), layout.vs_bundle().display());
        }
        Command::Calibrate { mode } => {
            let mode = match mode {
                Mode::Baseline => FilterMode::Baseline,
                Mode::Fusion => FilterMode::Fusion,
            };
            let n = pipeline::cmd_calibrate(&cfg, &layout, mode)?;
            println!("{} noise: {:?}", mode.name(), n.to_array());
        }
        Command::Evaluate => {
            for s in pipeline::cmd_evaluate(&cfg, &layout)? {
                println!("{:<5} rmse {:.4}  tv {:.6}  {:.4} ms/step", s.method.name(), s.rmse, s.tv, s.median_step_ms);
            }
        }
        Command::Report => print!("{}", pipeline::cmd_report(&layout)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
