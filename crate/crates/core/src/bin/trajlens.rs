use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trajlens::perturb::external::{serve_stub, StubMode};
use trajlens::pipeline::{run_all, run_stage, JobConfig, Stage};
use trajlens::trajstore::{validate_run, RunReader};

#[derive(Parser)]
#[command(name = "trajlens", version, about = "Analytics for masked-diffusion denoising trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct JobArgs {
    /// Job configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl JobArgs {
    fn load(&self) -> trajlens::Result<JobConfig> {
        let mut cfg = match &self.config {
            Some(p) => JobConfig::load(p)?,
            None => JobConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.apply_env()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Echo,
    WrongId,
    BadVersion,
    Silent,
}

#[derive(Subcommand)]
enum Command {
    /// Check trajectory files and report every violation.
    Validate { files: Vec<PathBuf> },
    /// Generate synthetic probe-train/eval runs with ground truth.
    Synth(JobArgs),
    /// Commitment CDFs, group means, and correctness strata.
    Commit(JobArgs),
    /// Train and evaluate linear probes.
    Probe(JobArgs),
    /// Certainty curves and calibration.
    Uncert(JobArgs),
    /// Re-masking sensitivity curves.
    Perturb(JobArgs),
    /// Cross-seed mean and standard deviation.
    Aggregate(JobArgs),
    /// Markdown summary tables from existing outputs.
    Report(JobArgs),
    /// Every stage in order.
    All(JobArgs),
    /// Print the default job configuration.
    InitConfig,
    /// Reference protocol peer used for testing external denoisers.
    StubDenoiser {
        #[arg(long, value_enum, default_value = "echo")]
        mode: Mode,
    },
}

fn validate(files: &[PathBuf]) -> trajlens::Result<bool> {
    let mut clean = true;
    for path in files {
        let reader = RunReader::open(path)?;
        let meta = reader.meta().clone();
        let records = reader.collect::<trajlens::Result<Vec<_>>>()?;
        let violations = validate_run(&trajlens::trajstore::RunSet { meta, records });
        if violations.is_empty() {
            println!("{}: ok", path.display());
        } else {
            clean = false;
            for v in violations {
                println!("{}: {v}", path.display());
            }
        }
    }
    Ok(clean)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { files } => match validate(&files) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Synth(a) => a.load().and_then(|c| run_stage(&c, Stage::Synth)),
        Command::Commit(a) => a.load().and_then(|c| run_stage(&c, Stage::Commit)),
        Command::Probe(a) => a.load().and_then(|c| run_stage(&c, Stage::Probe)),
        Command::Uncert(a) => a.load().and_then(|c| run_stage(&c, Stage::Uncert)),
        Command::Perturb(a) => a.load().and_then(|c| run_stage(&c, Stage::Perturb)),
        Command::Aggregate(a) => a.load().and_then(|c| run_stage(&c, Stage::Aggregate)),
        Command::Report(a) => a.load().and_then(|c| run_stage(&c, Stage::Report)),
        Command::All(a) => a.load().and_then(|c| run_all(&c)),
        Command::InitConfig => serde_json::to_string_pretty(&JobConfig::default())
            .map(|s| println!("{s}"))
            .map_err(Into::into),
        Command::StubDenoiser { mode } => {
            let mode = match mode {
                Mode::Echo => StubMode::Echo,
                Mode::WrongId => StubMode::WrongRecordId,
                Mode::BadVersion => StubMode::BadVersion,
                Mode::Silent => StubMode::Silent,
            };
            serve_stub(mode, BufReader::new(io::stdin().lock()), io::stdout().lock())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
