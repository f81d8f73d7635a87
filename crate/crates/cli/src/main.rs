#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dwsep_core::ErrorKind;

#[derive(Parser)]
#[command(
    name = "dwsep",
    version,
    about = "Multi-domain depthwise-separable networks"
)]
struct Cli {
    /// Pin every kernel to one thread.
    #[arg(long, global = true)]
    serial: bool,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base network on the config's base domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Register a domain in a bundle and finetune its own parameters.
    AddDomain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        domain: String,
    },
    /// Attach softmax gates for a domain in one region and train them.
    TrainGate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        domain: String,
        /// early, middle or late; defaults to the config's gate.region.
        #[arg(long)]
        region: Option<String>,
    },
    /// Print test error per domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Evaluate one domain; default is every bundle domain with data.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Compute the decathlon score.
    Score {
        #[command(flatten)]
        common: Common,
        /// CSV `domain,e_max[,gamma]`.
        #[arg(long, conflicts_with = "baseline")]
        spec: Option<PathBuf>,
        /// CSV `domain,error` of a baseline; E_max = min(1, 2 * error).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// CSV `domain,error`; otherwise errors come from evaluating --bundle.
        #[arg(long, conflicts_with = "bundle")]
        errors: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Print the parameter report for the configured model.
    Params {
        #[command(flatten)]
        common: Common,
        /// Classes per domain, e.g. 1000,10,10; defaults to the config's data.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
    /// Write a synthetic domain as DTB files plus a manifest.
    GenData {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Gradient check failed; reported as a numerical failure.
#[derive(Debug)]
pub struct GradcheckFailed(pub Vec<String>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return 4;
    }
    match e
        .chain()
        .find_map(|c| c.downcast_ref::<dwsep_core::Error>())
        .map(|c| c.kind())
    {
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numerical) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    dwsep_core::exec::set_serial(cli.serial);
    let seed = cli.seed;
    match cli.command {
        Command::Pretrain { common } => commands::pretrain(&common, seed),
        Command::AddDomain {
            common,
            bundle,
            domain,
        } => commands::add_domain(&common, seed, &bundle, &domain),
        Command::TrainGate {
            common,
            bundle,
            domain,
            region,
        } => commands::train_gate(&common, seed, &bundle, &domain, region.as_deref()),
        Command::Eval {
            common,
            bundle,
            domain,
        } => commands::eval(&common, &bundle, domain.as_deref()),
        Command::Score {
            common,
            spec,
            baseline,
            errors,
            bundle,
        } => commands::score(
            &common,
            spec.as_deref(),
            baseline.as_deref(),
            errors.as_deref(),
            bundle.as_deref(),
        ),
        Command::Params { common, classes } => commands::params(&common, &classes),
        Command::Gradcheck {
            config: _,
            inject_sign_flip,
        } => commands::gradcheck(seed.unwrap_or(0), inject_sign_flip.as_deref()),
        Command::GenData {
            kind,
            name,
            classes,
            train,
            test,
            size,
            noise,
            out,
        } => commands::gen_data(
            &kind,
            name.as_deref(),
            classes,
            train,
            test,
            size,
            noise,
            seed.unwrap_or(0),
            &out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
