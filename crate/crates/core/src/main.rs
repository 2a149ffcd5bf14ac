use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use xvfl::error::{Error, Result};
use xvfl::experiments::{
    emit_report, run_convergence_study, run_imbalance, run_missing_sweep, run_overlap_sweep,
    ExperimentManifest, SweepOutput, SweepSpec,
};
use xvfl::inference;
use xvfl::protocol::config_hash;

#[derive(Parser)]
#[command(
    name = "xvfl",
    version,
    about = "Vertical federated learning simulator with cross-client feature completion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs an experiment or a batch prediction job.
    Run {
        #[command(subcommand)]
        kind: Kind,
    },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum KindName {
    MissingSweep,
    OverlapSweep,
    Imbalance,
    Convergence,
    Infer,
}

#[derive(Subcommand)]
enum Kind {
    /// Accuracy over the missing-rate grid.
    MissingSweep(Common),
    /// Accuracy over the overlap grid.
    OverlapSweep(Common),
    /// Per-client accuracy under unequal sample shares.
    Imbalance(Common),
    /// Gradient-norm decay of SGD and PAGE against the horizon.
    Convergence(Common),
    /// Predictions for a feature CSV from a saved checkpoint.
    Infer(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to every key it leaves out.
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides a config key, e.g. `--set missing.rates=[0.5]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Kind {
    fn split(self) -> (KindName, Common) {
        match self {
            Kind::MissingSweep(c) => (KindName::MissingSweep, c),
            Kind::OverlapSweep(c) => (KindName::OverlapSweep, c),
            Kind::Imbalance(c) => (KindName::Imbalance, c),
            Kind::Convergence(c) => (KindName::Convergence, c),
            Kind::Infer(c) => (KindName::Infer, c),
        }
    }
}

impl KindName {
    fn as_str(self) -> &'static str {
        match self {
            KindName::MissingSweep => "missing-sweep",
            KindName::OverlapSweep => "overlap-sweep",
            KindName::Imbalance => "imbalance",
            KindName::Convergence => "convergence",
            KindName::Infer => "infer",
        }
    }
}

/// Finished without error; `diverged` selects the exit code.
struct Done {
    diverged: bool,
}

fn load_spec(args: &Common) -> Result<SweepSpec> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &args.config {
        Some(path) => SweepSpec::load(path, &overrides),
        None => SweepSpec::from_toml_str("", &overrides),
    }
}

fn write_sweep(name: KindName, spec: &SweepSpec, out: SweepOutput, dir: &Path) -> Result<Done> {
    let (csv, json) = emit_report(&out.rows, dir)?;
    ExperimentManifest::new(name.as_str(), spec, out.datasets)?.save(&dir.join("manifest.json"))?;
    info!("wrote {} and {}", csv.display(), json.display());
    Ok(Done {
        diverged: out.diverged,
    })
}

fn execute(name: KindName, args: &Common) -> Result<Done> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let spec = load_spec(args)?;
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    info!(
        "{} seed {} into {}",
        name.as_str(),
        spec.seed,
        dir.display()
    );
    match name {
        KindName::MissingSweep => {
            write_sweep(name, &spec, run_missing_sweep(&spec, Some(dir))?, dir)
        }
        KindName::OverlapSweep => {
            write_sweep(name, &spec, run_overlap_sweep(&spec, Some(dir))?, dir)
        }
        KindName::Imbalance => write_sweep(name, &spec, run_imbalance(&spec, Some(dir))?, dir),
        KindName::Convergence => {
            let report = run_convergence_study(&spec.convergence, spec.seed, &config_hash(&spec)?)?;
            let (csv, json) = report.emit(dir)?;
            ExperimentManifest::new(name.as_str(), &spec, Vec::new())?
                .save(&dir.join("manifest.json"))?;
            info!("wrote {} and {}", csv.display(), json.display());
            Ok(Done {
                diverged: report.diverged(),
            })
        }
        KindName::Infer => {
            let job = spec
                .infer
                .as_ref()
                .ok_or_else(|| Error::Config("infer needs an [infer] section".into()))?;
            let path = inference::run_batch(job, dir)?;
            info!("wrote {}", path.display());
            Ok(Done { diverged: false })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run { kind } = Cli::parse().command;
    let (name, args) = kind.split();
    match execute(name, &args) {
        Ok(Done { diverged: false }) => ExitCode::SUCCESS,
        Ok(Done { diverged: true }) => {
            eprintln!("error: at least one run diverged; results were still written");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Diverged { .. } => 3,
                _ => 1,
            })
        }
    }
}
