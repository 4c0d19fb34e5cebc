use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use servetune::backend::InferenceBackend;
use servetune::flow::{self, archive_dir, Archive, ArchiveRecord, BackendSpec, FlowStatus, SpecError};
use servetune::http::HttpBackend;
use servetune::loadgen::{run_trial, TrialPlan};
use servetune::model::{LoadPattern, RuntimeConfig};
use servetune::sim::{SimBackend, SimProfile};
use servetune::slo::SloSpec;
use servetune::sweep::{run_sweep, SweepConfig};
use servetune::tuner::{run_tuning, SearchSpace, TunerConfig};

#[derive(Parser)]
#[command(name = "servetune", version, about = "Capacity sweeps, runtime tuning and compression flows for LLM serving")]
struct Cli {
    /// Archive directory (overrides the environment variable).
    #[arg(long, global = true, env = flow::ARCHIVE_DIR_ENV)]
    archive_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and run a job specification.
    Submit { jobspec: PathBuf },
    /// Check a job specification against the schema without running it.
    Validate { jobspec: PathBuf },
    /// Find the highest sustainable request rate for one backend.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Search runtime configurations on the simulated backend.
    Tune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write arrival/completion regression data from an archive as CSV.
    PlotStability {
        archive: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one open-loop trial on the simulator and dump its event trace as JSON lines.
    SimTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Input for `sweep` and `sim-trace`.
#[derive(Debug, Serialize, Deserialize)]
struct SweepJob {
    #[serde(default = "default_sweep_name")]
    name: String,
    #[serde(default)]
    backend: BackendSpec,
    pattern: LoadPattern,
    #[serde(default)]
    runtime: Option<RuntimeConfig>,
    #[serde(default)]
    slos: SloSpec,
    #[serde(default)]
    sweep: SweepConfig,
}

fn default_sweep_name() -> String {
    "sweep".into()
}

/// Input for `tune`.
#[derive(Debug, Serialize, Deserialize)]
struct TuneJob {
    #[serde(default = "default_tune_name")]
    name: String,
    #[serde(default)]
    profile: SimProfile,
    pattern: LoadPattern,
    #[serde(default)]
    slos: SloSpec,
    #[serde(default)]
    tuner: TunerConfig,
    #[serde(default)]
    space: Option<SearchSpace>,
    #[serde(default = "default_slots")]
    slots: u32,
}

fn default_tune_name() -> String {
    "tune".into()
}

fn default_slots() -> u32 {
    8
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_archive(archive: &Archive, dir: &Path) -> Result<()> {
    let path = archive.write_to(dir)?;
    eprintln!("archive written to {}", path.display());
    Ok(())
}

fn submit(jobspec: &Path, dir: &Path) -> Result<ExitCode> {
    let spec = match flow::load_spec(jobspec) {
        Ok(s) => s,
        Err(e @ (SpecError::SchemaViolation(_) | SpecError::UnknownFlow(_))) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    let outcome = flow::submit(&spec);
    write_archive(&outcome.archive, dir)?;
    if let Some(summary) = outcome.archive.summary() {
        print_json(summary)?;
    }
    Ok(if outcome.status == FlowStatus::Ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn validate(jobspec: &Path) -> Result<ExitCode> {
    match flow::load_spec(jobspec) {
        Ok(spec) => {
            println!("valid: {} (flow {})", spec.name, spec.flow);
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ (SpecError::SchemaViolation(_) | SpecError::UnknownFlow(_) | SpecError::Parse(_))) => {
            eprintln!("{e}");
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn backend_for(job: &SweepJob) -> Result<(Box<dyn InferenceBackend>, Option<RuntimeConfig>)> {
    Ok(match &job.backend {
        BackendSpec::Sim(profile) => {
            let config = job.runtime.unwrap_or_else(|| RuntimeConfig::default_for(&job.pattern));
            (Box::new(SimBackend::new(profile.model(config))?), Some(config))
        }
        BackendSpec::Http(endpoint) => (Box::new(HttpBackend::new(endpoint.clone())?), None),
    })
}

fn sweep(config: &Path, dir: &Path) -> Result<ExitCode> {
    let job: SweepJob = read_json(config)?;
    let (mut backend, runtime) = backend_for(&job)?;
    let sweep_config = SweepConfig { slos: job.slos.clone(), ..job.sweep.clone() };
    let result = run_sweep(&sweep_config, &job.pattern, backend.as_mut())?;
    let mut archive = Archive::new("sweep", &job.name, job.pattern.seed, serde_json::to_value(&job)?);
    archive.push(ArchiveRecord::Sweep { target: backend.describe(), config: runtime, sweep: result.clone() });
    write_archive(&archive, dir)?;
    print_json(&result.summary())?;
    Ok(ExitCode::SUCCESS)
}

fn tune(config: &Path, dir: &Path) -> Result<ExitCode> {
    let job: TuneJob = read_json(config)?;
    let space = job.space.clone().unwrap_or_else(|| SearchSpace::for_pattern(&job.pattern, job.slots));
    space.validate(&job.pattern, Some(job.slots))?;
    let profile = job.profile.clone();
    let factory = move |c: &RuntimeConfig| -> Result<Box<dyn InferenceBackend>, servetune::backend::BackendError> {
        Ok(Box::new(SimBackend::new(profile.model(*c))?))
    };
    let result = run_tuning(&space, &job.pattern, &job.slos, &factory, &job.tuner)?;
    let mut archive = Archive::new("tune", &job.name, job.tuner.seed, serde_json::to_value(&job)?);
    let record = result.archive();
    archive.push(ArchiveRecord::Tuning(record.clone()));
    write_archive(&archive, dir)?;
    print_json(&serde_json::json!({
        "best_config": record.best_config,
        "best_fitness": record.best_fitness,
        "best_index": record.best_index,
        "trials": record.trials.len(),
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn plot_stability(path: &Path, output: Option<&Path>) -> Result<ExitCode> {
    let archive = Archive::read(path)?;
    let sink: Box<dyn Write> = match output {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut csv = csv::Writer::from_writer(sink);
    csv.write_record(["target", "trial", "rate", "request_id", "arrival", "completion", "fitted", "beta", "alpha", "stable"])?;
    let mut rows = 0;
    for (target, sweep) in archive.sweeps() {
        for (i, t) in sweep.open_loop_trials().enumerate() {
            let Some(fit) = &t.trial.stability else { continue };
            for r in &t.trial.records {
                let Some(c) = r.completion_ts.filter(|_| r.is_ok()) else { continue };
                csv.write_record([
                    target.to_string(),
                    i.to_string(),
                    t.trial.rate.to_string(),
                    r.request_id.to_string(),
                    r.arrival_ts.to_string(),
                    c.to_string(),
                    fit.fitted_completion(r.arrival_ts).to_string(),
                    fit.beta.to_string(),
                    fit.alpha.to_string(),
                    fit.is_stable.to_string(),
                ])?;
                rows += 1;
            }
        }
    }
    csv.flush()?;
    if rows == 0 {
        bail!("{} contains no open-loop trials with a stability fit", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn sim_trace(config: &Path, rate: f64, output: Option<&Path>) -> Result<ExitCode> {
    let job: SweepJob = read_json(config)?;
    let BackendSpec::Sim(profile) = &job.backend else {
        bail!("sim-trace needs a simulated backend");
    };
    let runtime = job.runtime.unwrap_or_else(|| RuntimeConfig::default_for(&job.pattern));
    let mut backend = SimBackend::new(profile.model(runtime))?;
    backend.server_mut().enable_trace();
    let plan = TrialPlan::open_loop(rate, job.pattern.clone()).with_slos(job.slos.clone());
    if let Err(e) = run_trial(&plan, &mut backend) {
        eprintln!("trial did not complete normally: {e}");
    }
    let mut out = String::new();
    for event in backend.server_mut().take_trace() {
        out.push_str(&serde_json::to_string(&event)?);
        out.push('\n');
    }
    match output {
        Some(p) => std::fs::write(p, out)?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let dir = cli.archive_dir.unwrap_or_else(archive_dir);
    let result = match &cli.command {
        Command::Submit { jobspec } => submit(jobspec, &dir),
        Command::Validate { jobspec } => validate(jobspec),
        Command::Sweep { config } => sweep(config, &dir),
        Command::Tune { config } => tune(config, &dir),
        Command::PlotStability { archive, output } => plot_stability(archive, output.as_deref()),
        Command::SimTrace { config, rate, output } => sim_trace(config, *rate, output.as_deref()),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
