use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use efcp_core::optim::{memory_report, RunOptions};
use efcp_core::verify::{run_suite, SuiteSize};
use efcp_core::{run_task, EfcpError, OptimizerKind, Precision, RunConfig, Schedule, TaskSpec};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "efcp",
    version,
    about = "Error-feedback compressed preconditioners"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write metrics.jsonl, config.json and memory.json.
    Run(RunArgs),
    /// Run the randomized oracle-equivalence checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Start from a config.json written by an earlier run; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// quadratic, logistic, mlp or csv:<path>
    #[arg(long)]
    task: Option<TaskSpec>,
    #[arg(long)]
    opt: Option<OptimizerKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    /// Decoupled weight decay.
    #[arg(long)]
    wd: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// Gradient window size.
    #[arg(long)]
    m: Option<usize>,
    /// Fraction of entries kept per block by Top-k, in (0, 1].
    #[arg(long)]
    density: Option<f64>,
    /// Low-rank compression rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Top-k block size.
    #[arg(long)]
    block: Option<usize>,
    /// M-FAC damping.
    #[arg(long)]
    lambda: Option<f64>,
    /// GGT damping.
    #[arg(long)]
    eps: Option<f64>,
    /// Storage precision of sparse window values.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Error feedback on compressed optimizers.
    #[arg(long)]
    ef: Option<bool>,
    /// Bound on the preconditioned update norm.
    #[arg(long)]
    clip: Option<f64>,
    /// Parameter dimension (quadratic) or feature count (logistic, mlp).
    #[arg(long)]
    dim: Option<usize>,
    /// Samples in synthetic datasets.
    #[arg(long)]
    samples: Option<usize>,
    /// Mini-batch size, 0 for full batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Gradient noise level of the quadratic task.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Worker threads for the kernels; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Record per-step wall time in the `ms` field (0 otherwise, which keeps
    /// metrics.jsonl byte-reproducible).
    #[arg(long)]
    wall_time: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SizesArg::Default)]
    sizes: SizesArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Constant,
    Linear,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SizesArg {
    Default,
    Large,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag.clone() {
                    c.$field = v.into();
                }
            };
        }
        set!(task => task);
        set!(opt => optimizer);
        set!(steps => steps);
        set!(lr => lr);
        set!(wd => weight_decay);
        set!(momentum => momentum);
        set!(m => m);
        set!(density => density);
        set!(rank => rank);
        set!(block => block_size);
        set!(lambda => lambda);
        set!(eps => eps);
        set!(ef => error_feedback);
        set!(dim => dim);
        set!(samples => samples);
        set!(batch => batch_size);
        set!(noise => noise);
        set!(seed => seed);
        if let Some(s) = self.schedule {
            c.schedule = match s {
                ScheduleArg::Constant => Schedule::Constant,
                ScheduleArg::Linear => Schedule::Linear,
            };
        }
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if self.clip.is_some() {
            c.clip = self.clip;
        }
        Ok(c)
    }
}

fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            anyhow::bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Flag spelling for a config field reported by validation.
fn flag_name(field: &str) -> &str {
    match field {
        "block_size" => "block",
        "weight_decay" => "wd",
        "batch_size" => "batch",
        other => other,
    }
}

fn config_error(err: &EfcpError) -> Option<String> {
    match err {
        EfcpError::Parameter { name, reason } => {
            Some(format!("invalid --{}: {reason}", flag_name(name)))
        }
        EfcpError::Dataset(_) | EfcpError::Format(_) => Some(err.to_string()),
        _ => None,
    }
}

fn cmd_run(args: &RunArgs) -> ExitCode {
    let config = match args.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = init_threads(args.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let prepared = config.validate().and_then(|()| config.build_task());
    let task = match prepared {
        Ok(t) => t,
        Err(e) => {
            let msg = config_error(&e).unwrap_or_else(|| e.to_string());
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match execute(args, &config, task.as_ref()) {
        Ok(final_loss) => {
            println!(
                "{} on {}: {} steps, final loss {final_loss:.6e}, outputs in {}",
                config.optimizer,
                config.task,
                config.steps,
                args.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = match e.downcast_ref::<EfcpError>() {
                Some(EfcpError::Diverged { .. }) => EXIT_DIVERGED,
                Some(inner) if config_error(inner).is_some() => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn execute(args: &RunArgs, config: &RunConfig, task: &dyn efcp_core::Task) -> anyhow::Result<f64> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("config.json"), config)?;
    write_json(
        &args.out.join("memory.json"),
        &memory_report(config, &task.layer_shapes())?,
    )?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path)
            .with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let options = RunOptions {
        wall_time: args.wall_time,
    };
    let result = run_task(config, task, options, |record| {
        serde_json::to_writer(&mut metrics, record)
            .map_err(|e| EfcpError::Format(e.to_string()))?;
        metrics.write_all(b"\n")?;
        Ok(())
    });
    metrics.flush()?;
    Ok(result?.final_loss)
}

fn cmd_verify(args: &VerifyArgs) -> ExitCode {
    if let Err(e) = init_threads(args.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let size = match args.sizes {
        SizesArg::Default => SuiteSize::Default,
        SizesArg::Large => SuiteSize::Large,
    };
    let results = run_suite(size, args.seed);
    println!(
        "{:<36} {:>9} {:>12} {:>10}  result",
        "check", "instances", "worst", "tolerance"
    );
    for r in &results {
        println!(
            "{:<36} {:>9} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.instances,
            r.worst,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} checks failed", results.len());
        ExitCode::from(EXIT_FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
    }
}
