use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tallysim_core::experiment::{
    run_experiment, run_sweep, write_outputs, CalibrationCache, ConfigError, ExperimentConfig, ExperimentError,
    Overrides, SweepAxis,
};
use tallysim_core::ir::{emit_kernel, interpret, parse_kernel, Dim3, ExecStatus, LaunchSpec, Word, DEFAULT_STEP_LIMIT};
use tallysim_core::profiler::{select_config, ProfileKey, Profiler};
use tallysim_core::scheduler::Policy;
use tallysim_core::sim::{Priority, NS_PER_MS, NS_PER_US};
use tallysim_core::transforms::{make_preemptible, slice_kernel, unify_synchronization, SliceFraction, TransformError};

const EXIT_RUNTIME: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_REFUSED: u8 = 3;
const EXIT_BAD_STATUS: u8 = 4;

#[derive(Parser)]
#[command(name = "tallysim", version, about = "GPU sharing simulator and kernel transformation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a block-level transformation to an IR kernel.
    Transform {
        input: PathBuf,
        /// slice(N/D), unify-sync or ptb(W)
        #[arg(long)]
        pass: Pass,
        /// Output IR file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Sub-launch table for slice; defaults to `<output>.launches.csv`.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Run an IR kernel in the reference interpreter.
    Interpret {
        input: PathBuf,
        /// TOML with `args` and `memory` (or `memory_words`).
        launch: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step_limit: Option<u64>,
    },
    /// Profile the best-effort kernels of an experiment.
    Profile {
        config: PathBuf,
        #[arg(long)]
        threshold_ms: Option<f64>,
        /// Load and update a JSON profile cache.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run an experiment under each configured policy.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: RunFlags,
    },
    /// Sweep one axis of an experiment.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; the axis default grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[command(flatten)]
        common: RunFlags,
    },
}

#[derive(Args)]
struct RunFlags {
    /// Policies to run (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    policy: Vec<Policy>,
    #[arg(long)]
    threshold_ms: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Arrival trace for the high-priority task.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Target load for the high-priority task.
    #[arg(long)]
    load: Option<f64>,
    /// Also write per-policy event logs (requires an output directory).
    #[arg(long)]
    event_log: bool,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            policies: (!self.policy.is_empty()).then(|| self.policy.clone()),
            threshold_ms: self.threshold_ms,
            seed: self.seed,
            duration_s: self.duration_s,
            out_dir: self.out_dir.clone(),
            trace: self.trace.clone(),
            load: self.load,
        }
    }
}

#[derive(Clone, Debug)]
enum Pass {
    Slice(SliceFraction),
    UnifySync,
    Ptb(u32),
}

impl FromStr for Pass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let arg = |p: &str| s.strip_prefix(p).and_then(|r| r.strip_prefix('(')).and_then(|r| r.strip_suffix(')'));
        if s == "unify-sync" {
            Ok(Pass::UnifySync)
        } else if let Some(f) = arg("slice") {
            f.parse().map(Pass::Slice).map_err(|_| format!("bad slice fraction `{f}`"))
        } else if let Some(w) = arg("ptb") {
            match w.parse() {
                Ok(w) if w > 0 => Ok(Pass::Ptb(w)),
                _ => Err(format!("bad worker count `{w}`")),
            }
        } else {
            Err(format!("unknown pass `{s}` (expected slice(N/D), unify-sync or ptb(W))"))
        }
    }
}

/// Error carrying its process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn new(code: u8, err: impl Into<anyhow::Error>) -> Self {
        Self { code, err: err.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Self::new(EXIT_RUNTIME, err)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_INVALID, e)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => c.into(),
            e => Self::new(EXIT_RUNTIME, e),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TALLYSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Transform {
            input,
            pass,
            output,
            table,
        } => transform(&input, &pass, output.as_deref(), table.as_deref()),
        Command::Interpret {
            input,
            launch,
            seed,
            step_limit,
        } => run_interpret(&input, &launch, seed, step_limit),
        Command::Profile {
            config,
            threshold_ms,
            cache,
        } => profile(&config, threshold_ms, cache.as_deref()),
        Command::Run { config, common } => run(&config, &common),
        Command::Sweep {
            config,
            axis,
            values,
            common,
        } => sweep(&config, axis, values, &common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_INVALID, anyhow!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn refusal(e: TransformError) -> Failure {
    match e {
        TransformError::InterBlockDependent(_) | TransformError::Precondition(_) => Failure::new(EXIT_REFUSED, e),
        e => Failure::new(EXIT_INVALID, e),
    }
}

fn transform(input: &Path, pass: &Pass, output: Option<&Path>, table: Option<&Path>) -> Result<u8, Failure> {
    let text = read(input)?;
    let k = parse_kernel(&text).map_err(|e| Failure::new(EXIT_INVALID, anyhow!("{}:{e}", input.display())))?;
    let (ir, launches) = match pass {
        Pass::UnifySync => (emit_kernel(&unify_synchronization(&k)), None),
        Pass::Slice(f) => {
            let plan = slice_kernel(&k, *f).map_err(refusal)?;
            (emit_kernel(&plan.base_kernel), Some(plan.table_csv()))
        }
        Pass::Ptb(w) => {
            let p = make_preemptible(&k, Dim3::linear(*w)).map_err(refusal)?;
            (emit_kernel(&p.kernel), None)
        }
    };
    match output {
        Some(out) => write(out, &ir)?,
        None => print!("{ir}"),
    }
    if let Some(csv) = launches {
        let path = table
            .map(Path::to_path_buf)
            .or_else(|| output.map(|o| o.with_extension("launches.csv")));
        match path {
            Some(p) => write(&p, &csv)?,
            None => eprint!("{csv}"),
        }
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LaunchFile {
    #[serde(default)]
    args: Vec<Word>,
    memory: Option<Vec<Word>>,
    memory_words: Option<usize>,
    #[serde(default)]
    seed: u64,
    step_limit: Option<u64>,
}

fn run_interpret(input: &Path, launch: &Path, seed: Option<u64>, step_limit: Option<u64>) -> Result<u8, Failure> {
    let k = parse_kernel(&read(input)?).map_err(|e| Failure::new(EXIT_INVALID, anyhow!("{}:{e}", input.display())))?;
    let lf: LaunchFile = toml::from_str(&read(launch)?)
        .map_err(|e| Failure::new(EXIT_INVALID, anyhow!("{}: {e}", launch.display())))?;
    let mut memory = lf.memory.unwrap_or_default();
    if let Some(n) = lf.memory_words {
        if n < memory.len() {
            return Err(Failure::new(EXIT_INVALID, anyhow!("memory_words is smaller than memory")));
        }
        memory.resize(n, 0);
    }
    let spec = LaunchSpec {
        kernel: &k,
        args: lf.args,
        global_memory: memory,
    };
    let res = interpret(
        &spec,
        seed.unwrap_or(lf.seed),
        step_limit.or(lf.step_limit).unwrap_or(DEFAULT_STEP_LIMIT),
    );
    let mut out = std::io::stdout().lock();
    let detail = match res.status {
        ExecStatus::DivergentBarrier { block } => format!(" block={block}"),
        ExecStatus::MemoryFault { block, addr } => format!(" block={block} addr={addr}"),
        _ => String::new(),
    };
    writeln!(out, "status={}{detail}", res.status.name()).context("stdout")?;
    writeln!(out, "steps={}", res.steps_executed).context("stdout")?;
    if let Some(mem) = &res.final_memory {
        writeln!(out, "addr,value").context("stdout")?;
        for (i, v) in mem.iter().enumerate() {
            writeln!(out, "{i},{v}").context("stdout")?;
        }
    }
    Ok(if res.status == ExecStatus::Completed { 0 } else { EXIT_BAD_STATUS })
}

fn profile(config: &Path, threshold_ms: Option<f64>, cache: Option<&Path>) -> Result<u8, Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let threshold_ms = threshold_ms.unwrap_or(cfg.scheduler.threshold_ms);
    if !(threshold_ms.is_finite() && threshold_ms > 0.0) {
        return Err(Failure::new(EXIT_INVALID, anyhow!("threshold must be positive")));
    }
    let threshold = (threshold_ms * NS_PER_MS as f64).round() as u64;
    let mut profiler = Profiler::new(cfg.gpu, cfg.scheduler.profile_runs);
    if let Some(p) = cache.filter(|p| p.exists()) {
        profiler.load(&read(p)?).map_err(|e| Failure::new(EXIT_INVALID, e))?;
    }
    let us = |n: u64| n as f64 / NS_PER_US as f64;
    let mut out = String::from("workload,kernel,candidate,kernel_latency_us,turnaround_estimate_us,selected\n");
    for w in cfg.workload_specs()? {
        if w.priority != Priority::BestEffort {
            continue;
        }
        for k in w.kernels.iter().filter(|k| !k.inter_block_dependent) {
            let key = ProfileKey::linear(&k.name, &k.cost);
            let records = profiler.profile(&key, &k.cost).map_err(anyhow::Error::from)?.to_vec();
            let chosen = select_config(&records, threshold);
            for r in &records {
                out.push_str(&format!(
                    "{},{},{},{:.3},{:.3},{}\n",
                    w.name,
                    k.name,
                    r.candidate,
                    us(r.kernel_latency),
                    us(r.turnaround_estimate),
                    chosen == Some(r.candidate),
                ));
            }
        }
    }
    print!("{out}");
    if let Some(p) = cache {
        write(p, &profiler.dump())?;
    }
    Ok(0)
}

fn load_config(path: &Path, flags: &RunFlags) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(&flags.overrides())?;
    if flags.event_log {
        cfg.outputs.event_log = true;
    }
    if cfg.outputs.event_log && cfg.outputs.dir.is_none() {
        return Err(Failure::new(EXIT_INVALID, anyhow!("event logs need an output directory (--out-dir)")));
    }
    Ok(cfg)
}

fn run(config: &Path, flags: &RunFlags) -> Result<u8, Failure> {
    let cfg = load_config(config, flags)?;
    let dir = cfg.outputs.dir.clone();
    if let Some(d) = &dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let event_dir = dir.as_deref().filter(|_| cfg.outputs.event_log);
    let report = run_experiment(&cfg, event_dir, &CalibrationCache::default())?;
    let csv = report.csv();
    print!("{csv}");
    if let Some(d) = &dir {
        let json = serde_json::to_string_pretty(&report).context("serializing report")?;
        let digests = report
            .policies
            .iter()
            .map(|p| (p.policy.to_string(), p.event_digest.clone()))
            .collect();
        write_outputs(d, &cfg, "metrics.csv", &csv, &json, None, digests)?;
    }
    Ok(0)
}

fn sweep(config: &Path, axis: SweepAxis, values: Vec<f64>, flags: &RunFlags) -> Result<u8, Failure> {
    let cfg = load_config(config, flags)?;
    let values = if values.is_empty() { axis.default_values() } else { values };
    let report = run_sweep(&cfg, axis.clone(), &values, &CalibrationCache::default())?;
    let csv = report.csv();
    print!("{csv}");
    if let Some(d) = &cfg.outputs.dir {
        let json = serde_json::to_string_pretty(&report).context("serializing report")?;
        write_outputs(d, &cfg, "sweep.csv", &csv, &json, Some((axis, values)), Vec::new())?;
    }
    Ok(0)
}
