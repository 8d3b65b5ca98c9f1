//! Experiment configuration, calibration, co-located runs and sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::profiler::{Profiler, DEFAULT_RUNS};
use crate::scheduler::{
    run_policy, CsvSink, EventSink, NullSink, Policy, SchedError, Scenario, SchedulerConfig, TaskScript,
    DEFAULT_QUANTUM,
};
use crate::sim::{GpuSpec, KernelCostModel, Nanos, Priority, NS_PER_MS, NS_PER_US};
use crate::workloads::{
    compute_metrics, generate_arrivals, load_trace, rescale, rescale_factor_for_load, suite, KernelSpec,
    RunOutcome, WorkloadError, WorkloadKind, WorkloadSpec,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Problems with the configuration itself.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("{0}")]
    Invalid(String),
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "suite::default_gpu")]
    pub gpu: GpuSpec,
    #[serde(default)]
    pub overheads: Overheads,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    pub workloads: Vec<WorkloadEntry>,
    #[serde(default)]
    pub outputs: Outputs,
}

fn default_warmup() -> f64 {
    0.1
}

/// Defaults for kernels declared inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overheads {
    pub launch_overhead_us: f64,
    pub ptb_iteration_fraction: f64,
    pub ptb_iteration_fixed_us: f64,
}

impl Default for Overheads {
    fn default() -> Self {
        Self {
            launch_overhead_us: KernelCostModel::DEFAULT_LAUNCH_OVERHEAD as f64 / NS_PER_US as f64,
            ptb_iteration_fraction: 0.02,
            ptb_iteration_fixed_us: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub policies: Vec<Policy>,
    pub threshold_ms: f64,
    pub quantum_ms: f64,
    pub profile_runs: u32,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            policies: vec![Policy::Tally],
            threshold_ms: crate::profiler::DEFAULT_THRESHOLD as f64 / NS_PER_MS as f64,
            quantum_ms: DEFAULT_QUANTUM as f64 / NS_PER_MS as f64,
            profile_runs: DEFAULT_RUNS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// Directory for metrics, manifest and event logs.
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub event_log: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub kind: Option<WorkloadKind>,
    pub priority: Option<Priority>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kernels: Vec<KernelEntry>,
    pub trace: Option<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    pub name: String,
    pub blocks: u64,
    #[serde(default = "default_tpb")]
    pub threads_per_block: u32,
    pub block_us: f64,
    #[serde(default = "one")]
    pub repeat: u32,
    #[serde(default)]
    pub inter_block_dependent: bool,
    pub launch_overhead_us: Option<f64>,
    pub ptb_iteration_overhead_us: Option<f64>,
}

fn default_tpb() -> u32 {
    suite::THREADS_PER_BLOCK
}

fn one() -> u32 {
    1
}

/// Synthetic (`load`) or file-based request arrivals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub load: Option<f64>,
    pub seed: Option<u64>,
    pub file: Option<PathBuf>,
    /// Time factor applied to a trace file.
    pub scale: Option<f64>,
    /// Rescale a trace file to this load instead of using `scale`.
    pub target_load: Option<f64>,
}

/// Command-line style overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub policies: Option<Vec<Policy>>,
    pub threshold_ms: Option<f64>,
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub out_dir: Option<PathBuf>,
    /// Replaces the high-priority task's arrivals with this file.
    pub trace: Option<PathBuf>,
    /// Replaces the high-priority task's arrivals with a synthetic load.
    pub load: Option<f64>,
}

fn ms(x: f64) -> Nanos {
    (x * NS_PER_MS as f64).round() as Nanos
}

fn us(x: f64) -> Nanos {
    (x * NS_PER_US as f64).round() as Nanos
}

impl ExperimentConfig {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Probe {
            schema: Option<u32>,
        }
        let probe: Probe = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        match probe.schema {
            Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(ConfigError::Schema(v)),
            None => return Err(invalid("missing `schema` field")),
        }
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|_| ConfigError::MissingFile(path.to_path_buf()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for w in &mut self.workloads {
            if let Some(f) = w.trace.as_mut().and_then(|t| t.file.as_mut()) {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        if let Some(d) = self.outputs.dir.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(p) = &o.policies {
            self.scheduler.policies = p.clone();
        }
        if let Some(t) = o.threshold_ms {
            self.scheduler.threshold_ms = t;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = o.duration_s {
            self.duration_s = d;
        }
        if let Some(d) = &o.out_dir {
            self.outputs.dir = Some(d.clone());
        }
        if o.trace.is_some() || o.load.is_some() {
            let hp = self.high_priority_index()?;
            let t = self.workloads[hp].trace.get_or_insert_with(TraceEntry::default);
            if let Some(f) = &o.trace {
                *t = TraceEntry {
                    file: Some(f.clone()),
                    target_load: o.load,
                    ..TraceEntry::default()
                };
            } else {
                *t = TraceEntry {
                    load: o.load,
                    seed: t.seed,
                    ..TraceEntry::default()
                };
            }
        }
        self.validate()
    }

    fn high_priority_index(&self) -> Result<usize, ConfigError> {
        let specs = self.workload_specs()?;
        let hp: Vec<usize> = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.priority == Priority::High)
            .map(|(i, _)| i)
            .collect();
        match hp.as_slice() {
            [i] => Ok(*i),
            _ => Err(invalid(format!(
                "exactly one high-priority workload is required, found {}",
                hp.len()
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != SCHEMA_VERSION {
            return Err(ConfigError::Schema(self.schema));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(invalid("duration_s must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction must be in [0, 1)"));
        }
        self.gpu.validate().map_err(|e| invalid(e.to_string()))?;
        let s = &self.scheduler;
        if s.policies.is_empty() {
            return Err(invalid("scheduler.policies is empty"));
        }
        if !(s.threshold_ms.is_finite() && s.threshold_ms > 0.0) {
            return Err(invalid("scheduler.threshold_ms must be positive"));
        }
        if !(s.quantum_ms.is_finite() && s.quantum_ms > 0.0) {
            return Err(invalid("scheduler.quantum_ms must be positive"));
        }
        let specs = self.workload_specs()?;
        self.high_priority_index()?;
        for (w, spec) in self.workloads.iter().zip(&specs) {
            for k in &spec.kernels {
                if self.gpu.blocks_per_sm_for(k.cost.threads_per_block) == 0 {
                    return Err(invalid(format!(
                        "{}/{}: {} threads per block do not fit on an SM",
                        spec.name, k.name, k.cost.threads_per_block
                    )));
                }
            }
            match (spec.kind, &w.trace) {
                (WorkloadKind::Inference, None) => {
                    return Err(invalid(format!("inference workload `{}` needs a trace", spec.name)))
                }
                (WorkloadKind::Training, Some(_)) => {
                    return Err(invalid(format!("training workload `{}` cannot have a trace", spec.name)))
                }
                (WorkloadKind::Inference, Some(t)) => validate_trace(&spec.name, t)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Resolved workload definitions, in config order.
    pub fn workload_specs(&self) -> Result<Vec<WorkloadSpec>, ConfigError> {
        self.workloads.iter().map(|w| self.workload_spec(w)).collect()
    }

    fn workload_spec(&self, w: &WorkloadEntry) -> Result<WorkloadSpec, ConfigError> {
        let mut spec = match &w.preset {
            Some(p) => {
                if !w.kernels.is_empty() {
                    return Err(invalid(format!("workload `{p}`: give either a preset or kernels")));
                }
                suite::by_name(p).ok_or_else(|| {
                    invalid(format!("unknown preset `{p}` (known: {})", suite::PRESETS.join(", ")))
                })?
            }
            None => {
                let name = w.name.clone().ok_or_else(|| invalid("workload without preset needs a name"))?;
                let kind = w.kind.ok_or_else(|| invalid(format!("workload `{name}` needs a kind")))?;
                let priority = w.priority.ok_or_else(|| invalid(format!("workload `{name}` needs a priority")))?;
                let mut kernels = Vec::new();
                for k in &w.kernels {
                    kernels.extend(self.kernel_specs(&name, k)?);
                }
                if kernels.is_empty() {
                    return Err(invalid(format!("workload `{name}` has no kernels")));
                }
                WorkloadSpec {
                    name,
                    kind,
                    priority,
                    kernels,
                }
            }
        };
        if w.preset.is_some() {
            if let Some(n) = &w.name {
                spec.name = n.clone();
            }
            if let Some(p) = w.priority {
                spec.priority = p;
            }
            if let Some(k) = w.kind {
                spec.kind = k;
            }
        }
        Ok(spec)
    }

    fn kernel_specs(&self, workload: &str, k: &KernelEntry) -> Result<Vec<KernelSpec>, ConfigError> {
        if k.blocks == 0 || k.threads_per_block == 0 || k.repeat == 0 {
            return Err(invalid(format!("{workload}/{}: blocks, threads_per_block and repeat must be positive", k.name)));
        }
        if !(k.block_us.is_finite() && k.block_us > 0.0) {
            return Err(invalid(format!("{workload}/{}: block_us must be positive", k.name)));
        }
        let o = &self.overheads;
        let bd = us(k.block_us);
        let cost = KernelCostModel {
            block_duration: bd,
            launch_overhead: us(k.launch_overhead_us.unwrap_or(o.launch_overhead_us)),
            ptb_iteration_overhead: k
                .ptb_iteration_overhead_us
                .map(us)
                .unwrap_or_else(|| (bd as f64 * o.ptb_iteration_fraction).round() as Nanos + us(o.ptb_iteration_fixed_us)),
            threads_per_block: k.threads_per_block,
            total_blocks: k.blocks,
        };
        Ok((0..k.repeat)
            .map(|i| KernelSpec {
                name: if k.repeat == 1 { k.name.clone() } else { format!("{}{i}", k.name) },
                cost,
                inter_block_dependent: k.inter_block_dependent,
            })
            .collect())
    }

    pub fn duration(&self) -> Nanos {
        ms(self.duration_s * 1000.0)
    }

    pub fn scheduler_config(&self, policy: Policy) -> SchedulerConfig {
        SchedulerConfig {
            policy,
            threshold: ms(self.scheduler.threshold_ms),
            quantum: ms(self.scheduler.quantum_ms),
        }
    }

    /// Task scripts with arrivals materialized.
    pub fn scripts(&self) -> Result<Vec<TaskScript>, ExperimentError> {
        let specs = self.workload_specs()?;
        let d = self.duration();
        let mut out = Vec::with_capacity(specs.len());
        for (i, (w, spec)) in self.workloads.iter().zip(specs).enumerate() {
            let arrivals = match &w.trace {
                None => Vec::new(),
                Some(t) => {
                    let latency = spec.isolated_unit_latency(&self.gpu);
                    if let Some(load) = t.load {
                        let seed = t.seed.unwrap_or(self.seed.wrapping_add(i as u64));
                        generate_arrivals(load, latency, d, seed)?
                    } else {
                        let file = t.file.as_ref().expect("validated");
                        let raw = load_trace(file)?;
                        let factor = match (t.target_load, t.scale) {
                            (Some(l), _) => rescale_factor_for_load(&raw, latency, l)?,
                            (None, Some(s)) => s,
                            (None, None) => 1.0,
                        };
                        rescale(&raw, factor)?.into_iter().filter(|&a| a < d).collect()
                    }
                }
            };
            out.push(TaskScript { spec, arrivals });
        }
        Ok(out)
    }

    pub fn scenario(&self, tasks: Vec<TaskScript>) -> Scenario {
        let d = self.duration();
        Scenario {
            gpu: self.gpu,
            tasks,
            duration: d,
            warmup: (d as f64 * self.warmup_fraction).round() as Nanos,
            drain_limit: d,
            placement_seed: self.seed,
        }
    }
}

fn validate_trace(name: &str, t: &TraceEntry) -> Result<(), ConfigError> {
    match (t.load, &t.file) {
        (Some(l), None) => {
            if !(l > 0.0 && l < 1.0) {
                return Err(invalid(format!("`{name}`: load must be in (0, 1), got {l}")));
            }
            if t.scale.is_some() || t.target_load.is_some() {
                return Err(invalid(format!("`{name}`: scale and target_load apply to trace files")));
            }
        }
        (None, Some(f)) => {
            if !f.exists() {
                return Err(ConfigError::MissingFile(f.clone()));
            }
            if let Some(l) = t.target_load {
                if !(l > 0.0 && l < 1.0) {
                    return Err(invalid(format!("`{name}`: target_load must be in (0, 1), got {l}")));
                }
            }
            if let Some(s) = t.scale {
                if !(s.is_finite() && s > 0.0) {
                    return Err(invalid(format!("`{name}`: scale must be positive")));
                }
            }
        }
        _ => return Err(invalid(format!("`{name}`: trace needs exactly one of `load` or `file`"))),
    }
    Ok(())
}

/// A task run alone on the GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub throughput: f64,
    pub p99_ms: Option<f64>,
}

/// Shares calibration runs between experiments with the same GPU, window
/// and task script.
#[derive(Debug, Default)]
pub struct CalibrationCache {
    map: Mutex<HashMap<String, Calibration>>,
}

impl CalibrationCache {
    fn key(sc: &Scenario, task: &TaskScript) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(sc.gpu, sc.duration, sc.warmup, sc.placement_seed)).unwrap());
        h.update(serde_json::to_vec(&(&task.spec.kind, &task.spec.kernels)).unwrap());
        h.update(serde_json::to_vec(&task.arrivals).unwrap());
        hex::encode(h.finalize())
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs `task` alone with every kernel issued unmodified.
pub fn calibrate(cfg: &ExperimentConfig, task: &TaskScript, cache: &CalibrationCache) -> Result<Calibration, ExperimentError> {
    let mut alone = task.clone();
    alone.spec.priority = Priority::High;
    let sc = cfg.scenario(vec![alone]);
    let key = CalibrationCache::key(&sc, task);
    if let Some(c) = cache.map.lock().unwrap().get(&key) {
        return Ok(c.clone());
    }
    let mut profiler = Profiler::new(cfg.gpu, 1);
    let run = run_policy(&SchedulerConfig::new(Policy::Eager), &sc, &mut profiler, &mut NullSink)?;
    let throughput = run.outcome.throughput(0);
    let p99_ms = match task.spec.kind {
        WorkloadKind::Inference => compute_metrics(&run.outcome, &[throughput])?.tasks[0].p99_ms,
        WorkloadKind::Training => None,
    };
    let c = Calibration { throughput, p99_ms };
    cache.map.lock().unwrap().insert(key, c.clone());
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub priority: Priority,
    pub kind: WorkloadKind,
    pub p99_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub calibrated_p99_ms: Option<f64>,
    pub throughput: f64,
    pub standalone_throughput: f64,
    pub normalized_throughput: f64,
    /// Requests arriving inside the measurement window.
    pub arrived: usize,
    /// Of those, completed before the window closed.
    pub completed_by_cutoff: usize,
    /// Of those, still in progress when the window closed.
    pub in_flight_at_cutoff: usize,
    pub censored: usize,
}

impl TaskReport {
    /// Relative p99 increase over the task running alone.
    pub fn p99_overhead(&self) -> Option<f64> {
        Some(self.p99_ms? / self.calibrated_p99_ms? - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: Policy,
    pub tasks: Vec<TaskReport>,
    pub system_throughput: f64,
    pub event_count: u64,
    pub event_digest: String,
}

impl PolicyReport {
    pub fn high_priority(&self) -> &TaskReport {
        self.tasks
            .iter()
            .find(|t| t.priority == Priority::High)
            .expect("validated config has a high-priority task")
    }

    /// Sum of best-effort normalized throughputs.
    pub fn best_effort_throughput(&self) -> f64 {
        self.tasks
            .iter()
            .filter(|t| t.priority == Priority::BestEffort)
            .map(|t| t.normalized_throughput)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub policies: Vec<PolicyReport>,
}

pub const CSV_HEADER: &str = "policy,task,p99_ms,norm_throughput,system_throughput";

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl ExperimentReport {
    pub fn policy(&self, p: Policy) -> Option<&PolicyReport> {
        self.policies.iter().find(|r| r.policy == p)
    }

    /// Rows without a header.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for p in &self.policies {
            for t in &p.tasks {
                rows.push(format!(
                    "{},{},{},{:.6},{:.6}",
                    p.policy,
                    t.name,
                    opt(t.p99_ms),
                    t.normalized_throughput,
                    p.system_throughput
                ));
            }
        }
        rows
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.csv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }
}

fn task_report(outcome: &RunOutcome, i: usize, cal: &Calibration, metrics: &crate::workloads::TaskMetrics) -> TaskReport {
    let t = &outcome.tasks[i];
    let (mut arrived, mut completed) = (0, 0);
    if t.kind == WorkloadKind::Inference {
        for u in &t.units {
            if u.arrival >= outcome.window_start && u.arrival < outcome.window_end {
                arrived += 1;
                if u.completion.is_some_and(|c| c < outcome.window_end) {
                    completed += 1;
                }
            }
        }
    }
    TaskReport {
        name: t.name.clone(),
        priority: t.priority,
        kind: t.kind,
        p99_ms: metrics.p99_ms,
        mean_ms: metrics.mean_ms,
        calibrated_p99_ms: cal.p99_ms,
        throughput: metrics.throughput,
        standalone_throughput: cal.throughput,
        normalized_throughput: metrics.normalized_throughput,
        arrived,
        completed_by_cutoff: completed,
        in_flight_at_cutoff: arrived - completed,
        censored: metrics.censored,
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp"))
}

/// Writes `bytes` next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = temp_path(path);
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Runs every configured policy. With `event_dir`, each policy's event log
/// is written there as `events-<policy>.csv`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    event_dir: Option<&Path>,
    cache: &CalibrationCache,
) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let scripts = cfg.scripts()?;
    let calibrations = scripts
        .iter()
        .map(|t| calibrate(cfg, t, cache))
        .collect::<Result<Vec<_>, _>>()?;
    let standalone: Vec<f64> = calibrations.iter().map(|c| c.throughput).collect();
    let sc = cfg.scenario(scripts);
    let mut profiler = Profiler::new(cfg.gpu, cfg.scheduler.profile_runs);
    let mut policies = Vec::new();
    for &policy in &cfg.scheduler.policies {
        log::info!("running {policy}");
        let sched = cfg.scheduler_config(policy);
        let run = match event_dir {
            Some(dir) => {
                let path = dir.join(format!("events-{policy}.csv"));
                let tmp = temp_path(&path);
                let file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
                let mut sink = CsvSink::new(BufWriter::new(file))?;
                let run = run_policy(&sched, &sc, &mut profiler, &mut sink as &mut dyn EventSink)?;
                let mut w = sink.into_inner();
                std::io::Write::flush(&mut w).map_err(|e| io_err(&tmp, e))?;
                drop(w);
                fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
                run
            }
            None => run_policy(&sched, &sc, &mut profiler, &mut NullSink)?,
        };
        let metrics = compute_metrics(&run.outcome, &standalone)?;
        let tasks = metrics
            .tasks
            .iter()
            .enumerate()
            .map(|(i, m)| task_report(&run.outcome, i, &calibrations[i], m))
            .collect();
        policies.push(PolicyReport {
            policy,
            tasks,
            system_throughput: metrics.system_throughput,
            event_count: run.outcome.event_count,
            event_digest: run.outcome.event_digest,
        });
    }
    Ok(ExperimentReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        policies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Threshold,
    Load,
    BeCount,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Threshold => "threshold",
            SweepAxis::Load => "load",
            SweepAxis::BeCount => "be-count",
        }
    }

    /// Grid used when none is given.
    pub fn default_values(&self) -> Vec<f64> {
        match self {
            SweepAxis::Threshold => vec![0.01, 0.0316, 0.1, 0.316, 1.0, 3.16, 10.0],
            SweepAxis::Load => vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            SweepAxis::BeCount => (1..=10).map(f64::from).collect(),
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "threshold" => Ok(SweepAxis::Threshold),
            "load" => Ok(SweepAxis::Load),
            "be-count" => Ok(SweepAxis::BeCount),
            _ => Err(format!("unknown sweep axis `{s}` (expected threshold, load or be-count)")),
        }
    }
}

/// The config for one point of a sweep.
pub fn sweep_point(base: &ExperimentConfig, axis: &SweepAxis, value: f64) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Threshold => cfg.scheduler.threshold_ms = value,
        SweepAxis::Load => {
            let hp = cfg.high_priority_index()?;
            let t = cfg.workloads[hp].trace.get_or_insert_with(TraceEntry::default);
            if t.file.is_some() {
                t.target_load = Some(value);
                t.scale = None;
            } else {
                t.load = Some(value);
            }
        }
        SweepAxis::BeCount => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(invalid(format!("be-count must be a positive integer, got {value}")));
            }
            let n = value as usize;
            let specs = cfg.workload_specs()?;
            let (hp, be): (Vec<_>, Vec<_>) = cfg
                .workloads
                .iter()
                .cloned()
                .zip(specs)
                .partition(|(_, s)| s.priority == Priority::High);
            if be.is_empty() {
                return Err(invalid("be-count sweep needs at least one best-effort workload"));
            }
            let mut workloads: Vec<WorkloadEntry> = hp.into_iter().map(|(w, _)| w).collect();
            for i in 0..n {
                let (w, s) = &be[i % be.len()];
                let mut w = w.clone();
                if n > be.len() {
                    w.name = Some(format!("{}-{}", s.name, i));
                }
                workloads.push(w);
            }
            cfg.workloads = workloads;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<(f64, ExperimentReport)>,
}

pub const SWEEP_CSV_HEADER: &str = "axis,value,policy,task,p99_ms,norm_throughput,system_throughput";

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for (v, r) in &self.points {
            for row in r.csv_rows() {
                let _ = writeln!(s, "{},{v},{row}", self.axis.name());
            }
        }
        s
    }
}

/// Runs the sweep points in parallel; results keep the order of `values`.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    cache: &CalibrationCache,
) -> Result<SweepReport, ExperimentError> {
    let configs = values
        .iter()
        .map(|&v| sweep_point(base, &axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    // calibrations are shared, so compute them once up front
    for c in &configs {
        for t in c.scripts()? {
            calibrate(c, &t, cache)?;
        }
    }
    let reports = configs
        .par_iter()
        .map(|c| run_experiment(c, None, cache))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepReport {
        axis,
        points: values.iter().copied().zip(reports).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// The effective config after overrides.
    pub config: ExperimentConfig,
    pub sweep: Option<(SweepAxis, Vec<f64>)>,
    pub files: Vec<ManifestFile>,
    pub event_digests: Vec<(String, String)>,
}

/// Writes `metrics.csv` (or `sweep.csv`), `report.json` and
/// `manifest.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    csv_name: &str,
    csv: &str,
    report_json: &str,
    sweep: Option<(SweepAxis, Vec<f64>)>,
    event_digests: Vec<(String, String)>,
) -> Result<Manifest, ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for (name, body) in [(csv_name, csv), ("report.json", report_json)] {
        write_atomic(&dir.join(name), body.as_bytes())?;
        files.push(ManifestFile {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(body.as_bytes())),
        });
    }
    let manifest = Manifest {
        tool: "tallysim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
        sweep,
        files,
        event_digests,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}
