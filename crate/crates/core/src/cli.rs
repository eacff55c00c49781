//! Experiment harness behind the `sicnav` binary: single runs, seeded
//! benchmarks and trace export.
//!
//! Configuration is an [`ExperimentConfig`] in JSON. `--config` takes either
//! a file path or a `dotted.key=value` override and may be repeated; later
//! arguments win.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mpc::{Controller, MpcConfig, PlanningMode};
use crate::prediction::{ExternalPredictor, MixtureMode};
use crate::sim::{
    aggregate_metrics, default_modes, generate_corridor, run_episode, BuiltinPredictor,
    EpisodeResult, Metrics, Predictor, PredictorKind, RemotePredictor, ScenarioConfig, StepRecord,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Written into the output directory when a benchmark stops early.
pub const PARTIAL_MARKER: &str = "PARTIAL";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Bilevel planner with constant-velocity-goal predictions.
    SicnavCvg,
    /// Bilevel planner with multi-sample predictions.
    SicnavSamples,
    /// Single-level planner with fixed constant-velocity predictions.
    MpcCvmm,
}

impl Variant {
    pub fn mode(self) -> PlanningMode {
        match self {
            Variant::SicnavCvg | Variant::SicnavSamples => PlanningMode::Bilevel,
            Variant::MpcCvmm => PlanningMode::FrozenPredictions,
        }
    }

    fn default_predictor(self) -> PredictorArg {
        match self {
            Variant::SicnavCvg => PredictorArg::Cvg,
            Variant::SicnavSamples => PredictorArg::Mixture,
            Variant::MpcCvmm => PredictorArg::Cvmm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorArg {
    Cvg,
    Cvmm,
    Mixture,
    /// Sample server at `--endpoint`.
    External,
}

/// Predictor resolved against a variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorChoice {
    Cvg,
    Cvmm,
    Mixture,
    External { endpoint: String },
}

/// Where scenarios come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioSource {
    /// Generated corridors for seeds `start..end`.
    Seeds { start: u64, end: u64 },
    /// A single scenario stored as JSON.
    File(PathBuf),
}

/// Tunables shared by `run` and `bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub humans: usize,
    /// Joint samples per prediction for sample-based predictors.
    pub num_samples: usize,
    pub mixture_modes: Vec<MixtureMode>,
    pub mixture_noise: f64,
    pub mpc: MpcConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            humans: 3,
            num_samples: 9,
            mixture_modes: default_modes(),
            mixture_noise: 0.05,
            mpc: MpcConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Applies one `dotted.key=value` override. The value is parsed as
    /// JSON and taken as a plain string when that fails.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override `{assignment}` is not key=value"))
        })?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{key}`")))?,
                Value::Array(items) => {
                    let index: usize = part.parse().map_err(|_| {
                        Error::InvalidConfig(format!("`{part}` in `{key}` is not an index"))
                    })?;
                    let len = items.len();
                    items.get_mut(index).ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "index {index} out of range ({len}) in `{key}`"
                        ))
                    })?
                }
                _ => return Err(Error::InvalidConfig(format!("`{key}` goes below a scalar"))),
            };
        }
        *node = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::InvalidConfig(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Starts from defaults and applies each `--config` argument in order.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let mut config = Self::default();
        for arg in args {
            if arg.contains('=') {
                config.apply_override(arg)?;
            } else {
                let text = fs::read_to_string(arg)
                    .map_err(|e| Error::InvalidConfig(format!("{arg}: {e}")))?;
                config = serde_json::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{arg}: {e}")))?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.mpc.validate()?;
        if self.num_samples == 0 {
            return Err(Error::InvalidConfig(
                "num_samples must be at least 1".into(),
            ));
        }
        if self.mixture_modes.is_empty() || !(self.mixture_noise >= 0.0) {
            return Err(Error::InvalidConfig(
                "mixture needs modes and a nonnegative noise scale".into(),
            ));
        }
        Ok(())
    }
}

/// Fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub source: ScenarioSource,
    pub variant: Variant,
    pub predictor: PredictorChoice,
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub workers: usize,
    pub verbose: bool,
}

impl RunSpec {
    /// Checks the variant/predictor pairing.
    pub fn resolve_predictor(
        variant: Variant,
        predictor: Option<PredictorArg>,
        endpoint: Option<&str>,
    ) -> Result<PredictorChoice> {
        let predictor = predictor.unwrap_or(variant.default_predictor());
        let allowed = match variant {
            Variant::SicnavCvg => predictor == PredictorArg::Cvg,
            Variant::MpcCvmm => predictor == PredictorArg::Cvmm,
            Variant::SicnavSamples => {
                matches!(predictor, PredictorArg::Mixture | PredictorArg::External)
            }
        };
        if !allowed {
            return Err(Error::InvalidConfig(format!(
                "controller {} cannot use predictor {}",
                variant
                    .to_possible_value()
                    .expect("no skipped variants")
                    .get_name(),
                predictor
                    .to_possible_value()
                    .expect("no skipped variants")
                    .get_name()
            )));
        }
        Ok(match predictor {
            PredictorArg::Cvg => PredictorChoice::Cvg,
            PredictorArg::Cvmm => PredictorChoice::Cvmm,
            PredictorArg::Mixture => PredictorChoice::Mixture,
            PredictorArg::External => PredictorChoice::External {
                endpoint: endpoint
                    .ok_or_else(|| {
                        Error::InvalidConfig("predictor external needs --endpoint".into())
                    })?
                    .to_string(),
            },
        })
    }

    pub fn scenario(&self, seed: u64) -> Result<ScenarioConfig> {
        match &self.source {
            ScenarioSource::Seeds { .. } => generate_corridor(seed, self.config.humans),
            ScenarioSource::File(path) => {
                let text = fs::read_to_string(path)?;
                let scenario: ScenarioConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
                scenario.validate()?;
                Ok(scenario)
            }
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.source {
            ScenarioSource::Seeds { start, end } => (*start..*end).collect(),
            ScenarioSource::File(_) => vec![0],
        }
    }

    fn predictor(&self, seed: u64) -> Box<dyn Predictor> {
        let samples = self.config.num_samples;
        match &self.predictor {
            PredictorChoice::Cvg => Box::new(BuiltinPredictor::new(PredictorKind::Cvg, 1, seed)),
            PredictorChoice::Cvmm => Box::new(BuiltinPredictor::new(PredictorKind::Cvmm, 1, seed)),
            PredictorChoice::Mixture => {
                let mut p = BuiltinPredictor::new(PredictorKind::Mixture, samples, seed);
                p.modes = self.config.mixture_modes.clone();
                p.noise_scale = self.config.mixture_noise;
                Box::new(p)
            }
            PredictorChoice::External { endpoint } => Box::new(RemotePredictor {
                client: ExternalPredictor::new(endpoint.clone()),
                num_samples: samples,
            }),
        }
    }

    /// Runs the episode for one seed.
    pub fn run_seed(&self, seed: u64) -> Result<EpisodeResult> {
        let scenario = self.scenario(seed)?;
        let mut controller =
            Controller::new(scenario.mpc_config(&self.config.mpc), self.variant.mode())?;
        let mut predictor = self.predictor(seed);
        run_episode(&scenario, &mut controller, predictor.as_mut())
    }
}

/// Deterministic benchmark summary; contains no timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: Variant,
    pub predictor: PredictorChoice,
    pub humans: usize,
    pub seeds: Vec<u64>,
    pub metrics: Metrics,
}

/// Wall-clock statistics, kept apart from the deterministic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub control_steps: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingReport {
    pub fn from_results(results: &[EpisodeResult]) -> Self {
        let mut times: Vec<f64> = results.iter().flat_map(|r| r.solve_times_ms()).collect();
        times.sort_by(f64::total_cmp);
        Self {
            control_steps: times.len(),
            median_ms: percentile(&times, 0.5),
            p95_ms: percentile(&times, 0.95),
            max_ms: times.last().copied().unwrap_or(0.0),
        }
    }
}

/// Nearest-rank percentile of sorted data; zero when empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// One table row: success rate, mean navigation time, collision and frozen
/// frequencies.
pub fn format_metrics_row(label: &str, m: &Metrics) -> String {
    let nav = if m.avg_nav_time_defined {
        format!("{:.2}", m.avg_nav_time)
    } else {
        format!("{:.2}*", m.avg_nav_time)
    };
    format!(
        "| {label:<16} | {:>7.2} | {nav:>8} | {:>9.3} | {:>9.3} |",
        m.success_rate, m.collision_freq, m.frozen_freq
    )
}

pub fn metrics_table(label: &str, m: &Metrics) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| {:<16} | {:>7} | {:>8} | {:>9} | {:>9} |",
        "approach", "success", "nav [s]", "coll [1/s]", "froz [1/s]"
    );
    let _ = writeln!(out, "|{}|", "-".repeat(65));
    let _ = writeln!(out, "{}", format_metrics_row(label, m));
    if !m.avg_nav_time_defined {
        let _ = writeln!(
            out,
            "* no successful episode; navigation time is the timeout"
        );
    }
    out
}

/// Runs every seed on a pool of `spec.workers` threads. Results come back
/// in seed order regardless of scheduling. Each finished episode is written
/// to `<out>/episodes/`.
pub fn run_bench(spec: &RunSpec) -> Result<Vec<EpisodeResult>> {
    let episodes = spec.out.join("episodes");
    fs::create_dir_all(&episodes)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let seeds = spec.seeds();
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let result = spec.run_seed(seed)?;
                write_episode(&episodes, &result)?;
                Ok(result)
            })
            .collect::<Result<Vec<_>>>()
    })
}

fn write_episode(dir: &Path, result: &EpisodeResult) -> Result<()> {
    let stem = format!("seed_{:06}", result.seed);
    fs::write(
        dir.join(format!("{stem}.trace.jsonl")),
        result.trace_jsonl(),
    )?;
    fs::write(
        dir.join(format!("{stem}.json")),
        to_json(&result.summary())?,
    )?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

const CSV_HEADER: &str = "step,time,agent,kind,x,y,heading,speed,vx,vy,collision,frozen";

/// Converts trace JSON lines into CSV with one row per step per agent.
pub fn trace_to_csv(text: &str) -> Result<String> {
    let records: Vec<StepRecord> = EpisodeResult::parse_trace(text)?;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (step, r) in records.iter().enumerate() {
        let v = r.robot.velocity();
        let _ = writeln!(
            out,
            "{step},{},0,robot,{},{},{},{},{},{},{},{}",
            r.time,
            r.robot.position.x,
            r.robot.position.y,
            r.robot.heading,
            r.robot.speed,
            v.x,
            v.y,
            r.collision,
            r.frozen
        );
        for (j, h) in r.humans.iter().enumerate() {
            let _ = writeln!(
                out,
                "{step},{},{},human,{},{},,{},{},{},,",
                r.time,
                j + 1,
                h.position.x,
                h.position.y,
                h.velocity.norm(),
                h.velocity.x,
                h.velocity.y
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(
    name = "sicnav",
    version,
    about = "Bilevel MPC crowd navigation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode and write its trace.
    Run(ExperimentArgs),
    /// Run a batch of seeded episodes and aggregate metrics.
    Bench(ExperimentArgs),
    /// Convert a trace (JSON lines) to CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Scenario seed (first seed for `bench`).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed range `start..end` (end exclusive); overrides --seed/--count.
    #[arg(long)]
    pub seed_range: Option<String>,
    /// Scenario file instead of generated corridors.
    #[arg(long, conflicts_with = "seed_range")]
    pub scenario: Option<PathBuf>,
    /// Number of humans in generated corridors.
    #[arg(long)]
    pub humans: Option<usize>,
    #[arg(long, value_enum, default_value_t = Variant::SicnavCvg)]
    pub controller: Variant,
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorArg>,
    /// `host:port` of an external sample server.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Episodes for `bench`.
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Worker threads for `bench`.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config file or `dotted.key=value`; repeatable.
    #[arg(long)]
    pub config: Vec<String>,
    /// Per-step diagnostics on stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Trace file (JSON lines).
    pub trace: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_seed_range(text: &str) -> Result<(u64, u64)> {
    let bad = || Error::InvalidConfig(format!("seed range `{text}` is not start..end"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let (start, end): (u64, u64) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if end <= start {
        return Err(Error::InvalidConfig(format!(
            "seed range `{text}` is empty"
        )));
    }
    Ok((start, end))
}

impl ExperimentArgs {
    pub fn to_spec(&self, batch: bool) -> Result<RunSpec> {
        let mut config = ExperimentConfig::from_args(&self.config)?;
        if let Some(n) = self.humans {
            config.humans = n;
        }
        let source = match (&self.scenario, &self.seed_range) {
            (Some(path), _) => ScenarioSource::File(path.clone()),
            (None, Some(range)) => {
                let (start, end) = parse_seed_range(range)?;
                ScenarioSource::Seeds { start, end }
            }
            (None, None) => {
                let count = if batch { self.count } else { 1 };
                if count == 0 {
                    return Err(Error::InvalidConfig("--count must be at least 1".into()));
                }
                ScenarioSource::Seeds {
                    start: self.seed,
                    end: self.seed + count,
                }
            }
        };
        if !batch && matches!(source, ScenarioSource::Seeds { start, end } if end - start != 1) {
            return Err(Error::InvalidConfig("run takes a single seed".into()));
        }
        Ok(RunSpec {
            source,
            variant: self.controller,
            predictor: RunSpec::resolve_predictor(
                self.controller,
                self.predictor,
                self.endpoint.as_deref(),
            )?,
            config,
            out: self.out.clone(),
            workers: self.workers,
            verbose: self.verbose,
        })
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::InfeasibleGeometry(_) => {
            EXIT_CONFIG
        }
        _ => EXIT_RUNTIME,
    }
}

fn label(spec: &RunSpec) -> String {
    let name = spec
        .variant
        .to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string();
    match (&spec.variant, &spec.predictor) {
        (Variant::SicnavSamples, PredictorChoice::External { .. }) => format!("{name}/external"),
        _ => name,
    }
}

fn cmd_run(args: &ExperimentArgs) -> Result<()> {
    let spec = args.to_spec(false)?;
    let seed = spec.seeds()[0];
    let result = spec.run_seed(seed)?;
    fs::create_dir_all(&spec.out)?;
    fs::write(spec.out.join("trace.jsonl"), result.trace_jsonl())?;
    fs::write(spec.out.join("episode.json"), to_json(&result.summary())?)?;
    if spec.verbose {
        for r in &result.trace {
            eprintln!("{}", serde_json::to_string(r)?);
        }
    }
    println!(
        "seed {} {}: success={} nav_time={:.2}s collisions={} frozen={} steps={}",
        result.seed,
        label(&spec),
        result.success,
        result.navigation_time,
        result.collision_steps,
        result.frozen_steps,
        result.total_steps
    );
    Ok(())
}

fn cmd_bench(args: &ExperimentArgs) -> Result<()> {
    let spec = args.to_spec(true)?;
    fs::create_dir_all(&spec.out)?;
    let marker = spec.out.join(PARTIAL_MARKER);
    let results = match run_bench(&spec) {
        Ok(r) => r,
        Err(e) => {
            fs::write(&marker, format!("{e}\n"))?;
            return Err(e);
        }
    };
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let report = BenchReport {
        variant: spec.variant,
        predictor: spec.predictor.clone(),
        humans: spec.config.humans,
        seeds: spec.seeds(),
        metrics: aggregate_metrics(&results)?,
    };
    let table = metrics_table(&label(&spec), &report.metrics);
    let timing = TimingReport::from_results(&results);
    fs::write(spec.out.join("metrics.json"), to_json(&report)?)?;
    fs::write(spec.out.join("metrics.txt"), &table)?;
    fs::write(spec.out.join("timing.json"), to_json(&timing)?)?;
    print!("{table}");
    println!(
        "timing (wall clock, not deterministic): {} control steps, median {:.1} ms, p95 {:.1} ms, max {:.1} ms",
        timing.control_steps, timing.median_ms, timing.p95_ms, timing.max_ms
    );
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.trace)?;
    let csv = trace_to_csv(&text)?;
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Export(a) => cmd_export(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut c = ExperimentConfig::default();
        c.apply_override("mpc.horizon=5").unwrap();
        c.apply_override("mpc.q_position.1=2.5").unwrap();
        c.apply_override("humans=1").unwrap();
        assert_eq!((c.mpc.horizon, c.mpc.q_position[1], c.humans), (5, 2.5, 1));
        assert!(c.apply_override("mpc.nope=1").is_err());
        assert!(c.apply_override("mpc.horizon=\"x\"").is_err());
        assert!(c.apply_override("humans").is_err());
    }

    #[test]
    fn config_survives_json_round_trip() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
    }

    #[test]
    fn incompatible_pairings_are_rejected() {
        assert!(
            RunSpec::resolve_predictor(Variant::MpcCvmm, Some(PredictorArg::Mixture), None)
                .is_err()
        );
        assert!(
            RunSpec::resolve_predictor(Variant::SicnavCvg, Some(PredictorArg::Mixture), None)
                .is_err()
        );
        assert!(RunSpec::resolve_predictor(
            Variant::SicnavSamples,
            Some(PredictorArg::External),
            None
        )
        .is_err());
        assert_eq!(
            RunSpec::resolve_predictor(Variant::MpcCvmm, None, None).unwrap(),
            PredictorChoice::Cvmm
        );
        assert_eq!(Variant::MpcCvmm.mode(), PlanningMode::FrozenPredictions);
    }

    #[test]
    fn seed_ranges_parse() {
        assert_eq!(parse_seed_range("3..7").unwrap(), (3, 7));
        assert!(parse_seed_range("7..3").is_err());
        assert!(parse_seed_range("7").is_err());
    }

    #[test]
    fn percentile_uses_nearest_rank() {
        let data: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&data, 0.5), 10.0);
        assert_eq!(percentile(&data, 0.95), 19.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn empty_trace_exports_header_only() {
        assert_eq!(trace_to_csv("").unwrap(), format!("{CSV_HEADER}\n"));
        let err = trace_to_csv("\n{\"bad\": 1}\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
