//! Configuration-driven experiment runner. Every run writes `manifest.json` (resolved
//! config, version, seed), JSONL metrics, CSV data products and, for checking kinds, a
//! PASS/FAIL summary. Exit codes: 0 pass, 1 failure, 2 config error.

use crate::error::{Error, Result};
use crate::exact_mixture::{evolve_mixture, EvolveKind, GaussianMixture, MixtureRecord};
use crate::score_training::{write_metrics_jsonl, ScoreModel};
use crate::sde_sim::{simulate_ensemble, ProcessSpec, SimOptions};
use crate::stats::mean_var;
use crate::suites::{self, Check, SuiteReport};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "DIFFLAB_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    /// Forward ensemble simulation of the configured schedule.
    Simulate,
    /// Closed-form kernels, stationarity, Feynman-Kac and step composition (A1, A2, A3, A7).
    VerifyKernels,
    /// Stationarity residuals and action vs pathwise KL (A5, A6).
    VerifyAction,
    /// Schrodinger-system solver (A10).
    VerifyBridge,
    /// Reverse-kernel identity (A10).
    VerifyDpm,
    /// Large-deviation ink experiment (A4).
    Ink,
    /// Score-matching training with checkpoint (A8).
    Train,
    /// Reverse sampling from a checkpoint (A9).
    Sample,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::VerifyKernels => "verify-kernels",
            Kind::VerifyAction => "verify-action",
            Kind::VerifyBridge => "verify-bridge",
            Kind::VerifyDpm => "verify-dpm",
            Kind::Ink => "ink",
            Kind::Train => "train",
            Kind::Sample => "sample",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "difflab", version, about = "Diffusion-process experiments checked against exact references")]
pub struct Cli {
    #[command(subcommand)]
    pub kind: Kind,
    /// JSON config file; a previous run's manifest.json is accepted as well.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for Monte Carlo and training; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_paths: usize,
    /// Retained grid nodes; empty keeps the first and last.
    pub retain: Vec<usize>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { n_paths: 10_000, retain: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub schedule: suites::ScheduleSpec,
    pub data: MixtureRecord,
    pub simulate: SimulateSection,
    pub kernels: suites::KernelSuite,
    pub action: suites::ActionSuite,
    pub bridge: suites::BridgeSuite,
    pub dpm: suites::DpmSuite,
    pub ink: suites::InkSuite,
    pub train: suites::TrainSuite,
    pub sample: suites::SampleSuite,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            out: None,
            schedule: suites::ScheduleSpec::default(),
            data: GaussianMixture::<f64>::two_bump().record(),
            simulate: SimulateSection::default(),
            kernels: suites::KernelSuite::default(),
            action: suites::ActionSuite::default(),
            bridge: suites::BridgeSuite::default(),
            dpm: suites::DpmSuite::default(),
            ink: suites::InkSuite::default(),
            train: suites::TrainSuite::default(),
            sample: suites::SampleSuite::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config, or the `config` member of a manifest, reporting the field path of
    /// schema violations.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config { field: "<root>".into(), message: e.to_string() })?;
        if let Some(obj) = value.as_object_mut() {
            if obj.contains_key("version") && obj.contains_key("config") {
                value = obj.remove("config").unwrap_or_default();
            }
        }
        serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            Error::Config { field, message: e.into_inner().to_string() }
        })
    }

    pub fn validate(&self, kind: Kind) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config { field: "threads".into(), message: "must be at least 1".into() });
        }
        suites::mixture_from_config("data", &self.data)?;
        match kind {
            Kind::Simulate => {
                self.schedule.validate()?;
                let n = schedule_steps(&self.schedule);
                if self.simulate.n_paths == 0 {
                    return Err(Error::Config { field: "simulate.n_paths".into(), message: "must be at least 1".into() });
                }
                if self.simulate.retain.iter().any(|&s| s > n) {
                    return Err(Error::Config { field: "simulate.retain".into(), message: format!("nodes must be at most {n}") });
                }
                Ok(())
            }
            Kind::VerifyKernels => self.kernels.validate(),
            Kind::VerifyAction => self.action.validate(),
            Kind::VerifyBridge => self.bridge.validate(),
            Kind::VerifyDpm => self.dpm.validate(),
            Kind::Ink => self.ink.validate(),
            Kind::Train => {
                self.schedule.validate()?;
                self.train.validate()
            }
            Kind::Sample => {
                self.schedule.validate()?;
                if self.sample.checkpoint.is_none() {
                    self.train.validate()?;
                }
                self.sample.validate()
            }
        }
    }
}

fn schedule_steps(s: &suites::ScheduleSpec) -> usize {
    match *s {
        suites::ScheduleSpec::LinearVp { n_steps, .. } | suites::ScheduleSpec::Constant { n_steps, .. } => n_steps,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: Kind,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<crate::schedule::ScheduleRecord>,
}

/// Outcome of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub reports: Vec<SuiteReport>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(SuiteReport::passed)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

/// Checks without wall-clock content, one JSON object per line.
fn write_checks_jsonl(dir: &Path, reports: &[SuiteReport]) -> Result<()> {
    let mut w = create(dir, "metrics.jsonl")?;
    for c in reports.iter().flat_map(|r| &r.checks).filter(|c| !c.wall_clock) {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(w.flush()?)
}

fn write_summary(dir: &Path, reports: &[SuiteReport]) -> Result<()> {
    write_json(dir, "summary.json", &reports)?;
    let mut w = create(dir, "summary.txt")?;
    for r in reports {
        w.write_all(r.summary().as_bytes())?;
    }
    let verdict = if reports.iter().all(SuiteReport::passed) { "PASS" } else { "FAIL" };
    writeln!(w, "{verdict}")?;
    Ok(w.flush()?)
}

/// Resolves the output directory: explicit flag, then the environment override, then
/// the config, then `difflab-out/<kind>`.
pub fn output_dir(kind: Kind, flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV) {
        return PathBuf::from(p);
    }
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("difflab-out").join(kind.name()))
}

/// Runs one experiment into `out_dir`. The config must already carry the final seed.
pub fn run(kind: Kind, cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate(kind)?;
    fs::create_dir_all(out_dir)?;
    let seed = cfg.seed;
    let needs_schedule = matches!(kind, Kind::Simulate | Kind::Train | Kind::Sample);
    let schedule = if needs_schedule { Some(cfg.schedule.build()?) } else { None };
    let mut manifest_cfg = cfg.clone();
    manifest_cfg.out = None;
    let manifest = Manifest {
        kind,
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: manifest_cfg,
        schedule: schedule.as_ref().map(|s| s.record()),
    };
    write_json(out_dir, "manifest.json", &manifest)?;
    let data = suites::mixture_from_config("data", &cfg.data)?;

    let reports = match kind {
        Kind::Simulate => {
            let sched = schedule.as_ref().expect("built above");
            let n = sched.grid().n_steps();
            let retain = if cfg.simulate.retain.is_empty() { vec![0, n] } else { cfg.simulate.retain.clone() };
            let spec = ProcessSpec::from_schedule(data.dim(), sched);
            let ens = simulate_ensemble(&spec, &data, sched.grid(), cfg.simulate.n_paths, seed, &retain, SimOptions::default())?;
            ens.write_csv(create(out_dir, "ensemble.csv")?)?;
            let path = evolve_mixture(&data, sched, EvolveKind::Ou)?;
            let mut report = SuiteReport { suite: "simulate".into(), ..Default::default() };
            for &s in &retain {
                let exact = path.snapshot(s);
                for k in 0..data.dim() {
                    let (m, v) = mean_var(&ens.coordinate(s, k).expect("retained node"));
                    report.checks.push(Check::info("simulate", format!("node {s} coordinate {k} mean"), m));
                    report.checks.push(Check::info("simulate", format!("node {s} coordinate {k} exact mean"), exact.mean()[k]));
                    report.checks.push(Check::info("simulate", format!("node {s} coordinate {k} variance"), v));
                    report.checks.push(Check::info("simulate", format!("node {s} coordinate {k} exact variance"), exact.variance()[k]));
                }
            }
            vec![report]
        }
        Kind::VerifyKernels => vec![suites::kernels(&cfg.kernels, seed)?],
        Kind::VerifyAction => {
            let (r, res) = suites::action(&cfg.action, seed)?;
            write_json(out_dir, "residuals.json", &res)?;
            vec![r]
        }
        Kind::VerifyBridge => {
            let (r, summary) = suites::bridge(&cfg.bridge)?;
            write_json(out_dir, "bridge.json", &summary)?;
            vec![r]
        }
        Kind::VerifyDpm => vec![suites::dpm(&cfg.dpm)?],
        Kind::Ink => {
            let (r, rep) = suites::ink(&cfg.ink, seed)?;
            write_json(out_dir, "ink.json", &rep)?;
            vec![r]
        }
        Kind::Train => {
            let sched = schedule.as_ref().expect("built above");
            let (r, out) = suites::training(&cfg.train, &data, sched, seed)?;
            out.model.save(&out_dir.join("checkpoint.json"))?;
            let mut w = create(out_dir, "training.jsonl")?;
            write_metrics_jsonl(&out.log, &mut w)?;
            w.flush()?;
            vec![r]
        }
        Kind::Sample => {
            let sched = schedule.as_ref().expect("built above");
            let mut reports = Vec::new();
            let model = match &cfg.sample.checkpoint {
                Some(p) => ScoreModel::load(p)?,
                None => {
                    let (r, out) = suites::training(&cfg.train, &data, sched, seed)?;
                    out.model.save(&out_dir.join("checkpoint.json"))?;
                    reports.push(r);
                    out.model
                }
            };
            let (r, gen) = suites::generation(&cfg.sample, &data, sched, &model, seed)?;
            gen.write_csv(create(out_dir, "samples.csv")?)?;
            if !gen.snapshots.is_empty() {
                gen.write_snapshots_csv(create(out_dir, "snapshots.csv")?)?;
            }
            reports.push(r);
            reports
        }
    };
    write_checks_jsonl(out_dir, &reports)?;
    write_summary(out_dir, &reports)?;
    Ok(RunOutcome { out_dir: out_dir.to_path_buf(), reports })
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("difflab: {e}");
            return 2;
        }
    };
    if let Err(e) = cfg.validate(cli.kind) {
        eprintln!("difflab: {e}");
        return exit_code(&e);
    }
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("difflab: thread pool: {e}");
            return 1;
        }
    }
    let out_dir = output_dir(cli.kind, cli.out.as_deref(), &cfg);
    match run(cli.kind, &cfg, &out_dir) {
        Ok(outcome) => {
            for r in &outcome.reports {
                print!("{}", r.summary());
            }
            let pass = outcome.passed();
            println!("{} ({})", if pass { "PASS" } else { "FAIL" }, outcome.out_dir.display());
            i32::from(!pass)
        }
        Err(e) => {
            eprintln!("difflab {}: {e}", cli.kind.name());
            exit_code(&e)
        }
    }
}
