//! Command-line front end: JSON experiment configs in, CSV data files and
//! JSON reports out, with a stable exit-code contract:
//! 0 success, 1 config error, 2 instability, 3 I/O failure,
//! 4 insufficient data, 5 verification failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::apq::{self, ApqError, ApqParams, EventLog, SimulateOptions};
use crate::fluid::{self, FluidError, FluidPath, TandemParams};
use crate::mapping::{self, EmbeddedDistribution, HistogramLayout, MappingError, TestReport};
use crate::mpp::{self, JumpType, MppPath};
use crate::stochastics::{exp_ph, ph_validate, PhError, PhaseType, RandomStream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_UNSTABLE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INSUFFICIENT: i32 = 4;
pub const EXIT_VERIFY_FAILED: i32 = 5;

/// Pass thresholds over the replication loop, pinned as fractions.
const TWO_SAMPLE_PASS_FRACTION: f64 = 0.9;
const ONE_SAMPLE_PASS_FRACTION: f64 = 0.95;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Unstable(ApqError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Unstable(_) => EXIT_UNSTABLE,
            CliError::Io(_) => EXIT_IO,
            CliError::Insufficient(_) => EXIT_INSUFFICIENT,
            CliError::VerifyFailed(_) => EXIT_VERIFY_FAILED,
        }
    }
}

impl From<ApqError> for CliError {
    fn from(e: ApqError) -> Self {
        match e {
            ApqError::Unstable { .. } => CliError::Unstable(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<FluidError> for CliError {
    fn from(e: FluidError) -> Self {
        match e {
            FluidError::InsufficientData { .. } => CliError::Insufficient(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<mpp::MppError> for CliError {
    fn from(e: mpp::MppError) -> Self {
        match e {
            mpp::MppError::InsufficientData { .. } => CliError::Insufficient(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<MappingError> for CliError {
    fn from(e: MappingError) -> Self {
        match e {
            MappingError::InsufficientData(_) => CliError::Insufficient(e.to_string()),
            MappingError::Apq(a) => a.into(),
            MappingError::Fluid(f) => f.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PhError> for CliError {
    fn from(e: PhError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Service-time law in config JSON: `{"type":"exp","mu":r}` or
/// `{"type":"ph","alpha":[...],"T":[[...]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServiceConfig {
    Exp { mu: f64 },
    Ph { alpha: Vec<f64>, #[serde(rename = "T")] t: Vec<Vec<f64>> },
}

impl ServiceConfig {
    pub fn build(&self) -> Result<PhaseType, PhError> {
        match self {
            ServiceConfig::Exp { mu } => exp_ph(*mu),
            ServiceConfig::Ph { alpha, t } => ph_validate(alpha.clone(), t.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApqConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub b1: f64,
    pub b2: f64,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BinsConfig {
    pub g_bins: usize,
    pub f_bins: (usize, usize),
}

impl Default for BinsConfig {
    fn default() -> Self {
        Self {
            g_bins: 50,
            f_bins: (30, 30),
        }
    }
}

/// Diagnostic perturbations of the fluid side, for power checks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Multiply the fluid-side service rate(s) by this factor.
    #[serde(default)]
    pub fluid_mu_factor: Option<f64>,
    /// Multiply lambda2 on the fluid side by this factor.
    #[serde(default)]
    pub fluid_lambda2_factor: Option<f64>,
}

impl PerturbConfig {
    pub fn is_active(&self) -> bool {
        self.fluid_mu_factor.is_some() || self.fluid_lambda2_factor.is_some()
    }
}

fn default_count() -> usize {
    100_000
}

fn default_significance() -> f64 {
    0.01
}

fn default_replications() -> usize {
    20
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_thin() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub apq: ApqConfig,
    #[serde(default = "default_count")]
    pub n_departures: usize,
    #[serde(default = "default_count")]
    pub n_down_cycles: usize,
    /// Jumps/cycles to discard; defaults to max(1% of the run, 1000).
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_significance")]
    pub significance: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Stride used to decorrelate jump/cycle sequences before the test
    /// battery; the embedded chains mix within a few jumps, so 10 is ample.
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub bins: BinsConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub allow_unstable: bool,
    #[serde(default)]
    pub perturb: Option<PerturbConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))?;
        if let Ok(env_seed) = std::env::var("APQFLUID_SEED") {
            cfg.seed = env_seed
                .parse()
                .map_err(|_| CliError::Config(format!("bad APQFLUID_SEED '{env_seed}'")))?;
        }
        Ok(cfg)
    }

    pub fn apq_params(&self) -> Result<ApqParams, CliError> {
        let service = self.apq.service.build()?;
        let params = ApqParams {
            lambda1: self.apq.lambda1,
            lambda2: self.apq.lambda2,
            b1: self.apq.b1,
            b2: self.apq.b2,
            service,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn burn_in_for(&self, n: usize) -> usize {
        self.burn_in.unwrap_or_else(|| mpp::default_burn_in(n))
    }

    fn header_line(&self) -> String {
        let resolved = serde_json::to_string(self).expect("config serializes");
        format!("# seed={} config={resolved}\n", self.seed)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub allow_unstable: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if self.allow_unstable {
            cfg.allow_unstable = true;
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

fn eventlog_csv(cfg: &ExperimentConfig, log: &EventLog) -> String {
    let mut out = cfg.header_line();
    out.push_str("n,gamma,cls,service_time,start,depart,service_position\n");
    let mut position = vec![None; log.customers.len()];
    for (m, &n) in log.service_order.iter().enumerate() {
        position[n - 1] = Some(m + 1);
    }
    for c in &log.customers {
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let pos = position[c.n - 1].map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.n,
            c.gamma,
            c.cls,
            c.service_time,
            fmt_opt(c.start),
            fmt_opt(c.depart),
            pos
        ));
    }
    out
}

fn jumps_csv(cfg: &ExperimentConfig, path: &MppPath) -> String {
    let mut out = cfg.header_line();
    out.push_str("m,t,jump_type,pre_m1,pre_m2,post_m1,post_m2,post_m1_tilde\n");
    for (m, j) in path.jumps.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m + 1,
            j.t,
            j.jump_type,
            j.pre.0,
            j.pre.1,
            j.post.0,
            j.post.1,
            j.post.0 - j.post.1
        ));
    }
    out
}

fn embedded_csv(
    cfg: &ExperimentConfig,
    params: &ApqParams,
    samples: &mpp::EmbeddedSampleSet,
) -> String {
    let mut out = cfg.header_line();
    out.push_str("post_m1,post_m2,post_m1_tilde,region\n");
    for &(m1, m2) in &samples.points {
        let region = mpp::region_of((m1, m2), params, mpp::DEFAULT_TOL);
        out.push_str(&format!("{},{},{},{}\n", m1, m2, m1 - m2, region));
    }
    out
}

fn fluid_cycles_csv(cfg: &ExperimentConfig, path: &FluidPath) -> String {
    let mut out = cfg.header_line();
    out.push_str("cycle,dx,dy,x_hit_zero,y_hit_zero,end_x,end_y,duration\n");
    for (i, c) in path.down_cycles.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i + 1,
            c.dx,
            c.dy,
            c.x_hit_zero,
            c.y_hit_zero,
            c.end_x,
            c.end_y,
            c.duration
        ));
    }
    out
}

fn jump_proportions(path: &MppPath) -> (f64, f64, f64) {
    let n = path.jumps.len().max(1) as f64;
    let count = |t: JumpType| path.jumps.iter().filter(|j| j.jump_type == t).count() as f64 / n;
    (
        count(JumpType::Type1),
        count(JumpType::Type2),
        count(JumpType::Type3),
    )
}

fn simulate_apq_run(
    cfg: &ExperimentConfig,
    params: &ApqParams,
    stream_id: u64,
) -> Result<(EventLog, MppPath), CliError> {
    let mut stream = RandomStream::new(cfg.seed, stream_id);
    let opts = SimulateOptions {
        allow_unstable: cfg.allow_unstable,
        script: None,
    };
    let log = apq::simulate_apq_with(params, cfg.n_departures, &mut stream, &opts)?;
    let path = mpp::build_mpp(&log, params)?;
    Ok((log, path))
}

/// `simulate-apq`: event log, jump log and embedded samples as CSV, plus a
/// JSON summary on stdout.
pub fn cmd_simulate_apq(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let params = cfg.apq_params()?;
    let (log, path) = simulate_apq_run(cfg, &params, 0)?;
    let burn_in = cfg.burn_in_for(path.jumps.len());
    let samples = mpp::embedded_samples(&path, burn_in)?;

    fs::create_dir_all(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("eventlog.csv"), &eventlog_csv(cfg, &log))?;
    write_file(&cfg.output_dir.join("jumps.csv"), &jumps_csv(cfg, &path))?;
    write_file(
        &cfg.output_dir.join("embedded.csv"),
        &embedded_csv(cfg, &params, &samples),
    )?;

    let (t1, t2, t3) = jump_proportions(&path);
    let origin = samples
        .points
        .iter()
        .filter(|p| p.0 == 0.0 && p.1 == 0.0)
        .count() as f64
        / samples.len() as f64;
    let summary = json!({
        "command": "simulate-apq",
        "seed": cfg.seed,
        "rho": params.rho(),
        "n_departures": cfg.n_departures,
        "burn_in": burn_in,
        "jump_type_proportions": {"type1": t1, "type2": t2, "type3": t3},
        "h_estimate": origin,
    });
    println!("{summary}");
    Ok(())
}

fn simulate_fluid_run(
    cfg: &ExperimentConfig,
    tparams: &TandemParams,
    stream_id: u64,
) -> Result<FluidPath, CliError> {
    let mut stream = RandomStream::new(cfg.seed, stream_id);
    Ok(fluid::simulate_tandem(tparams, cfg.n_down_cycles, &mut stream)?)
}

/// Fluid-side parameters, with any configured diagnostic perturbation.
fn fluid_params(cfg: &ExperimentConfig, params: &ApqParams) -> Result<TandemParams, CliError> {
    let mut t = mapping::map_phase_type(params)?;
    if let Some(p) = &cfg.perturb {
        if let Some(factor) = p.fluid_mu_factor {
            for i in 0..t.n_up {
                for j in 0..=t.n_up {
                    t.gen[i][j] *= factor;
                }
            }
        }
        if let Some(factor) = p.fluid_lambda2_factor {
            let lambda2 = params.lambda2 * factor;
            t.c_check_down = -1.0 / (params.lambda1 / params.b1 + lambda2 / params.b2);
        }
        t.validate()?;
    }
    Ok(t)
}

/// `simulate-tandem`: cycle summaries and embedded samples as CSV plus a
/// JSON summary on stdout. Fluid parameters are derived from the queue
/// parameters via the phase-type mapping.
pub fn cmd_simulate_tandem(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let params = cfg.apq_params()?;
    if params.rho() >= 1.0 && !cfg.allow_unstable {
        return Err(CliError::Unstable(ApqError::Unstable { rho: params.rho() }));
    }
    let tparams = fluid_params(cfg, &params)?;
    let path = simulate_fluid_run(cfg, &tparams, 1)?;
    let burn_in = cfg.burn_in_for(path.down_cycles.len());
    let samples = fluid::embedded_at_down_to_up(&path, burn_in)?;

    fs::create_dir_all(&cfg.output_dir)?;
    write_file(
        &cfg.output_dir.join("fluid_cycles.csv"),
        &fluid_cycles_csv(cfg, &path),
    )?;
    write_file(
        &cfg.output_dir.join("embedded_fluid.csv"),
        &embedded_csv(cfg, &params, &samples),
    )?;

    let n = path.down_cycles.len() as f64;
    let survived = path.down_cycles.iter().filter(|c| !c.x_hit_zero).count() as f64 / n;
    let partial = path
        .down_cycles
        .iter()
        .filter(|c| c.x_hit_zero && !c.y_hit_zero)
        .count() as f64
        / n;
    let drained = path.down_cycles.iter().filter(|c| c.y_hit_zero).count() as f64 / n;
    let origin = samples
        .points_tilde
        .iter()
        .filter(|p| p.0 == 0.0 && p.1 == 0.0)
        .count() as f64
        / samples.len() as f64;
    let summary = json!({
        "command": "simulate-tandem",
        "seed": cfg.seed,
        "n_down_cycles": cfg.n_down_cycles,
        "burn_in": burn_in,
        "censoring_proportions": {
            "x_survived": survived,
            "x_drained_y_survived": partial,
            "y_drained": drained,
        },
        "origin_mass": origin,
    });
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct TestSummary {
    test_name: String,
    replications: usize,
    skipped: usize,
    rejections: usize,
    required_pass: usize,
    passed: bool,
}

fn summarize(reports: &[TestReport], replications: usize) -> Vec<TestSummary> {
    let mut names: Vec<String> = Vec::new();
    for r in reports {
        if !names.contains(&r.test_name) {
            names.push(r.test_name.clone());
        }
    }
    names
        .iter()
        .map(|name| {
            let runs: Vec<&TestReport> =
                reports.iter().filter(|r| &r.test_name == name).collect();
            let skipped = runs.iter().filter(|r| r.is_skipped()).count();
            let rejections = runs.iter().filter(|r| r.reject).count();
            let effective = runs.len() - skipped;
            let frac = if name.ends_with("_exp_ks") {
                ONE_SAMPLE_PASS_FRACTION
            } else {
                TWO_SAMPLE_PASS_FRACTION
            };
            let required_pass = (frac * effective as f64).ceil() as usize;
            let passed = effective > 0 && (effective - rejections) >= required_pass;
            TestSummary {
                test_name: name.clone(),
                replications,
                skipped,
                rejections,
                required_pass,
                passed,
            }
        })
        .collect()
}

/// `verify-mapping`: run both simulators with matched parameters over the
/// configured replication count, execute the full test battery, and write
/// `verify_report.json`. Exit 0 iff every test clears its pass threshold.
pub fn cmd_verify_mapping(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.replications == 0 {
        return Err(CliError::Config("replications must be >= 1".into()));
    }
    let params = cfg.apq_params()?;
    if params.rho() >= 1.0 && !cfg.allow_unstable {
        return Err(CliError::Unstable(ApqError::Unstable { rho: params.rho() }));
    }
    let claimed = mapping::map_phase_type(&params)?;
    let actual = fluid_params(cfg, &params)?;

    let mut all_reports: Vec<TestReport> = Vec::new();
    for rep in 0..cfg.replications {
        let rep_seed = cfg.seed.wrapping_add(rep as u64);
        let mut rep_cfg = cfg.clone();
        rep_cfg.seed = rep_seed;
        let (log, path) = simulate_apq_run(&rep_cfg, &params, 0)?;
        let fpath = simulate_fluid_run(&rep_cfg, &actual, 1)?;

        let burn_j = cfg.burn_in_for(path.jumps.len());
        let burn_c = cfg.burn_in_for(fpath.down_cycles.len());

        let during =
            mapping::verify_lemma_during(&log, &params, &fpath, &claimed, cfg.significance, rep_seed)?;
        all_reports.extend(during);
        // Successive jumps/cycles are Markov dependent; run the battery on
        // thinned subsequences so the iid assumptions of the tests hold.
        let thin = cfg.thin.max(1);
        let jumps_thin: Vec<_> = path.jumps[burn_j.min(path.jumps.len() - 1)..]
            .iter()
            .step_by(thin)
            .cloned()
            .collect();
        let cycles_thin: Vec<_> = fpath.down_cycles[burn_c.min(fpath.down_cycles.len() - 1)..]
            .iter()
            .step_by(thin)
            .cloned()
            .collect();
        let jumps_reports = mapping::verify_lemma_jumps(
            &jumps_thin,
            &cycles_thin,
            &params,
            &claimed,
            cfg.significance,
            rep_seed,
        )?;
        all_reports.extend(jumps_reports);

        let e1 = mpp::embedded_samples(&path, burn_j)?.thinned(thin);
        let e2 = fluid::embedded_at_down_to_up(&fpath, burn_c)?.thinned(thin);
        let layout = HistogramLayout::from_pooled(&[&e1, &e2], cfg.bins.g_bins, cfg.bins.f_bins);
        let d1 = mapping::estimate_embedded_with_layout(&e1, &layout);
        let d2 = mapping::estimate_embedded_with_layout(&e2, &layout);
        all_reports.extend(mapping::compare_embedded(&d1, &d2, cfg.significance, rep_seed)?);
    }

    let summaries = summarize(&all_reports, cfg.replications);
    let all_passed = summaries.iter().all(|s| s.passed);
    let report = json!({
        "command": "verify-mapping",
        "seed": cfg.seed,
        "replications": cfg.replications,
        "significance": cfg.significance,
        "perturbed": cfg.perturb.as_ref().map(|p| p.is_active()).unwrap_or(false),
        "tests": all_reports,
        "summary": summaries,
        "passed": all_passed,
    });
    fs::create_dir_all(&cfg.output_dir)?;
    write_file(
        &cfg.output_dir.join("verify_report.json"),
        &format!("{}\n", serde_json::to_string_pretty(&report).unwrap()),
    )?;
    println!("{report}");
    if all_passed {
        Ok(())
    } else {
        let failing: Vec<&str> = summaries
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.test_name.as_str())
            .collect();
        Err(CliError::VerifyFailed(failing.join(", ")))
    }
}

/// `estimate-stationary`: one matched pair of runs, embedded distribution
/// estimates for both models on a pooled layout, written as JSON.
pub fn cmd_estimate_stationary(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let params = cfg.apq_params()?;
    if params.rho() >= 1.0 && !cfg.allow_unstable {
        return Err(CliError::Unstable(ApqError::Unstable { rho: params.rho() }));
    }
    let tparams = fluid_params(cfg, &params)?;
    let (_, path) = simulate_apq_run(cfg, &params, 0)?;
    let fpath = simulate_fluid_run(cfg, &tparams, 1)?;
    let e1 = mpp::embedded_samples(&path, cfg.burn_in_for(path.jumps.len()))?;
    let e2 = fluid::embedded_at_down_to_up(&fpath, cfg.burn_in_for(fpath.down_cycles.len()))?;
    let layout = HistogramLayout::from_pooled(&[&e1, &e2], cfg.bins.g_bins, cfg.bins.f_bins);
    let d1 = mapping::estimate_embedded_with_layout(&e1, &layout);
    let d2 = mapping::estimate_embedded_with_layout(&e2, &layout);

    fs::create_dir_all(&cfg.output_dir)?;
    write_file(
        &cfg.output_dir.join("embedded.csv"),
        &embedded_csv(cfg, &params, &e1),
    )?;
    write_file(
        &cfg.output_dir.join("embedded_fluid.csv"),
        &embedded_csv(cfg, &params, &e2),
    )?;
    let dist_json = |d: &EmbeddedDistribution| {
        json!({
            "h": d.h,
            "g": d.g,
            "f": d.f,
            "n_samples": d.n_samples,
        })
    };
    let out = json!({
        "command": "estimate-stationary",
        "seed": cfg.seed,
        "layout": layout,
        "mpp": dist_json(&d1),
        "fluid": dist_json(&d2),
    });
    write_file(
        &cfg.output_dir.join("stationary.json"),
        &format!("{}\n", serde_json::to_string_pretty(&out).unwrap()),
    )?;
    println!(
        "{}",
        json!({
            "command": "estimate-stationary",
            "seed": cfg.seed,
            "h_mpp": d1.h,
            "h_fluid": d2.h,
        })
    );
    Ok(())
}
