//! Experiment configuration, orchestration and bit-stable output files.
//!
//! An experiment is one TOML file. Every output file carries the SHA-256
//! hash of the resolved configuration; the same hash always reproduces the
//! same bytes, independently of the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, EquivalenceOptions, DEFAULT_BATCHES};
use crate::conditions::{self, SampleSpec};
use crate::error::{Result, SddeError};
use crate::model::{self, ProblemParams, ProblemRegistryEntry};
use crate::noise::{integer_ratio, LatticeFamily};
use crate::scheme::{self, SchemeRun, SchemeVariant, TruncationPolicy};

/// Environment variable holding the default worker-thread cap.
pub const THREADS_ENV: &str = "SDDE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    #[default]
    Truncated,
    Classical,
}

/// The experiment file as written by the user.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    #[serde(default)]
    pub params: ProblemParams,
    /// Delay; may also be given as `params.tau`.
    pub tau: Option<f64>,
    /// Step `Δ = τ / m_sub` (or give `delta`).
    pub m_sub: Option<usize>,
    pub delta: Option<f64>,
    pub delta_list: Option<Vec<f64>>,
    pub reference_delta: Option<f64>,
    #[serde(default)]
    pub horizon: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    /// Moment exponent; defaults to 2, or to the registry value for checks.
    pub p: Option<f64>,
    #[serde(default = "default_q_bar")]
    pub q_bar: f64,
    pub q: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub h_hat: Option<f64>,
    pub h3: Option<f64>,
    pub rho: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub c_star: f64,
    pub fit_window: Option<[f64; 2]>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub variant: VariantName,
    /// Moments are recorded at every `sample_stride`-th step.
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_radius")]
    pub lipschitz_radius: f64,
    /// Treat blown-up classical paths as a numeric-range failure.
    #[serde(default)]
    pub fail_on_blowup: bool,
}

fn default_paths() -> usize {
    100
}
fn default_q_bar() -> f64 {
    2.0
}
fn default_epsilon() -> f64 {
    0.25
}
fn one() -> f64 {
    1.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_stride() -> usize {
    1
}
fn default_samples() -> usize {
    10_000
}
fn default_radius() -> f64 {
    10.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SddeError::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SddeError::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Converge,
    Stability,
    Equivalence,
    Check,
}

/// Everything an experiment depends on, with defaults and derived values
/// filled in. Its canonical JSON is what gets hashed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub command: Command,
    pub problem: String,
    pub params: ProblemParams,
    pub tau: f64,
    pub delta: Option<f64>,
    pub m_sub: Option<usize>,
    pub delta_list: Option<Vec<f64>>,
    pub reference_delta: Option<f64>,
    pub horizon: f64,
    pub n_paths: usize,
    pub p: Option<f64>,
    pub q_bar: f64,
    pub q: Option<f64>,
    pub variant: VariantName,
    pub epsilon: f64,
    pub h_hat: Option<f64>,
    pub h3: Option<f64>,
    pub rho: Option<f64>,
    pub truncation_radius: Option<f64>,
    pub seed: u64,
    pub c_star: f64,
    pub fit_window: Option<[f64; 2]>,
    pub sample_stride: usize,
    pub n_samples: usize,
    pub lipschitz_radius: f64,
    pub fail_on_blowup: bool,
}

/// A validated experiment, ready to run.
pub struct Experiment {
    pub resolved: ResolvedConfig,
    pub entry: ProblemRegistryEntry,
    pub policy: Option<TruncationPolicy>,
    pub output_dir: PathBuf,
    pub config_hash: String,
}

fn m_for(tau: f64, delta: f64, what: &str, errors: &mut Vec<String>) -> Option<usize> {
    if !(delta > 0.0 && delta <= 1.0) {
        errors.push(format!("{what} = {delta} must lie in (0, 1]"));
        return None;
    }
    let m = integer_ratio(tau, delta);
    if m.is_none() {
        errors.push(format!("{what} = {delta} is not tau/M for an integer M (tau = {tau})"));
    }
    m
}

fn check_horizon_multiple(horizon: f64, delta: f64, what: &str, errors: &mut Vec<String>) {
    if horizon > 0.0 && integer_ratio(horizon, delta).is_none() {
        errors.push(format!("horizon = {horizon} is not a multiple of {what} = {delta}"));
    }
}

impl Experiment {
    /// Validates `config` for `command`, reporting every violated field.
    pub fn prepare(config: &ExperimentConfig, command: Command) -> Result<Self> {
        let mut errors = Vec::new();
        let mut params = config.params.clone();
        match (config.tau, params.get("tau").copied()) {
            (Some(a), Some(b)) if a != b => errors.push(format!("tau = {a} conflicts with params.tau = {b}")),
            (Some(a), _) => {
                params.insert("tau".into(), a);
            }
            _ => {}
        }
        let entry = match model::lookup(&config.problem, &params) {
            Ok(e) => Some(e),
            Err(e) => {
                errors.push(format!("problem: {e}"));
                None
            }
        };
        let tau = entry.as_ref().map_or(1.0, |e| e.problem.tau());
        let known = entry.as_ref().and_then(|e| e.known_constants);

        if !(config.horizon >= 0.0 && config.horizon.is_finite()) {
            errors.push(format!("horizon = {} must be finite and nonnegative", config.horizon));
        }
        if command != Command::Simulate && command != Command::Check && !(config.horizon > 0.0) {
            errors.push("horizon must be positive for this command".into());
        }
        if config.n_paths == 0 {
            errors.push("n_paths must be at least 1".into());
        }
        if !(config.epsilon > 0.0 && config.epsilon <= 0.25) {
            errors.push(format!("epsilon = {} must lie in (0, 1/4]", config.epsilon));
        }
        if let Some(h) = config.h_hat {
            if !(h >= 1.0 && h.is_finite()) {
                errors.push(format!("h_hat = {h} must be at least 1"));
            }
        }
        if !(config.c_star >= 1.0 && config.c_star.is_finite()) {
            errors.push(format!("c_star = {} must be at least 1", config.c_star));
        }
        if let Some([lo, hi]) = config.fit_window {
            if !(lo < hi) {
                errors.push(format!("fit_window [{lo}, {hi}] must have lo < hi"));
            }
        }
        if config.sample_stride == 0 {
            errors.push("sample_stride must be at least 1".into());
        }

        // Step size.
        let needs_step = matches!(command, Command::Simulate | Command::Stability | Command::Equivalence);
        let mut m_sub = None;
        let mut delta = None;
        if needs_step {
            match (config.m_sub, config.delta) {
                (Some(_), Some(_)) => errors.push("give either m_sub or delta, not both".into()),
                (None, None) => errors.push("a step size is required: set m_sub or delta".into()),
                (Some(0), None) => errors.push("m_sub must be at least 1".into()),
                (Some(m), None) => {
                    let d = tau / m as f64;
                    if d > 1.0 {
                        errors.push(format!("delta = tau/m_sub = {d} exceeds 1"));
                    }
                    m_sub = Some(m);
                    delta = Some(d);
                }
                (None, Some(d)) => {
                    m_sub = m_for(tau, d, "delta", &mut errors);
                    delta = Some(d);
                }
            }
            if let Some(d) = delta {
                check_horizon_multiple(config.horizon, d, "delta", &mut errors);
            }
        }

        let mut delta_list = None;
        let mut reference_delta = None;
        if command == Command::Converge {
            match (&config.delta_list, config.reference_delta) {
                (Some(list), Some(r)) if !list.is_empty() => {
                    let reference_m = m_for(tau, r, "reference_delta", &mut errors);
                    check_horizon_multiple(config.horizon, r, "reference_delta", &mut errors);
                    for &d in list {
                        let m = m_for(tau, d, "delta_list entry", &mut errors);
                        if let (Some(m), Some(rm)) = (m, reference_m) {
                            if rm % m != 0 {
                                errors.push(format!("delta_list entry {d} is not a multiple of reference_delta {r}"));
                            }
                        }
                        check_horizon_multiple(config.horizon, d, "delta_list entry", &mut errors);
                    }
                    let mut sorted = list.clone();
                    sorted.sort_by(|a, b| b.total_cmp(a));
                    if sorted.windows(2).any(|w| w[0] == w[1]) {
                        errors.push("delta_list contains duplicates".into());
                    }
                    delta_list = Some(sorted);
                    reference_delta = Some(r);
                }
                _ => errors.push("converge needs a nonempty delta_list and a reference_delta".into()),
            }
            if !(config.q_bar >= 2.0 && config.q_bar.is_finite()) {
                errors.push(format!("q_bar = {} must be at least 2", config.q_bar));
            }
        }

        let p = match command {
            Command::Check => config.p.or(known.map(|k| k.p)),
            _ => Some(config.p.unwrap_or(2.0)),
        };
        let q = config.q.or(known.map(|k| k.q));
        if let Some(p) = p {
            if !(p > 0.0 && p.is_finite()) {
                errors.push(format!("p = {p} must be positive"));
            }
        }
        if command == Command::Check {
            match p {
                Some(p) if p <= 2.0 => errors.push(format!("p = {p} must exceed 2 for the Khasminskii check")),
                None => errors.push("p is required for this problem (no registry value)".into()),
                _ => {}
            }
            match q {
                Some(q) if q <= 2.0 => errors.push(format!("q = {q} must exceed 2 for the monotonicity check")),
                None => errors.push("q is required for this problem (no registry value)".into()),
                _ => {}
            }
            if config.n_samples == 0 {
                errors.push("n_samples must be at least 1".into());
            }
            if !(config.lipschitz_radius > 0.0 && config.lipschitz_radius.is_finite()) {
                errors.push(format!("lipschitz_radius = {} must be positive", config.lipschitz_radius));
            }
        }
        if command == Command::Converge {
            if let Some(q) = q {
                if config.q_bar >= q {
                    errors.push(format!("q_bar = {} must be below q = {q}", config.q_bar));
                }
            }
        }

        let uses_policy = config.variant == VariantName::Truncated && command != Command::Check;
        if command == Command::Equivalence && config.variant == VariantName::Classical {
            errors.push("equivalence runs the truncated scheme; variant must be 'truncated'".into());
        }
        let rho = config.rho.or(known.map(|k| k.rho));
        if let Some(r) = rho {
            if !(r > 0.0 && r.is_finite()) {
                errors.push(format!("rho = {r} must be positive"));
            }
        }
        if (uses_policy || command == Command::Check) && rho.is_none() {
            errors.push("rho is required for this problem (no registry value)".into());
        }
        if let Some(h) = config.h3 {
            if !(h > 0.0 && h.is_finite()) {
                errors.push(format!("h3 = {h} must be positive"));
            }
        }

        if !errors.is_empty() {
            return Err(SddeError::Config(errors));
        }
        let entry = entry.expect("validated");

        let mut h3 = None;
        let mut h_hat = None;
        let mut policy = None;
        let mut radius = None;
        if uses_policy {
            let rho = rho.expect("validated");
            let h = match config.h3.or(known.map(|k| k.h3)) {
                Some(h) => h,
                None => conditions::estimate_growth_constant(&entry.problem, rho, &SampleSpec::new(10_000, config.seed))?,
            };
            let cap = config.h_hat.unwrap_or(h.max(1.0));
            let pol = TruncationPolicy::new(h, rho, cap, config.epsilon).map_err(|e| SddeError::Config(vec![e.to_string()]))?;
            if let Some(d) = delta {
                radius = Some(pol.truncation_radius(d)?);
            }
            h3 = Some(h);
            h_hat = Some(cap);
            policy = Some(pol);
        }
        let resolved = ResolvedConfig {
            command,
            problem: config.problem.clone(),
            params,
            tau,
            delta,
            m_sub,
            delta_list,
            reference_delta,
            horizon: config.horizon,
            n_paths: config.n_paths,
            p,
            q_bar: config.q_bar,
            q,
            variant: config.variant,
            epsilon: config.epsilon,
            h_hat,
            h3,
            rho,
            truncation_radius: radius,
            seed: config.seed,
            c_star: config.c_star,
            fit_window: config.fit_window,
            sample_stride: config.sample_stride,
            n_samples: config.n_samples,
            lipschitz_radius: config.lipschitz_radius,
            fail_on_blowup: config.fail_on_blowup,
        };
        let canonical = serde_json::to_string(&resolved).expect("config serializes");
        let config_hash = Sha256::digest(canonical.as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            });
        Ok(Self {
            resolved,
            entry,
            policy,
            output_dir: config.output_dir.clone(),
            config_hash,
        })
    }

    fn variant(&self) -> SchemeVariant {
        match self.policy {
            Some(p) => SchemeVariant::Truncated(p),
            None => SchemeVariant::Classical,
        }
    }

    fn scheme_run(&self) -> Result<SchemeRun> {
        let m = self.resolved.m_sub.expect("step validated");
        SchemeRun::new(self.entry.problem.clone(), self.variant(), m, self.resolved.horizon)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| SddeError::io(&self.output_dir, e))?;
        let path = self.output_dir.join(name);
        fs::write(&path, contents).map_err(|e| SddeError::io(&path, e))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, body: impl Serialize) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            config_hash: &'a str,
            #[serde(flatten)]
            body: T,
        }
        let mut text = serde_json::to_string_pretty(&Wrapped {
            config_hash: &self.config_hash,
            body,
        })
        .expect("report serializes");
        text.push('\n');
        self.write(name, &text)
    }

    fn csv_header(&self, columns: &str) -> String {
        format!("# config_hash: {}\n{columns}\n", self.config_hash)
    }

    pub fn run(&self) -> Result<Vec<PathBuf>> {
        match self.resolved.command {
            Command::Simulate => self.run_simulate(),
            Command::Converge => self.run_converge(),
            Command::Stability => self.run_stability(),
            Command::Equivalence => self.run_equivalence(),
            Command::Check => self.run_check(),
        }
    }

    fn run_simulate(&self) -> Result<Vec<PathBuf>> {
        let run = self.scheme_run()?;
        let family = LatticeFamily::new(self.resolved.seed, run.delta(), self.entry.problem.noise_dim())?;
        let ensemble = scheme::simulate(&run, &family, self.resolved.n_paths)?;
        if self.resolved.fail_on_blowup {
            if let Some(path) = (0..ensemble.n_paths()).find(|&i| ensemble.flagged(i)) {
                let last = run.n_steps() as i64;
                return Err(SddeError::NumericRange {
                    context: "classical scheme blow-up",
                    x: ensemble.state(path, last).to_vec(),
                    y: ensemble.state(path, last - run.m_sub() as i64).to_vec(),
                });
            }
        }
        let n = self.entry.problem.dim();
        let columns: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        let mut csv = self.csv_header(&format!("path_id,t,{}", columns.join(",")));
        for path in 0..ensemble.n_paths() {
            for k in ensemble.grid_indices() {
                let _ = write!(csv, "{path},{}", run.time(k));
                for v in ensemble.state(path, k) {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
        }
        #[derive(Serialize)]
        struct Meta<'a> {
            config: &'a ResolvedConfig,
            n_steps: usize,
            flagged_fraction: f64,
        }
        Ok(vec![
            self.write("paths.csv", &csv)?,
            self.write_json(
                "meta.json",
                Meta {
                    config: &self.resolved,
                    n_steps: run.n_steps(),
                    flagged_fraction: ensemble.flagged_fraction(),
                },
            )?,
        ])
    }

    fn run_converge(&self) -> Result<Vec<PathBuf>> {
        let r = &self.resolved;
        let reference_m = integer_ratio(r.tau, r.reference_delta.expect("validated")).expect("validated");
        let report = analysis::strong_error(
            &self.entry.problem,
            self.variant(),
            r.delta_list.as_deref().expect("validated"),
            reference_m,
            r.q_bar,
            r.n_paths,
            r.horizon,
            r.seed,
        )?;
        let mut csv = self.csv_header("delta,error,std_error");
        for ((d, e), s) in report.deltas.iter().zip(&report.errors).zip(&report.std_errors) {
            let _ = writeln!(csv, "{d},{e},{s}");
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            fitted_order: Option<f64>,
            moment_slope: Option<f64>,
            r_squared: Option<f64>,
            errors_strictly_decreasing: bool,
            report: &'a analysis::ConvergenceReport,
        }
        Ok(vec![
            self.write("errors.csv", &csv)?,
            self.write_json(
                "summary.json",
                Summary {
                    fitted_order: report.fitted_order,
                    moment_slope: report.moment_slope,
                    r_squared: report.r_squared,
                    errors_strictly_decreasing: report.errors_strictly_decreasing(),
                    report: &report,
                },
            )?,
        ])
    }

    fn run_stability(&self) -> Result<Vec<PathBuf>> {
        let r = &self.resolved;
        let run = self.scheme_run()?;
        let family = LatticeFamily::new(r.seed, run.delta(), self.entry.problem.noise_dim())?;
        let p = r.p.expect("defaulted");
        let series = analysis::simulate_moments(&run, &family, r.n_paths, p, r.sample_stride, DEFAULT_BATCHES)?;
        if series.flagged_fraction > 0.0 && r.fail_on_blowup {
            return Err(SddeError::NumericRange {
                context: "classical scheme blow-up",
                x: Vec::new(),
                y: Vec::new(),
            });
        }
        let mut csv = self.csv_header("t,moment,std_error");
        for ((t, m), s) in series.times.iter().zip(&series.values).zip(&series.std_errors) {
            let _ = writeln!(csv, "{t},{m},{s}");
        }
        let problem = &self.entry.problem;
        let degenerate = problem.origin_fixed() && problem.initial().sup_norm(problem.tau(), 1000) == 0.0;
        #[derive(Serialize)]
        struct Decay {
            degenerate: bool,
            lambda_hat: Option<f64>,
            log_m_hat: Option<f64>,
            r_squared: Option<f64>,
            window: Option<[f64; 2]>,
            lambda_std_error: Option<f64>,
            n_points: Option<usize>,
            flagged_fraction: f64,
        }
        let fit = if degenerate { None } else { Some(analysis::fit_decay(&series, r.fit_window)?) };
        let decay = Decay {
            degenerate,
            lambda_hat: fit.as_ref().map(|f| f.lambda_hat),
            log_m_hat: fit.as_ref().map(|f| f.log_m_hat),
            r_squared: fit.as_ref().map(|f| f.r_squared),
            window: fit.as_ref().map(|f| f.window),
            lambda_std_error: fit.as_ref().and_then(|f| f.lambda_std_error),
            n_points: fit.as_ref().map(|f| f.n_points),
            flagged_fraction: series.flagged_fraction,
        };
        Ok(vec![self.write("moments.csv", &csv)?, self.write_json("decay.json", decay)?])
    }

    fn run_equivalence(&self) -> Result<Vec<PathBuf>> {
        let r = &self.resolved;
        let report = analysis::equivalence_experiment(
            &self.entry.problem,
            self.policy.as_ref().expect("validated"),
            r.p.expect("defaulted"),
            r.m_sub.expect("validated"),
            r.horizon,
            r.n_paths,
            r.seed,
            EquivalenceOptions {
                c_star: r.c_star,
                window: r.fit_window,
                ..EquivalenceOptions::default()
            },
        )?;
        Ok(vec![self.write_json("equivalence.json", report)?])
    }

    fn run_check(&self) -> Result<Vec<PathBuf>> {
        let r = &self.resolved;
        let spec = SampleSpec::new(r.n_samples, r.seed);
        let problem = &self.entry.problem;
        let reports = vec![
            conditions::check_local_lipschitz(problem, r.lipschitz_radius, &spec)?,
            conditions::check_khasminskii(problem, r.p.expect("validated"), &spec)?,
            conditions::check_monotonicity_u(problem, r.q.expect("validated"), self.entry.potential.as_ref(), &spec)?,
            conditions::check_polynomial_growth(problem, r.rho.expect("validated"), &spec)?,
            conditions::check_holder_initial(problem.initial(), problem.tau(), &spec)?,
        ];
        #[derive(Serialize)]
        struct Checks {
            reports: Vec<conditions::ConditionReport>,
        }
        Ok(vec![self.write_json("conditions.json", Checks { reports })?])
    }
}

/// Process exit code for an error: 2 configuration, 3 numeric range, 4 I/O.
pub fn exit_code(err: &SddeError) -> i32 {
    match err {
        SddeError::Config(_) | SddeError::Argument(_) => 2,
        SddeError::NumericRange { .. } => 3,
        SddeError::Io { .. } => 4,
    }
}

#[derive(Debug, Parser)]
#[command(name = "sdde", version, about = "Truncated Euler–Maruyama experiments for stochastic delay equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Simulate sample paths and write paths.csv and meta.json.
    Simulate(CommonArgs),
    /// Estimate strong errors over a list of step sizes.
    Converge(CommonArgs),
    /// Estimate moments and fit exponential decay.
    Stability(CommonArgs),
    /// Compare decay rates at two step sizes and transfer constants.
    Equivalence(CommonArgs),
    /// Sample the structural conditions of the problem.
    Check(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker-thread cap; results do not depend on it.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

impl CliCommand {
    fn split(&self) -> (Command, &CommonArgs) {
        match self {
            CliCommand::Simulate(a) => (Command::Simulate, a),
            CliCommand::Converge(a) => (Command::Converge, a),
            CliCommand::Stability(a) => (Command::Stability, a),
            CliCommand::Equivalence(a) => (Command::Equivalence, a),
            CliCommand::Check(a) => (Command::Check, a),
        }
    }
}

/// Runs the parsed command line; returns the written files.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let (command, args) = cli.command.split();
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(threads) = args.threads {
        // Fails only if the global pool already exists, which is harmless.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::debug!("thread pool already initialised: {e}");
        }
    }
    let experiment = Experiment::prepare(&config, command)?;
    log::info!("running {command:?} with config hash {}", experiment.config_hash);
    experiment.run()
}

/// Entry point of the `sdde` binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
