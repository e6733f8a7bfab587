//! Monte Carlo estimators built on the scheme: moments, exponential decay
//! fits, coupled strong errors with order regression, and the constants that
//! carry exponential stability between the equation and the scheme.

use serde::Serialize;

use crate::error::{Result, SddeError};
use crate::model::{euclidean_norm, SddeProblem};
use crate::noise::{LatticeFamily, NextIncrement};
use crate::scheme::{compatible_factor, for_each_path_ordered, integrate_path, PathIntegrator, SchemeRun, SchemeVariant, TrajectoryEnsemble, TruncationPolicy};

/// Default number of independent batches used for batch-means standard
/// errors of fitted rates.
pub const DEFAULT_BATCHES: usize = 10;

/// Ordinary least-squares line `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Fits a line through at least two points with distinct abscissae.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(SddeError::arg("least squares needs at least two (x, y) pairs"));
    }
    let n = xs.len() as f64;
    // Shifted means stay exact for constant data.
    let x_mean = xs[0] + xs.iter().map(|x| x - xs[0]).sum::<f64>() / n;
    let y_mean = ys[0] + ys.iter().map(|y| y - ys[0]).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - x_mean, y - y_mean);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(SddeError::arg("least squares needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(LineFit {
        slope,
        intercept,
        r_squared,
        n_points: xs.len(),
    })
}

/// Running mean and variance, updated in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    /// Standard error of the mean.
    fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
        }
    }
}

/// `Ê|x(t)|^p` at a set of times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSeries {
    pub p: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub n_paths: usize,
    pub flagged_fraction: f64,
    /// Per-batch estimates (contiguous blocks of paths), used for batch-means
    /// errors of fitted rates. Empty when batching was not requested.
    #[serde(skip)]
    pub batch_values: Vec<Vec<f64>>,
}

fn check_order(p: f64) -> Result<()> {
    if p > 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(SddeError::arg(format!("moment order must be positive, got {p}")))
    }
}

/// Averages `|x̄(t)|^p` over all paths of the ensemble, in path order.
/// Blown-up classical paths are included at their frozen state.
pub fn estimate_moment(ensemble: &TrajectoryEnsemble, p: f64, times: &[f64]) -> Result<MomentSeries> {
    estimate_moment_filtered(ensemble, p, times, true)
}

/// Like [`estimate_moment`] but excludes flagged paths from the averages.
pub fn estimate_moment_excluding_flagged(ensemble: &TrajectoryEnsemble, p: f64, times: &[f64]) -> Result<MomentSeries> {
    estimate_moment_filtered(ensemble, p, times, false)
}

fn estimate_moment_filtered(ensemble: &TrajectoryEnsemble, p: f64, times: &[f64], include_flagged: bool) -> Result<MomentSeries> {
    check_order(p)?;
    if ensemble.n_paths() == 0 {
        return Err(SddeError::arg("empty ensemble"));
    }
    check_times(times)?;
    let run = ensemble.run();
    let mut acc = vec![Welford::default(); times.len()];
    for path in 0..ensemble.n_paths() {
        if !include_flagged && ensemble.flagged(path) {
            continue;
        }
        for (a, &t) in acc.iter_mut().zip(times) {
            let x = ensemble.step_process_value(path, t)?;
            a.push(euclidean_norm(&x).powf(p));
        }
    }
    if acc.first().is_some_and(|a| a.n == 0) {
        return Err(SddeError::arg("every path is flagged; no moments to estimate"));
    }
    let _ = run;
    Ok(MomentSeries {
        p,
        times: times.to_vec(),
        values: acc.iter().map(|a| a.mean).collect(),
        std_errors: acc.iter().map(Welford::std_error).collect(),
        n_paths: ensemble.n_paths(),
        flagged_fraction: ensemble.flagged_fraction(),
        batch_values: Vec::new(),
    })
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SddeError::arg("sample times must be strictly increasing"));
    }
    Ok(())
}

/// Simulates `n_paths` paths and accumulates `Ê|X_k|^p` at every
/// `stride`-th grid index from `0` to `K` without storing trajectories.
pub fn simulate_moments(
    run: &SchemeRun,
    family: &LatticeFamily,
    n_paths: usize,
    p: f64,
    stride: usize,
    batches: usize,
) -> Result<MomentSeries> {
    check_order(p)?;
    if n_paths == 0 {
        return Err(SddeError::arg("empty ensemble"));
    }
    if stride == 0 {
        return Err(SddeError::arg("sampling stride must be positive"));
    }
    let factor = compatible_factor(run, family)?;
    let sample_ks: Vec<usize> = (0..=run.n_steps()).step_by(stride).collect();
    let n_samples = sample_ks.len();
    let batches = if batches >= 2 && n_paths >= 2 * batches { batches } else { 0 };

    let mut acc = vec![Welford::default(); n_samples];
    let mut batch_acc = vec![vec![Welford::default(); n_samples]; batches];
    let mut flagged = 0usize;
    for_each_path_ordered(
        n_paths,
        |path| {
            let mut values = Vec::with_capacity(n_samples);
            let flag = if run.n_steps() == 0 {
                values.push(euclidean_norm(PathIntegrator::new(run).current()).powf(p));
                false
            } else {
                let lattice = family.lattice(path, run.n_steps() * factor)?;
                let mut stream = lattice.coarse_stream(factor)?;
                integrate_path(run, &mut stream, |k, x| {
                    if k >= 0 && (k as usize).is_multiple_of(stride) {
                        values.push(euclidean_norm(x).powf(p));
                    }
                })?
            };
            Ok((values, flag))
        },
        |path, (values, flag)| {
            flagged += flag as usize;
            for (a, v) in acc.iter_mut().zip(&values) {
                a.push(*v);
            }
            if batches > 0 {
                let b = path as usize * batches / n_paths;
                for (a, v) in batch_acc[b].iter_mut().zip(&values) {
                    a.push(*v);
                }
            }
        },
    )?;
    Ok(MomentSeries {
        p,
        times: sample_ks.iter().map(|&k| run.time(k as i64)).collect(),
        values: acc.iter().map(|a| a.mean).collect(),
        std_errors: acc.iter().map(Welford::std_error).collect(),
        n_paths,
        flagged_fraction: flagged as f64 / n_paths as f64,
        batch_values: batch_acc.iter().map(|b| b.iter().map(|a| a.mean).collect()).collect(),
    })
}

/// Least-squares fit of `log Ê|x(t)|^p ≈ log(M‖ξ‖^p) - λ t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub lambda_hat: f64,
    pub log_m_hat: f64,
    pub r_squared: f64,
    pub window: [f64; 2],
    pub n_points: usize,
    /// Batch-means standard error of `lambda_hat`, when batches were kept.
    pub lambda_std_error: Option<f64>,
}

/// Default fitting window `[horizon/4, horizon]`.
pub fn default_window(series: &MomentSeries) -> [f64; 2] {
    let horizon = series.times.last().copied().unwrap_or(0.0);
    [horizon / 4.0, horizon]
}

fn fit_log_line(times: &[f64], values: &[f64], window: [f64; 2]) -> Result<(LineFit, usize)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &v) in times.iter().zip(values) {
        if t < window[0] || t > window[1] {
            continue;
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(SddeError::arg(format!(
                "moment value {v} at t = {t} is not strictly positive and finite; cannot fit in log space"
            )));
        }
        xs.push(t);
        ys.push(v.ln());
    }
    if xs.len() < 5 {
        return Err(SddeError::arg(format!(
            "decay fit needs at least 5 points in [{}, {}], found {}",
            window[0],
            window[1],
            xs.len()
        )));
    }
    let n = xs.len();
    Ok((least_squares(&xs, &ys)?, n))
}

pub fn fit_decay(series: &MomentSeries, window: Option<[f64; 2]>) -> Result<DecayFit> {
    let window = window.unwrap_or_else(|| default_window(series));
    if !(window[0] < window[1]) {
        return Err(SddeError::arg(format!("invalid fit window {window:?}")));
    }
    let (line, n_points) = fit_log_line(&series.times, &series.values, window)?;
    let lambda_std_error = if series.batch_values.len() >= 2 {
        let rates: Option<Vec<f64>> = series
            .batch_values
            .iter()
            .map(|b| fit_log_line(&series.times, b, window).ok().map(|(l, _)| -l.slope))
            .collect();
        rates.map(|r| {
            let b = r.len() as f64;
            let mean = r.iter().sum::<f64>() / b;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (b - 1.0);
            (var / b).sqrt()
        })
    } else {
        None
    };
    Ok(DecayFit {
        lambda_hat: -line.slope,
        log_m_hat: line.intercept,
        r_squared: line.r_squared,
        window,
        n_points,
        lambda_std_error,
    })
}

/// Strong errors `Ê|x_ref(T) - x_Δ(T)|^q̄` on coupled paths and the fitted
/// order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub deltas: Vec<f64>,
    pub errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub reference_delta: f64,
    pub q_bar: f64,
    pub n_paths: usize,
    pub horizon: f64,
    /// Slope of `log error` against `log Δ`.
    pub moment_slope: Option<f64>,
    /// `moment_slope / q̄`: the strong order β with error `= O(Δ^{β q̄})`.
    pub fitted_order: Option<f64>,
    pub r_squared: Option<f64>,
}

impl ConvergenceReport {
    pub fn errors_strictly_decreasing(&self) -> bool {
        self.errors.windows(2).all(|w| w[1] < w[0])
    }
}

/// Runs every step size in `deltas` and the reference step `τ/reference_m_sub`
/// on the same Brownian paths, sampled on the reference grid.
#[allow(clippy::too_many_arguments)]
pub fn strong_error(
    problem: &SddeProblem,
    variant: SchemeVariant,
    deltas: &[f64],
    reference_m_sub: usize,
    q_bar: f64,
    n_paths: usize,
    horizon: f64,
    seed: u64,
) -> Result<ConvergenceReport> {
    if !(q_bar >= 2.0 && q_bar.is_finite()) {
        return Err(SddeError::arg(format!("error exponent q_bar must be >= 2, got {q_bar}")));
    }
    if n_paths == 0 {
        return Err(SddeError::arg("strong error needs at least one path"));
    }
    if deltas.is_empty() {
        return Err(SddeError::arg("no step sizes given"));
    }
    if !(horizon > 0.0) {
        return Err(SddeError::arg("strong error needs a positive horizon"));
    }
    let mut deltas = deltas.to_vec();
    deltas.sort_by(|a, b| b.total_cmp(a));
    if deltas.windows(2).any(|w| w[0] == w[1]) {
        return Err(SddeError::arg("duplicate step sizes"));
    }
    let reference = SchemeRun::new(problem.clone(), variant, reference_m_sub, horizon)?;
    let family = LatticeFamily::new(seed, reference.delta(), problem.noise_dim())?;
    let mut runs = Vec::with_capacity(deltas.len());
    let mut factors = Vec::with_capacity(deltas.len());
    for &delta in &deltas {
        let m_sub = crate::noise::integer_ratio(problem.tau(), delta)
            .ok_or_else(|| SddeError::arg(format!("step {delta} is not tau/M for an integer M")))?;
        let run = SchemeRun::new(problem.clone(), variant, m_sub, horizon)?;
        let factor = compatible_factor(&run, &family).map_err(|_| {
            SddeError::arg(format!(
                "step {delta} is not an integer multiple of the reference step {}",
                reference.delta()
            ))
        })?;
        runs.push(run);
        factors.push(factor);
    }
    let n_master = reference.n_steps();
    let m = problem.noise_dim();

    let mut acc = vec![Welford::default(); deltas.len()];
    for_each_path_ordered(
        n_paths,
        |path| {
            let lattice = family.lattice(path, n_master)?;
            let mut stream = lattice.stream();
            let mut reference_path = PathIntegrator::new(&reference);
            let mut coarse: Vec<PathIntegrator> = runs.iter().map(PathIntegrator::new).collect();
            let mut sums = vec![vec![0.0; m]; runs.len()];
            let mut dw = vec![0.0; m];
            for i in 0..n_master {
                stream.next_into(&mut dw);
                reference_path.advance(&dw)?;
                for ((integrator, sum), &factor) in coarse.iter_mut().zip(sums.iter_mut()).zip(&factors) {
                    for (s, w) in sum.iter_mut().zip(&dw) {
                        *s += w;
                    }
                    if (i + 1) % factor == 0 {
                        integrator.advance(sum)?;
                        sum.fill(0.0);
                    }
                }
            }
            let target = reference_path.current();
            Ok(coarse
                .iter()
                .map(|c| {
                    let diff: Vec<f64> = c.current().iter().zip(target).map(|(a, b)| a - b).collect();
                    euclidean_norm(&diff).powf(q_bar)
                })
                .collect::<Vec<f64>>())
        },
        |_, errs| {
            for (a, e) in acc.iter_mut().zip(errs) {
                a.push(e);
            }
        },
    )?;
    let errors: Vec<f64> = acc.iter().map(|a| a.mean).collect();
    let fit = if errors.len() >= 2 && errors.iter().all(|e| *e > 0.0 && e.is_finite()) {
        let xs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        Some(least_squares(&xs, &ys)?)
    } else {
        None
    };
    Ok(ConvergenceReport {
        deltas,
        std_errors: acc.iter().map(Welford::std_error).collect(),
        errors,
        reference_delta: reference.delta(),
        q_bar,
        n_paths,
        horizon,
        moment_slope: fit.map(|f| f.slope),
        fitted_order: fit.map(|f| f.slope / q_bar),
        r_squared: fit.map(|f| f.r_squared),
    })
}

/// Which side's stability is being transferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDirection {
    /// From the equation's `(λ, M)` to the scheme's `(γ, H)`.
    SddeToScheme,
    /// From the scheme's `(γ, H)` to the equation's `(λ, M)`.
    SchemeToSdde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferConstants {
    pub direction: TransferDirection,
    pub input_rate: f64,
    pub input_growth: f64,
    pub p: f64,
    pub tau: f64,
    pub c_star: f64,
    /// Window `T = τ(9 + ⌊4 log(2^p G) / (r τ)⌋)`.
    pub window_t: f64,
    pub output_rate: f64,
    pub output_growth: f64,
}

/// `T = τ(9 + ⌊4 ln(2^p G)/(r τ)⌋)` for rate `r` and growth `G`.
pub fn transfer_window(rate: f64, growth: f64, p: f64, tau: f64) -> f64 {
    let log_term = p * std::f64::consts::LN_2 + growth.ln();
    tau * (9.0 + (4.0 * log_term / (rate * tau)).floor())
}

/// Output rate `r/2` and growth `2^{p+1} G C* e^{r T / 2}`.
pub fn transfer_constants(
    direction: TransferDirection,
    input_rate: f64,
    input_growth: f64,
    p: f64,
    tau: f64,
    c_star: f64,
) -> Result<TransferConstants> {
    let mut problems = Vec::new();
    if !(input_rate > 0.0 && input_rate.is_finite()) {
        problems.push(format!("rate must be positive, got {input_rate}"));
    }
    if !(input_growth >= 1.0 && input_growth.is_finite()) {
        problems.push(format!("growth constant must be >= 1, got {input_growth}"));
    }
    if !(p > 0.0 && p.is_finite()) {
        problems.push(format!("p must be positive, got {p}"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        problems.push(format!("tau must be positive, got {tau}"));
    }
    if !(c_star >= 1.0 && c_star.is_finite()) {
        problems.push(format!("C* must be >= 1, got {c_star}"));
    }
    if !problems.is_empty() {
        return Err(SddeError::Argument(problems.join("; ")));
    }
    let window_t = transfer_window(input_rate, input_growth, p, tau);
    let output_growth = 2f64.powf(p + 1.0) * input_growth * c_star * (0.5 * input_rate * window_t).exp();
    Ok(TransferConstants {
        direction,
        input_rate,
        input_growth,
        p,
        tau,
        c_star,
        window_t,
        output_rate: input_rate / 2.0,
        output_growth,
    })
}

/// Left and right sides of
/// `2^p C(2T-2τ) α(Δ) + 2^p H e^{-γ(T-2τ)} ≤ e^{-γT/2}`.
pub fn transfer_condition_sides(
    c_of_t: f64,
    alpha_of_delta: f64,
    p: f64,
    growth: f64,
    rate: f64,
    window_t: f64,
    tau: f64,
) -> Result<(f64, f64)> {
    if !(window_t > 2.0 * tau) {
        return Err(SddeError::arg(format!("window T = {window_t} must exceed 2 tau = {}", 2.0 * tau)));
    }
    let args = [c_of_t, alpha_of_delta, p, growth, rate, tau];
    if args.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || p <= 0.0 || growth <= 0.0 || rate <= 0.0 || tau <= 0.0 {
        return Err(SddeError::arg("transfer condition arguments must be finite and positive"));
    }
    let two_p = 2f64.powf(p);
    let lhs = two_p * c_of_t * alpha_of_delta + two_p * growth * (-rate * (window_t - 2.0 * tau)).exp();
    let rhs = (-0.5 * rate * window_t).exp();
    Ok((lhs, rhs))
}

/// Whether the convergence-versus-decay condition holds (inclusive).
pub fn check_transfer_condition(
    c_of_t: f64,
    alpha_of_delta: f64,
    p: f64,
    growth: f64,
    rate: f64,
    window_t: f64,
    tau: f64,
) -> Result<bool> {
    let (lhs, rhs) = transfer_condition_sides(c_of_t, alpha_of_delta, p, growth, rate, window_t, tau)?;
    Ok(lhs <= rhs)
}

/// Options of [`equivalence_experiment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceOptions {
    pub c_star: f64,
    pub window: Option<[f64; 2]>,
    pub batches: usize,
    /// The proxy for the exact solution uses step `Δ / refinement`.
    pub refinement: usize,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        Self {
            c_star: 1.0,
            window: None,
            batches: DEFAULT_BATCHES,
            refinement: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub p: f64,
    pub delta: f64,
    pub reference_delta: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub initial_norm: f64,
    /// Zero initial data: every moment vanishes and nothing can be fitted.
    pub degenerate: bool,
    pub fit_delta: Option<DecayFit>,
    pub fit_reference: Option<DecayFit>,
    pub sign_agreement: Option<bool>,
    /// Constants carried from the reference fit to the scheme, present when
    /// the reference decay rate is positive.
    pub transfer: Option<TransferConstants>,
    pub flagged_fraction_delta: f64,
    pub flagged_fraction_reference: f64,
}

/// Fits exponential decay of `Ê|x(t)|^p` for the truncated scheme at `Δ`
/// and at `Δ / refinement` on coupled paths and compares the fitted rates.
#[allow(clippy::too_many_arguments)]
pub fn equivalence_experiment(
    problem: &SddeProblem,
    policy: &TruncationPolicy,
    p: f64,
    m_sub: usize,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    options: EquivalenceOptions,
) -> Result<EquivalenceReport> {
    if !problem.origin_fixed() {
        return Err(SddeError::arg(format!(
            "problem '{}' does not declare f(0,0) = g(0,0) = 0",
            problem.name()
        )));
    }
    if options.refinement == 0 {
        return Err(SddeError::arg("refinement must be positive"));
    }
    let coarse = SchemeRun::truncated(problem.clone(), *policy, m_sub, horizon)?;
    let fine = SchemeRun::truncated(problem.clone(), *policy, m_sub * options.refinement, horizon)?;
    let family = LatticeFamily::new(seed, fine.delta(), problem.noise_dim())?;
    let initial_norm = problem.initial().sup_norm(problem.tau(), 1000.max(m_sub));

    let series_delta = simulate_moments(&coarse, &family, n_paths, p, 1, options.batches)?;
    let series_ref = simulate_moments(&fine, &family, n_paths, p, options.refinement, options.batches)?;
    let mut report = EquivalenceReport {
        p,
        delta: coarse.delta(),
        reference_delta: fine.delta(),
        horizon,
        n_paths,
        seed,
        initial_norm,
        degenerate: initial_norm == 0.0,
        fit_delta: None,
        fit_reference: None,
        sign_agreement: None,
        transfer: None,
        flagged_fraction_delta: series_delta.flagged_fraction,
        flagged_fraction_reference: series_ref.flagged_fraction,
    };
    if report.degenerate {
        return Ok(report);
    }
    let fit_delta = fit_decay(&series_delta, options.window)?;
    let fit_ref = fit_decay(&series_ref, options.window)?;
    report.sign_agreement = Some(fit_delta.lambda_hat.signum() == fit_ref.lambda_hat.signum());
    if fit_ref.lambda_hat > 0.0 {
        // M̂ from the intercept, at least 1 as the definition requires.
        let growth = (fit_ref.log_m_hat - p * initial_norm.ln()).exp().max(1.0);
        report.transfer = Some(transfer_constants(
            TransferDirection::SddeToScheme,
            fit_ref.lambda_hat,
            growth,
            p,
            problem.tau(),
            options.c_star,
        )?);
    }
    report.fit_delta = Some(fit_delta);
    report.fit_reference = Some(fit_ref);
    Ok(report)
}

/// `max_t Ê|x(t) - x̄(t)|^p̂` over the points of a sub-grid with
/// `sub_steps` points per scheme step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolationGap {
    pub delta: f64,
    pub p_hat: f64,
    pub times: Vec<f64>,
    pub mean_gap: Vec<f64>,
    pub max_mean_gap: f64,
    pub n_paths: usize,
}

/// Estimates `Ê|x(t) - x̄(t)|^p̂` at every master point strictly inside each
/// step, with master step `Δ / sub_steps`.
pub fn interpolation_gap(run: &SchemeRun, sub_steps: usize, p_hat: f64, n_paths: usize, seed: u64) -> Result<InterpolationGap> {
    check_order(p_hat)?;
    if sub_steps < 2 {
        return Err(SddeError::arg("need at least two sub-steps per step"));
    }
    if n_paths == 0 || run.n_steps() == 0 {
        return Err(SddeError::arg("need at least one path and one step"));
    }
    let master_dt = run.delta() / sub_steps as f64;
    let family = LatticeFamily::new(seed, master_dt, run.problem().noise_dim())?;
    let (n, m) = (run.problem().dim(), run.problem().noise_dim());
    let inner = sub_steps - 1;
    let n_times = run.n_steps() * inner;

    let mut acc = vec![0.0; n_times];
    for_each_path_ordered(
        n_paths,
        |path| {
            let lattice = family.lattice(path, run.n_steps() * sub_steps)?;
            let mut stream = lattice.stream();
            let mut integrator = PathIntegrator::new(run);
            let mut gaps = Vec::with_capacity(n_times);
            let mut w = vec![0.0; m];
            let mut inc = vec![0.0; m];
            let mut gap = vec![0.0; n];
            for _ in 0..run.n_steps() {
                let (drift, diffusion) = integrator.coefficients()?;
                let (drift, diffusion) = (drift.to_vec(), diffusion.to_vec());
                w.fill(0.0);
                for j in 1..=sub_steps {
                    stream.next_into(&mut inc);
                    for (a, b) in w.iter_mut().zip(&inc) {
                        *a += b;
                    }
                    if j < sub_steps {
                        let elapsed = j as f64 * master_dt;
                        for (i, gi) in gap.iter_mut().enumerate() {
                            let noise: f64 = diffusion[i * m..(i + 1) * m].iter().zip(&w).map(|(g, x)| g * x).sum();
                            *gi = drift[i] * elapsed + noise;
                        }
                        gaps.push(euclidean_norm(&gap).powf(p_hat));
                    }
                }
                integrator.advance(&w)?;
            }
            Ok(gaps)
        },
        |_, gaps| {
            for (a, g) in acc.iter_mut().zip(gaps) {
                *a += g;
            }
        },
    )?;
    let mean_gap: Vec<f64> = acc.iter().map(|s| s / n_paths as f64).collect();
    let times = (0..run.n_steps())
        .flat_map(|k| (1..sub_steps).map(move |j| run.time(k as i64) + j as f64 * master_dt))
        .collect();
    Ok(InterpolationGap {
        delta: run.delta(),
        p_hat,
        max_mean_gap: mean_gap.iter().copied().fold(0.0, f64::max),
        times,
        mean_gap,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, InitialSegment, ProblemParams};
    use proptest::prelude::*;

    fn series(times: Vec<f64>, values: Vec<f64>) -> MomentSeries {
        let n = times.len();
        MomentSeries {
            p: 2.0,
            times,
            values,
            std_errors: vec![0.0; n],
            n_paths: 1,
            flagged_fraction: 0.0,
            batch_values: Vec::new(),
        }
    }

    #[test]
    fn exact_exponential_fit() {
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        let values = times.iter().map(|t| (-2.0 * t).exp()).collect();
        let fit = fit_decay(&series(times, values), Some([0.0, 4.0])).unwrap();
        assert!((fit.lambda_hat - 2.0).abs() < 1e-12);
        assert!(fit.log_m_hat.abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_fit_has_zero_rate() {
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let fit = fit_decay(&series(times, vec![0.1; 10]), Some([0.0, 1.0])).unwrap();
        assert_eq!(fit.lambda_hat, 0.0);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn fit_rejects_nonpositive_and_short_windows() {
        let times: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut values = vec![1.0; 10];
        values[6] = 0.0;
        let err = fit_decay(&series(times.clone(), values), Some([0.0, 9.0])).unwrap_err();
        assert!(err.to_string().contains("t = 6"), "{err}");
        assert!(fit_decay(&series(times, vec![1.0; 10]), Some([0.0, 3.0])).is_err());
    }

    #[test]
    fn default_window_is_last_three_quarters() {
        let times: Vec<f64> = (0..=8).map(|i| i as f64).collect();
        let s = series(times, vec![1.0; 9]);
        assert_eq!(default_window(&s), [2.0, 8.0]);
    }

    #[test]
    fn moment_of_zero_and_single_paths() {
        let entry = model::linear_scalar(-1.0, 0.0, 0.5, 0.0, 1.0, InitialSegment::constant(vec![0.0]).unwrap()).unwrap();
        let run = SchemeRun::classical(entry.problem, 4, 1.0).unwrap();
        let fam = LatticeFamily::new(1, 0.25, 1).unwrap();
        let ens = crate::scheme::simulate(&run, &fam, 5).unwrap();
        let s = estimate_moment(&ens, 2.0, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(s.values, vec![0.0; 3]);

        let entry = model::linear_scalar(-1.0, 0.0, 0.5, 0.0, 1.0, InitialSegment::constant(vec![1.0]).unwrap()).unwrap();
        let run = SchemeRun::classical(entry.problem, 4, 1.0).unwrap();
        let ens = crate::scheme::simulate(&run, &fam, 1).unwrap();
        let s = estimate_moment(&ens, 3.0, &[0.25, 1.0]).unwrap();
        for (t, v) in s.times.iter().zip(&s.values) {
            let x = ens.step_process_value(0, *t).unwrap();
            assert_eq!(*v, x[0].abs().powf(3.0));
        }
        assert!(estimate_moment(&ens, 0.0, &[0.0]).is_err());
        assert!(estimate_moment(&ens, 2.0, &[0.5, 0.25]).is_err());
    }

    #[test]
    fn second_moment_of_standard_normals() {
        // 10⁵ N(0,1) samples: Ê z² has sd √(2/N) ≈ 0.0045, so ±0.02 is > 4σ.
        // The samples are X_1 of dx = dW with X_0 = 0 and Δ = 1.
        let entry = SddeProblem::new(
            "bm",
            1,
            1,
            1.0,
            std::sync::Arc::new(|_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 0.0),
            std::sync::Arc::new(|_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 1.0),
            InitialSegment::constant(vec![0.0]).unwrap(),
            false,
        )
        .unwrap();
        let run = SchemeRun::classical(entry, 1, 1.0).unwrap();
        let fam = LatticeFamily::new(11, 1.0, 1).unwrap();
        let s = simulate_moments(&run, &fam, 100_000, 2.0, 1, 0).unwrap();
        assert!((s.values[1] - 1.0).abs() < 0.02, "{}", s.values[1]);
        assert!((s.std_errors[1] - (2.0f64 / 1e5).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn streaming_and_ensemble_moments_agree() {
        let e = model::lookup(model::PAPER_EXAMPLE_2D, &ProblemParams::new()).unwrap();
        let policy = TruncationPolicy::with_minimal_cap(e.known_constants.unwrap().h3, 4.0, 0.25).unwrap();
        let run = SchemeRun::truncated(e.problem, policy, 8, 1.0).unwrap();
        let fam = LatticeFamily::new(3, 1.0 / 16.0, 1).unwrap();
        let ens = crate::scheme::simulate(&run, &fam, 300).unwrap();
        let times: Vec<f64> = (0..=8).map(|k| run.time(k)).collect();
        let a = estimate_moment(&ens, 2.0, &times).unwrap();
        let b = simulate_moments(&run, &fam, 300, 2.0, 1, 0).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.times, b.times);
    }

    #[test]
    fn transfer_worked_example() {
        let tc = transfer_constants(TransferDirection::SddeToScheme, 1.0, 4.0, 2.0, 1.0, 1.0).unwrap();
        // floor(4 ln 16) = floor(11.09) = 11
        assert_eq!(tc.window_t, 20.0);
        assert_eq!(tc.output_rate, 0.5);
        let expected = 32.0 * 10f64.exp();
        assert!((tc.output_growth - expected).abs() / expected < 1e-14);
    }

    #[test]
    fn transfer_floor_boundary() {
        // 4·ln(2)/(4·1) ≈ 0.69 < 1, so the floor term vanishes.
        let tc = transfer_constants(TransferDirection::SchemeToSdde, 4.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(tc.window_t, 9.0);
        let tc = transfer_constants(TransferDirection::SchemeToSdde, 4.0, 1.0, 1.0, 0.5, 1.0).unwrap();
        // 4·ln 2/(4·0.5) ≈ 1.39 → 1
        assert_eq!(tc.window_t, 0.5 * 10.0);
    }

    #[test]
    fn transfer_rejects_bad_inputs() {
        assert!(transfer_constants(TransferDirection::SddeToScheme, 0.0, 4.0, 2.0, 1.0, 1.0).is_err());
        assert!(transfer_constants(TransferDirection::SddeToScheme, 1.0, 0.5, 2.0, 1.0, 1.0).is_err());
        assert!(transfer_constants(TransferDirection::SddeToScheme, 1.0, 4.0, -2.0, 1.0, 1.0).is_err());
        assert!(transfer_constants(TransferDirection::SddeToScheme, 1.0, 4.0, 2.0, 0.0, 1.0).is_err());
        assert!(transfer_constants(TransferDirection::SddeToScheme, 1.0, 4.0, 2.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn transfer_round_trip_composes() {
        let (lambda, m, p, tau, c) = (0.8, 3.0, 2.5, 0.5, 1.5);
        let a = transfer_constants(TransferDirection::SddeToScheme, lambda, m, p, tau, c).unwrap();
        let b = transfer_constants(TransferDirection::SchemeToSdde, a.output_rate, a.output_growth, p, tau, c).unwrap();
        assert_eq!(b.output_rate, lambda / 4.0);
        let t2 = tau * (9.0 + (4.0 * (p * std::f64::consts::LN_2 + a.output_growth.ln()) / (a.output_rate * tau)).floor());
        assert_eq!(b.window_t, t2);
        let expected = 2f64.powf(p + 1.0) * a.output_growth * c * (0.5 * a.output_rate * t2).exp();
        assert_eq!(b.output_growth, expected);
    }

    #[test]
    fn transfer_condition_cases() {
        assert!(check_transfer_condition(1.0, 0.0, 2.0, 1e-3, 1.0, 40.0, 1.0).unwrap());
        assert!(!check_transfer_condition(1.0, 1e6, 2.0, 1.0, 1.0, 20.0, 1.0).unwrap());
        assert!(check_transfer_condition(1.0, 0.0, 2.0, 1.0, 1.0, 2.0, 1.0).is_err());

        // Walk α until the two sides coincide bitwise; equality counts.
        let (p, growth, rate, t, tau, c) = (1.0, 1e-3, 0.2, 30.0, 1.0, 0.5);
        let (_, rhs) = transfer_condition_sides(c, 0.0, p, growth, rate, t, tau).unwrap();
        let second = 2.0 * growth * (-rate * (t - 2.0 * tau)).exp();
        let mut alpha = (rhs - second) / (2.0 * c);
        let mut found = false;
        for _ in 0..64 {
            let (lhs, rhs) = transfer_condition_sides(c, alpha, p, growth, rate, t, tau).unwrap();
            if lhs == rhs {
                found = true;
                break;
            }
            alpha = if lhs < rhs { alpha.next_up() } else { alpha.next_down() };
        }
        assert!(found);
        assert!(check_transfer_condition(c, alpha, p, growth, rate, t, tau).unwrap());
        assert!(!check_transfer_condition(c, alpha.next_up().next_up().next_up(), p, growth, rate, t, tau).unwrap());
    }

    #[test]
    fn strong_error_of_reference_is_zero() {
        let e = model::lookup(model::PAPER_EXAMPLE_2D, &ProblemParams::new()).unwrap();
        let policy = TruncationPolicy::with_minimal_cap(e.known_constants.unwrap().h3, 4.0, 0.25).unwrap();
        let r = strong_error(&e.problem, SchemeVariant::Truncated(policy), &[1.0 / 64.0], 64, 2.0, 10, 1.0, 1).unwrap();
        assert_eq!(r.errors, vec![0.0]);
        assert!(r.fitted_order.is_none());
    }

    #[test]
    fn strong_error_rejects_incompatible_grids() {
        let e = model::lookup(model::PAPER_EXAMPLE_2D, &ProblemParams::new()).unwrap();
        let policy = TruncationPolicy::with_minimal_cap(e.known_constants.unwrap().h3, 4.0, 0.25).unwrap();
        let v = SchemeVariant::Truncated(policy);
        assert!(strong_error(&e.problem, v, &[1.0 / 48.0], 64, 2.0, 2, 1.0, 1).is_err());
        assert!(strong_error(&e.problem, v, &[0.3], 64, 2.0, 2, 1.0, 1).is_err());
        assert!(strong_error(&e.problem, v, &[1.0 / 8.0], 64, 1.5, 2, 1.0, 1).is_err());
        assert!(strong_error(&e.problem, v, &[1.0 / 8.0, 1.0 / 8.0], 64, 2.0, 2, 1.0, 1).is_err());
    }

    /// Deterministic Euler on `x' = a x`: error ∝ Δ, so the strong order is 1.
    #[test]
    fn drift_only_linear_has_order_one() {
        let e = model::linear_scalar(-1.0, 0.0, 0.0, 0.0, 1.0, InitialSegment::constant(vec![1.0]).unwrap()).unwrap();
        let policy = TruncationPolicy::new(1.0, 2.0, 1e3, 0.25).unwrap();
        let deltas = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
        let r = strong_error(&e.problem, SchemeVariant::Truncated(policy), &deltas, 4096, 2.0, 2, 2.0, 0).unwrap();
        let order = r.fitted_order.unwrap();
        assert!((0.9..=1.1).contains(&order), "order {order}");
        assert!(r.errors_strictly_decreasing());
    }

    #[test]
    fn decay_rate_of_deterministic_linear_problem() {
        // x' = -2x: E|x|² = e^{-4t} x₀²; the Euler iterate gives rate
        // -2 ln(1 - 2Δ)/Δ ≈ 4.004 at Δ = 2⁻¹⁰.
        let e = model::linear_scalar(-2.0, 0.0, 0.0, 0.0, 1.0, InitialSegment::constant(vec![1.0]).unwrap()).unwrap();
        let policy = TruncationPolicy::new(2.0, 2.0, 2.0, 0.25).unwrap();
        let run = SchemeRun::truncated(e.problem, policy, 1024, 4.0).unwrap();
        let fam = LatticeFamily::new(0, 1.0 / 1024.0, 1).unwrap();
        let s = simulate_moments(&run, &fam, 10_000, 2.0, 16, DEFAULT_BATCHES).unwrap();
        let fit = fit_decay(&s, None).unwrap();
        assert!((fit.lambda_hat - 4.0).abs() < 0.3, "{}", fit.lambda_hat);
    }

    #[test]
    fn zero_initial_data_is_degenerate() {
        let e = model::linear_scalar(-2.0, 0.25, 0.0, 0.25, 1.0, InitialSegment::constant(vec![0.0]).unwrap()).unwrap();
        let policy = TruncationPolicy::with_minimal_cap(e.known_constants.unwrap().h3, 2.0, 0.25).unwrap();
        let r = equivalence_experiment(&e.problem, &policy, 2.0, 4, 4.0, 50, 1, EquivalenceOptions::default()).unwrap();
        assert!(r.degenerate);
        assert!(r.fit_delta.is_none() && r.transfer.is_none());
    }

    #[test]
    fn interpolation_gap_is_zero_without_noise_and_drift() {
        let e = model::linear_scalar(0.0, 0.0, 0.0, 0.0, 1.0, InitialSegment::constant(vec![1.0]).unwrap()).unwrap();
        let run = SchemeRun::classical(e.problem, 4, 1.0).unwrap();
        let g = interpolation_gap(&run, 4, 2.0, 3, 0).unwrap();
        assert_eq!(g.max_mean_gap, 0.0);
        assert_eq!(g.times.len(), 12);
    }

    #[test]
    fn interpolation_gap_matches_interpolant() {
        let e = model::lookup(model::PAPER_EXAMPLE_2D, &ProblemParams::new()).unwrap();
        let policy = TruncationPolicy::with_minimal_cap(e.known_constants.unwrap().h3, 4.0, 0.25).unwrap();
        let run = SchemeRun::truncated(e.problem, policy, 4, 1.0).unwrap();
        let g = interpolation_gap(&run, 4, 2.0, 1, 17).unwrap();
        let fam = LatticeFamily::new(17, run.delta() / 4.0, 1).unwrap();
        let ens = crate::scheme::simulate(&run, &fam, 1).unwrap();
        for (t, gap) in g.times.iter().zip(&g.mean_gap) {
            let x = ens.interpolant_value(0, *t).unwrap();
            let xb = ens.step_process_value(0, *t).unwrap();
            let d = euclidean_norm(&[x[0] - xb[0], x[1] - xb[1]]).powi(2);
            assert!((d - gap).abs() <= 1e-12 * d.max(1e-300), "t = {t}: {d} vs {gap}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decay_rate_is_scale_equivariant(rate in -3.0..3.0f64, c in 1e-6..1e6f64, noise in prop::collection::vec(-0.1..0.1f64, 12)) {
            let times: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
            let values: Vec<f64> = times.iter().zip(&noise).map(|(t, e)| (-rate * t + e).exp()).collect();
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            let a = fit_decay(&series(times.clone(), values), Some([0.0, 6.0])).unwrap();
            let b = fit_decay(&series(times, scaled), Some([0.0, 6.0])).unwrap();
            prop_assert!((a.lambda_hat - b.lambda_hat).abs() <= 1e-12 * (1.0 + a.lambda_hat.abs()));
            prop_assert!((b.log_m_hat - a.log_m_hat - c.ln()).abs() <= 1e-10);
        }

        #[test]
        fn moment_of_split_ensemble_is_weighted_mean(split in 1usize..29, seed in any::<u64>()) {
            let e = model::linear_scalar(-1.0, 0.3, 0.4, 0.2, 1.0, InitialSegment::constant(vec![1.0]).unwrap()).unwrap();
            let run = SchemeRun::classical(e.problem, 4, 1.0).unwrap();
            let fam = LatticeFamily::new(seed, 0.25, 1).unwrap();
            let ens = crate::scheme::simulate(&run, &fam, 30).unwrap();
            let times = [0.0, 0.5, 1.0];
            let all = estimate_moment(&ens, 2.0, &times).unwrap();
            let head = estimate_moment(&ens.select_paths(0..split).unwrap(), 2.0, &times).unwrap();
            let tail = estimate_moment(&ens.select_paths(split..30).unwrap(), 2.0, &times).unwrap();
            for i in 0..3 {
                let w = (split as f64 * head.values[i] + (30 - split) as f64 * tail.values[i]) / 30.0;
                prop_assert!((all.values[i] - w).abs() <= 1e-12 * w.abs().max(1e-300));
            }
        }
    }
}
