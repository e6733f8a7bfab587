//! Sampling-based falsification of the structural conditions on a problem,
//! with estimates of their constants.
//!
//! A checker reports either that the samples are *consistent with* a finite
//! constant (the largest ratio seen) or that the defining ratio grows without
//! bound along radial probes. Sampling can refute a condition but never
//! prove it.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SddeError};
use crate::model::{euclidean_norm, InitialSegment, PairPotential, SddeProblem};
use crate::noise::keyed_rng;

/// How the sample points are drawn. Sample `i` depends only on
/// `(seed, i)`, so a larger sample set extends a smaller one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleSpec {
    pub n_samples: usize,
    pub seed: u64,
    /// Radius of the uniform-in-ball part of the mixture.
    pub uniform_radius: f64,
    /// Largest norm reached by log-radial samples and probes.
    pub probe_max_norm: f64,
    /// Number of random directions probed radially.
    pub probe_directions: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seed: 0,
            uniform_radius: 10.0,
            probe_max_norm: 1e6,
            probe_directions: 8,
        }
    }
}

impl SampleSpec {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(SddeError::arg("need at least one sample"));
        }
        if !(self.uniform_radius > 0.0 && self.uniform_radius.is_finite()) {
            return Err(SddeError::arg("uniform sampling radius must be positive"));
        }
        if !(self.probe_max_norm >= 100.0 && self.probe_max_norm.is_finite()) {
            return Err(SddeError::arg("probe norm must be at least 100"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    LocalLipschitz,
    Khasminskii,
    MonotonicityU,
    PolynomialGrowth,
    HolderInitial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub assumption: Assumption,
    /// Largest defining ratio over samples and probes.
    pub estimated_constant: f64,
    /// `√(6Ĥ₂) + |f(0,0)| + |g(0,0)|`, for the growth check only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derived_h3: Option<f64>,
    pub samples: usize,
    /// Input tuple, concatenated, at which the largest ratio occurred.
    pub max_violation_point: Option<Vec<f64>>,
    pub verdict: Verdict,
    pub note: String,
}

const DOMAIN: &[u8] = b"sdde-conditions-v1";
const PROBE_DOMAIN: &[u8] = b"sdde-conditions-probe-v1";

fn direction(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = euclidean_norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|c| c / norm).collect();
        }
    }
}

fn uniform_ball(rng: &mut ChaCha12Rng, d: usize, radius: f64) -> Vec<f64> {
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    direction(rng, d).into_iter().map(|c| c * r).collect()
}

fn log_radial(rng: &mut ChaCha12Rng, d: usize, max_norm: f64) -> Vec<f64> {
    let r = max_norm.powf(rng.random::<f64>());
    direction(rng, d).into_iter().map(|c| c * r).collect()
}

/// Where samples may lie.
#[derive(Debug, Clone, Copy)]
enum Region {
    /// Every block inside the ball of this radius.
    Ball(f64),
    Global { uniform_radius: f64, max_norm: f64 },
}

/// A point `(x, y)` of two blocks of length `n`.
fn draw_pair(rng: &mut ChaCha12Rng, i: usize, n: usize, region: Region) -> Vec<f64> {
    let base = |rng: &mut ChaCha12Rng, d: usize, alt: bool| match region {
        Region::Ball(r) => uniform_ball(rng, d, r),
        Region::Global { uniform_radius, max_norm } => {
            if alt {
                log_radial(rng, d, max_norm)
            } else {
                uniform_ball(rng, d, uniform_radius)
            }
        }
    };
    let alt = (i / 4) % 2 == 1;
    match i % 4 {
        0 => base(rng, 2 * n, false),
        1 => base(rng, 2 * n, true),
        // One block only: growth in x and in y separately.
        2 => {
            let mut v = base(rng, n, alt);
            v.resize(2 * n, 0.0);
            v
        }
        _ => {
            let mut v = vec![0.0; n];
            v.extend(base(rng, n, alt));
            v
        }
    }
}

/// A quadruple `(x, y, x̄, ȳ)` of four blocks of length `n`.
fn draw_quadruple(rng: &mut ChaCha12Rng, i: usize, n: usize, region: Region) -> Vec<f64> {
    let alt = (i / 4) % 2 == 1;
    let point = |rng: &mut ChaCha12Rng, radial: bool| -> Vec<f64> {
        match region {
            Region::Ball(r) => [uniform_ball(rng, n, r), uniform_ball(rng, n, r)].concat(),
            Region::Global { uniform_radius, max_norm } => {
                if radial {
                    log_radial(rng, 2 * n, max_norm)
                } else {
                    [uniform_ball(rng, n, uniform_radius), uniform_ball(rng, n, uniform_radius)].concat()
                }
            }
        }
    };
    match i % 4 {
        0 => [point(rng, false), point(rng, false)].concat(),
        1 => [point(rng, true), point(rng, true)].concat(),
        // Nearby pairs differing in one block: local behaviour of the ratios.
        kind => {
            let first = point(rng, alt);
            let block = if kind == 2 { 0 } else { 1 };
            let scale = euclidean_norm(&first[block * n..(block + 1) * n]).max(1.0);
            let step = 10f64.powf(-1.0 - 5.0 * rng.random::<f64>()) * scale;
            let mut second = first.clone();
            let dir = direction(rng, n);
            let target = &mut second[block * n..(block + 1) * n];
            for (t, d) in target.iter_mut().zip(&dir) {
                *t += step * d;
            }
            if let Region::Ball(r) = region {
                let norm = euclidean_norm(target);
                if norm > r {
                    target.iter_mut().for_each(|t| *t *= r / norm);
                }
            }
            [first, second].concat()
        }
    }
}

/// Ratio evaluated at a concatenated sample; `None` skips the sample.
type RatioFn<'a> = dyn Fn(&[f64]) -> Result<Option<f64>> + Sync + 'a;

struct Scan {
    max: f64,
    argmax: Option<Vec<f64>>,
    counted: usize,
}

/// Evaluates all samples (in parallel) and takes the first maximum in index
/// order.
fn scan(spec: &SampleSpec, draw: impl Fn(&mut ChaCha12Rng, usize) -> Vec<f64> + Sync, ratio: &RatioFn) -> Result<Scan> {
    let results: Vec<Result<(Vec<f64>, Option<f64>)>> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(DOMAIN, spec.seed, i as u64);
            let z = draw(&mut rng, i);
            let r = ratio(&z)?;
            Ok((z, r))
        })
        .collect();
    let mut out = Scan {
        max: f64::NEG_INFINITY,
        argmax: None,
        counted: 0,
    };
    for res in results {
        let (z, r) = res?;
        if let Some(r) = r {
            out.counted += 1;
            if r > out.max {
                out.max = r;
                out.argmax = Some(z);
            }
        }
    }
    Ok(out)
}

/// Largest ratio along `probe_directions` rays at norms `10^{k/2}`, and the
/// direction on which the ratio grew by more than 2× over the last two
/// decades, if any.
struct ProbeResult {
    max: f64,
    argmax: Option<Vec<f64>>,
    growth: Option<(f64, f64)>,
    evaluated: usize,
}

fn probe(spec: &SampleSpec, d: usize, ratio: &RatioFn) -> Result<ProbeResult> {
    let decades = spec.probe_max_norm.log10();
    let n_norms = (2.0 * decades).floor() as usize;
    let mut out = ProbeResult {
        max: f64::NEG_INFINITY,
        argmax: None,
        growth: None,
        evaluated: 0,
    };
    for j in 0..spec.probe_directions {
        let mut rng = keyed_rng(PROBE_DOMAIN, spec.seed, j as u64);
        let dir = direction(&mut rng, d);
        let mut ladder = Vec::with_capacity(n_norms + 1);
        for k in 0..=n_norms {
            let r = if k == n_norms { spec.probe_max_norm } else { 10f64.powf(k as f64 / 2.0) };
            let z: Vec<f64> = dir.iter().map(|c| c * r).collect();
            let value = ratio(&z)?;
            if let Some(v) = value {
                out.evaluated += 1;
                if v > out.max {
                    out.max = v;
                    out.argmax = Some(z);
                }
            }
            ladder.push(value);
        }
        // Compare the ratio two decades below the largest norm with the top.
        let (Some(Some(top)), Some(Some(lower))) = (ladder.last(), ladder.get(n_norms.saturating_sub(4))) else {
            continue;
        };
        if *top > 0.0 && *top > 2.0 * lower.max(0.0) && out.growth.is_none() {
            out.growth = Some((*lower, *top));
        }
    }
    Ok(out)
}

fn report(assumption: Assumption, spec: &SampleSpec, sampled: Scan, probed: Option<ProbeResult>, what: &str) -> ConditionReport {
    let (mut max, mut argmax, mut counted) = (sampled.max, sampled.argmax, sampled.counted);
    let mut growth = None;
    if let Some(p) = probed {
        counted += p.evaluated;
        if p.max > max {
            max = p.max;
            argmax = p.argmax;
        }
        growth = p.growth;
    }
    if counted == 0 {
        max = 0.0;
    }
    let (verdict, note) = match growth {
        Some((lower, top)) => (
            Verdict::Violated,
            format!(
                "violated: {what} grows from {lower:e} to {top:e} over the last two decades of radial probes up to norm {:e}; no finite constant fits",
                spec.probe_max_norm
            ),
        ),
        None => (
            Verdict::Consistent,
            format!("consistent with constant {max:e} for {what} on {counted} samples; sampling cannot prove the bound"),
        ),
    };
    ConditionReport {
        assumption,
        estimated_constant: max,
        derived_h3: None,
        samples: counted,
        max_violation_point: argmax,
        verdict,
        note,
    }
}

fn global(spec: &SampleSpec) -> Region {
    Region::Global {
        uniform_radius: spec.uniform_radius,
        max_norm: spec.probe_max_norm,
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum()
}

fn diff_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `K̂₁ = max [xᵀf + ((p-1)/2)|g|²] / (1 + |x|² + |y|²)`.
pub fn check_khasminskii(problem: &SddeProblem, p: f64, spec: &SampleSpec) -> Result<ConditionReport> {
    if !(p > 2.0 && p.is_finite()) {
        return Err(SddeError::arg(format!("moment exponent p must exceed 2, got {p}")));
    }
    spec.validate()?;
    let n = problem.dim();
    let ratio = |z: &[f64]| -> Result<Option<f64>> {
        let (x, y) = z.split_at(n);
        let f = problem.eval_drift(x, y)?;
        let g = problem.eval_diffusion(x, y)?;
        let xf: f64 = x.iter().zip(&f).map(|(a, b)| a * b).sum();
        Ok(Some((xf + 0.5 * (p - 1.0) * sq(&g)) / (1.0 + sq(x) + sq(y))))
    };
    let region = global(spec);
    let sampled = scan(spec, |rng, i| draw_pair(rng, i, n, region), &ratio)?;
    let probed = probe(spec, 2 * n, &ratio)?;
    Ok(report(Assumption::Khasminskii, spec, sampled, Some(probed), "xᵀf + (p-1)/2·|g|² over 1 + |x|² + |y|²"))
}

/// `Ĥ₂ = max (|f-f̄|² ∨ |g-ḡ|²) / [(1 + |x|^ρ + |y|^ρ + |x̄|^ρ + |ȳ|^ρ)(|x-x̄|² + |y-ȳ|²)]`,
/// plus the derived growth constant `Ĥ₃`.
pub fn check_polynomial_growth(problem: &SddeProblem, rho: f64, spec: &SampleSpec) -> Result<ConditionReport> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(SddeError::arg(format!("growth exponent rho must be positive, got {rho}")));
    }
    spec.validate()?;
    let n = problem.dim();
    let ratio = |z: &[f64]| -> Result<Option<f64>> {
        let (xy, xyb) = z.split_at(2 * n);
        let dist = diff_sq(xy, xyb);
        if dist == 0.0 {
            return Ok(None);
        }
        let (x, y) = xy.split_at(n);
        let (xb, yb) = xyb.split_at(n);
        let df = diff_sq(&problem.eval_drift(x, y)?, &problem.eval_drift(xb, yb)?);
        let dg = diff_sq(&problem.eval_diffusion(x, y)?, &problem.eval_diffusion(xb, yb)?);
        let weight = 1.0 + [x, y, xb, yb].iter().map(|v| euclidean_norm(v).powf(rho)).sum::<f64>();
        Ok(Some(df.max(dg) / (weight * dist)))
    };
    let region = global(spec);
    let sampled = scan(spec, |rng, i| draw_quadruple(rng, i, n, region), &ratio)?;
    let probed = probe(spec, 4 * n, &ratio)?;
    let mut rep = report(
        Assumption::PolynomialGrowth,
        spec,
        sampled,
        Some(probed),
        "(|f-f̄|² ∨ |g-ḡ|²) over (1 + Σ|·|^ρ)(|x-x̄|² + |y-ȳ|²)",
    );
    let zero = vec![0.0; n];
    let f0 = euclidean_norm(&problem.eval_drift(&zero, &zero)?);
    let g0 = euclidean_norm(&problem.eval_diffusion(&zero, &zero)?);
    rep.derived_h3 = Some((6.0 * rep.estimated_constant.max(0.0)).sqrt() + f0 + g0);
    Ok(rep)
}

/// `K̂_R = max (|f-f̄| ∨ |g-ḡ|) / (|x-x̄| + |y-ȳ|)` over points in the ball of
/// radius `R`.
pub fn check_local_lipschitz(problem: &SddeProblem, radius: f64, spec: &SampleSpec) -> Result<ConditionReport> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SddeError::arg(format!("radius must be positive, got {radius}")));
    }
    spec.validate()?;
    let n = problem.dim();
    let ratio = |z: &[f64]| -> Result<Option<f64>> {
        let (xy, xyb) = z.split_at(2 * n);
        let (x, y) = xy.split_at(n);
        let (xb, yb) = xyb.split_at(n);
        let dist = diff_sq(x, xb).sqrt() + diff_sq(y, yb).sqrt();
        if dist == 0.0 {
            return Ok(None);
        }
        let df = diff_sq(&problem.eval_drift(x, y)?, &problem.eval_drift(xb, yb)?).sqrt();
        let dg = diff_sq(&problem.eval_diffusion(x, y)?, &problem.eval_diffusion(xb, yb)?).sqrt();
        Ok(Some(df.max(dg) / dist))
    };
    let sampled = scan(spec, |rng, i| draw_quadruple(rng, i, n, Region::Ball(radius)), &ratio)?;
    Ok(report(
        Assumption::LocalLipschitz,
        spec,
        sampled,
        None,
        &format!("(|f-f̄| ∨ |g-ḡ|) over (|x-x̄| + |y-ȳ|) in the ball of radius {radius}"),
    ))
}

/// `K̂₂ = max |ξ(u) - ξ(v)| / |u-v|^γ` over `u, v ∈ [-τ, 0]`, with the
/// endpoint pair as sample 0 and probes towards `|u-v| → 0`.
pub fn check_holder_initial(segment: &InitialSegment, tau: f64, spec: &SampleSpec) -> Result<ConditionReport> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SddeError::arg(format!("tau must be positive, got {tau}")));
    }
    spec.validate()?;
    let gamma = segment.holder_exponent();
    let ratio = |z: &[f64]| -> Result<Option<f64>> {
        let (u, v) = (z[0], z[1]);
        if u == v {
            return Ok(None);
        }
        let d = diff_sq(&segment.value(u), &segment.value(v)).sqrt();
        Ok(Some(d / (u - v).abs().powf(gamma)))
    };
    let sampled = scan(
        spec,
        |rng, i| {
            if i == 0 {
                vec![-tau, 0.0]
            } else {
                vec![-tau * rng.random::<f64>(), -tau * rng.random::<f64>()]
            }
        },
        &ratio,
    )?;
    // Shrinking pairs at both ends and the middle of the interval. They only
    // detect divergence: at tiny separations cancellation in ξ(u) - ξ(v)
    // would distort the constant.
    let mut growth = None;
    for anchor in [-tau, -0.5 * tau, 0.0] {
        let mut ladder = Vec::new();
        for k in 0..=8 {
            let h = tau * 10f64.powi(-k);
            let other = if anchor == 0.0 { -h } else { anchor + h };
            ladder.push(ratio(&[anchor, other])?.unwrap_or(0.0));
        }
        let (lower, top) = (ladder[6], ladder[8]);
        if growth.is_none() && top > 0.0 && top > 2.0 * lower.max(0.0) && top > 1e-12 {
            growth = Some((lower, top));
        }
    }
    let mut rep = report(Assumption::HolderInitial, spec, sampled, None, &format!("|ξ(u)-ξ(v)| over |u-v|^{gamma}"));
    if let Some((lower, top)) = growth {
        rep.verdict = Verdict::Violated;
        rep.note = format!(
            "violated: |ξ(u)-ξ(v)| over |u-v|^{gamma} grows from {lower:e} to {top:e} as |u-v| shrinks from {:e} to {:e}",
            tau * 1e-6,
            tau * 1e-8
        );
    } else {
        let declared = segment.holder_constant();
        if rep.estimated_constant > declared * (1.0 + 1e-9) + 1e-12 {
            rep.note.push_str(&format!("; exceeds the declared constant {declared}"));
        }
    }
    Ok(rep)
}

/// `Ĥ₁ = max [(x-x̄)ᵀ(f-f̄) + ((q-1)/2)|g-ḡ|² + U(x,x̄) - U(y,ȳ)] / (|x-x̄|² + |y-ȳ|²)`.
pub fn check_monotonicity_u(
    problem: &SddeProblem,
    q: f64,
    potential: Option<&PairPotential>,
    spec: &SampleSpec,
) -> Result<ConditionReport> {
    if !(q > 2.0 && q.is_finite()) {
        return Err(SddeError::arg(format!("exponent q must exceed 2, got {q}")));
    }
    let potential = potential.ok_or_else(|| {
        SddeError::arg(format!(
            "problem '{}' has no registered potential U; supply one to check monotonicity",
            problem.name()
        ))
    })?;
    spec.validate()?;
    let n = problem.dim();
    let ratio = |z: &[f64]| -> Result<Option<f64>> {
        let (xy, xyb) = z.split_at(2 * n);
        let dist = diff_sq(xy, xyb);
        if dist == 0.0 {
            return Ok(None);
        }
        let (x, y) = xy.split_at(n);
        let (xb, yb) = xyb.split_at(n);
        let f = problem.eval_drift(x, y)?;
        let fb = problem.eval_drift(xb, yb)?;
        let inner: f64 = x.iter().zip(xb).zip(f.iter().zip(&fb)).map(|((a, b), (c, d))| (a - b) * (c - d)).sum();
        let dg = diff_sq(&problem.eval_diffusion(x, y)?, &problem.eval_diffusion(xb, yb)?);
        let lhs = inner + 0.5 * (q - 1.0) * dg + potential(x, xb) - potential(y, yb);
        Ok(Some(lhs / dist))
    };
    let region = global(spec);
    let sampled = scan(spec, |rng, i| draw_quadruple(rng, i, n, region), &ratio)?;
    let probed = probe(spec, 4 * n, &ratio)?;
    Ok(report(
        Assumption::MonotonicityU,
        spec,
        sampled,
        Some(probed),
        "monotonicity ratio with U over |x-x̄|² + |y-ȳ|²",
    ))
}

/// Estimates `H₃` in `|f| ∨ |g| ≤ H₃ (|x| ∨ |y|)^{(2+ρ)/2}` by sampling
/// norms in `[1, 10³]`, inflated by 2×.
pub fn estimate_growth_constant(problem: &SddeProblem, rho: f64, spec: &SampleSpec) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(SddeError::arg(format!("growth exponent rho must be positive, got {rho}")));
    }
    spec.validate()?;
    let n = problem.dim();
    let ratio = |z: &[f64]| -> Result<Option<f64>> {
        let (x, y) = z.split_at(n);
        let r = euclidean_norm(x).max(euclidean_norm(y));
        if r < 1.0 {
            return Ok(None);
        }
        let f = euclidean_norm(&problem.eval_drift(x, y)?);
        let g = euclidean_norm(&problem.eval_diffusion(x, y)?);
        Ok(Some(f.max(g) / r.powf(0.5 * (2.0 + rho))))
    };
    let sampled = scan(
        spec,
        |rng, i| {
            let r = 1e3f64.powf(rng.random::<f64>());
            let mut z = direction(rng, 2 * n);
            match i % 3 {
                1 => z[n..].fill(0.0),
                2 => z[..n].fill(0.0),
                _ => {}
            }
            // Rescale so that |x| ∨ |y| = r.
            let (x, y) = z.split_at(n);
            let m = euclidean_norm(x).max(euclidean_norm(y));
            z.iter().map(|c| c * r / m).collect()
        },
        &ratio,
    )?;
    Ok(2.0 * sampled.max.max(0.0))
}
