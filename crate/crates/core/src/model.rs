//! Stochastic delay equations `dy = f(y(t), y(t-τ)) dt + g(y(t), y(t-τ)) dW(t)`
//! and the registry of builtin test problems.
//!
//! Coefficients are supplied as pure closures writing into caller-owned
//! buffers. The diffusion is an `n × m` matrix stored row-major, so entry
//! `(i, j)` lives at `i * m + j`. Matrix norms are Frobenius (trace) norms.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SddeError};

/// `f(x, y, out)` or `g(x, y, out)`; must be pure.
pub type CoefficientFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// `ξ(u, out)` for `u ∈ [-τ, 0]`.
pub type SegmentFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// A nonnegative pair potential `U(x, x̄)` used by the monotonicity condition.
pub type PairPotential = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Number of grid points used to spot-check a declared Hölder constant.
const HOLDER_SPOT_CHECK_POINTS: usize = 1000;
const HOLDER_SPOT_CHECK_TOLERANCE: f64 = 1e-9;

/// `|u|^e` computed as `exp(e·ln|u|)`, with `0 ↦ 0`.
#[inline]
pub fn abs_pow(u: f64, e: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        (e * u.abs().ln()).exp()
    }
}

#[inline]
pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Initial data `ξ` on `[-τ, 0]` together with its declared Hölder bound
/// `|ξ(u) - ξ(v)| ≤ K₂ |u - v|^γ`.
#[derive(Clone)]
pub struct InitialSegment {
    dim: usize,
    values: SegmentFn,
    holder_exponent: f64,
    holder_constant: f64,
}

impl InitialSegment {
    pub fn from_fn(
        dim: usize,
        values: SegmentFn,
        holder_exponent: f64,
        holder_constant: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(SddeError::arg("initial segment dimension must be positive"));
        }
        if !(holder_exponent > 0.0 && holder_exponent <= 1.0) {
            return Err(SddeError::arg(format!(
                "Hölder exponent must lie in (0, 1], got {holder_exponent}"
            )));
        }
        if !(holder_constant >= 0.0 && holder_constant.is_finite()) {
            return Err(SddeError::arg(format!(
                "Hölder constant must be finite and nonnegative, got {holder_constant}"
            )));
        }
        Ok(Self {
            dim,
            values,
            holder_exponent,
            holder_constant,
        })
    }

    /// `ξ ≡ c`.
    pub fn constant(c: Vec<f64>) -> Result<Self> {
        let dim = c.len();
        Self::from_fn(
            dim,
            Arc::new(move |_, out: &mut [f64]| out.copy_from_slice(&c)),
            1.0,
            0.0,
        )
    }

    /// `ξ(u) = base + u·slope`, Lipschitz with constant `|slope|`.
    pub fn affine(base: Vec<f64>, slope: Vec<f64>) -> Result<Self> {
        if base.len() != slope.len() {
            return Err(SddeError::arg("affine segment: base and slope lengths differ"));
        }
        let dim = base.len();
        let k2 = euclidean_norm(&slope);
        Self::from_fn(
            dim,
            Arc::new(move |u, out: &mut [f64]| {
                for ((o, b), s) in out.iter_mut().zip(&base).zip(&slope) {
                    *o = b + u * s;
                }
            }),
            1.0,
            k2,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn holder_exponent(&self) -> f64 {
        self.holder_exponent
    }

    pub fn holder_constant(&self) -> f64 {
        self.holder_constant
    }

    /// Evaluates without the domain check; callers guarantee `u ∈ [-τ, 0]`.
    pub fn value_into(&self, u: f64, out: &mut [f64]) {
        (self.values)(u, out)
    }

    pub fn value(&self, u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.value_into(u, &mut out);
        out
    }

    /// `sup |ξ(u)|` over `points + 1` equally spaced nodes of `[-τ, 0]`.
    pub fn sup_norm(&self, tau: f64, points: usize) -> f64 {
        let points = points.max(1);
        let mut buf = vec![0.0; self.dim];
        (0..=points)
            .map(|i| {
                let u = -tau + tau * i as f64 / points as f64;
                self.value_into(u, &mut buf);
                euclidean_norm(&buf)
            })
            .fold(0.0, f64::max)
    }

    /// Largest sampled Hölder quotient on an equally spaced grid, with the
    /// pair achieving it.
    pub(crate) fn grid_holder_quotient(&self, tau: f64, points: usize) -> (f64, Option<(f64, f64)>) {
        let nodes: Vec<(f64, Vec<f64>)> = (0..points)
            .map(|i| {
                let u = -tau + tau * i as f64 / (points - 1) as f64;
                (u, self.value(u))
            })
            .collect();
        let mut best = (0.0, None);
        for (i, (u, xu)) in nodes.iter().enumerate() {
            for (v, xv) in &nodes[i + 1..] {
                let dist: f64 = xu.iter().zip(xv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let q = dist / (v - u).abs().powf(self.holder_exponent);
                if q > best.0 {
                    best = (q, Some((*u, *v)));
                }
            }
        }
        best
    }
}

impl fmt::Debug for InitialSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialSegment")
            .field("dim", &self.dim)
            .field("holder_exponent", &self.holder_exponent)
            .field("holder_constant", &self.holder_constant)
            .finish_non_exhaustive()
    }
}

/// An autonomous SDDE with a single constant delay.
#[derive(Clone)]
pub struct SddeProblem {
    name: String,
    dim: usize,
    noise_dim: usize,
    tau: f64,
    drift: CoefficientFn,
    diffusion: CoefficientFn,
    initial: InitialSegment,
    origin_fixed: bool,
}

impl fmt::Debug for SddeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SddeProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("tau", &self.tau)
            .field("origin_fixed", &self.origin_fixed)
            .field("initial", &self.initial)
            .finish_non_exhaustive()
    }
}

impl SddeProblem {
    /// Validates dimensions and the delay. When `origin_fixed` is set the
    /// coefficients are evaluated at the origin and must vanish exactly.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        tau: f64,
        drift: CoefficientFn,
        diffusion: CoefficientFn,
        initial: InitialSegment,
        origin_fixed: bool,
    ) -> Result<Self> {
        let name = name.into();
        if dim == 0 || noise_dim == 0 {
            return Err(SddeError::arg("state and noise dimensions must be positive"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(SddeError::arg(format!("delay must be positive and finite, got {tau}")));
        }
        if initial.dim() != dim {
            return Err(SddeError::arg(format!(
                "initial segment has dimension {}, problem has {dim}",
                initial.dim()
            )));
        }
        let problem = Self {
            name,
            dim,
            noise_dim,
            tau,
            drift,
            diffusion,
            initial,
            origin_fixed,
        };
        if origin_fixed {
            let zero = vec![0.0; dim];
            let f0 = problem.eval_drift(&zero, &zero)?;
            let g0 = problem.eval_diffusion(&zero, &zero)?;
            if f0.iter().chain(&g0).any(|c| *c != 0.0) {
                return Err(SddeError::arg(format!(
                    "problem '{}' declares f(0,0) = g(0,0) = 0 but f(0,0) = {f0:?}, g(0,0) = {g0:?}",
                    problem.name
                )));
            }
        }
        problem.spot_check_holder();
        Ok(problem)
    }

    fn spot_check_holder(&self) {
        let (observed, pair) = self
            .initial
            .grid_holder_quotient(self.tau, HOLDER_SPOT_CHECK_POINTS);
        let declared = self.initial.holder_constant();
        if observed > declared * (1.0 + HOLDER_SPOT_CHECK_TOLERANCE) + HOLDER_SPOT_CHECK_TOLERANCE {
            log::warn!(
                "problem '{}': initial segment Hölder quotient {observed} at {pair:?} exceeds declared K2 = {declared}",
                self.name
            );
        }
        let sup = self.initial.sup_norm(self.tau, HOLDER_SPOT_CHECK_POINTS);
        if !sup.is_finite() {
            log::warn!("problem '{}': initial segment is not finite on [-tau, 0]", self.name);
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn origin_fixed(&self) -> bool {
        self.origin_fixed
    }

    pub fn initial(&self) -> &InitialSegment {
        &self.initial
    }

    /// Returns a copy of this problem driven by different initial data.
    pub fn with_initial(&self, initial: InitialSegment) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.dim,
            self.noise_dim,
            self.tau,
            self.drift.clone(),
            self.diffusion.clone(),
            initial,
            self.origin_fixed,
        )
    }

    fn check_args(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.dim || y.len() != self.dim {
            return Err(SddeError::arg(format!(
                "expected state vectors of length {}, got {} and {}",
                self.dim,
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    /// Hot-path drift evaluation; `out` must have length `dim`.
    pub fn drift_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.drift)(x, y, out);
        if out.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(SddeError::NumericRange {
                context: "drift",
                x: x.to_vec(),
                y: y.to_vec(),
            })
        }
    }

    /// Hot-path diffusion evaluation; `out` must have length `dim * noise_dim`.
    pub fn diffusion_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.diffusion)(x, y, out);
        if out.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(SddeError::NumericRange {
                context: "diffusion",
                x: x.to_vec(),
                y: y.to_vec(),
            })
        }
    }

    pub fn eval_drift(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_args(x, y)?;
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, y, &mut out)?;
        Ok(out)
    }

    /// Row-major `dim × noise_dim` matrix `g(x, y)`.
    pub fn eval_diffusion(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_args(x, y)?;
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.diffusion_into(x, y, &mut out)?;
        Ok(out)
    }

    pub fn eval_initial(&self, u: f64) -> Result<Vec<f64>> {
        if !(u >= -self.tau && u <= 0.0) {
            return Err(SddeError::arg(format!(
                "initial segment is defined on [{}, 0], got u = {u}",
                -self.tau
            )));
        }
        Ok(self.initial.value(u))
    }
}

/// Constants under which a registry problem is known to satisfy the
/// coefficient conditions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KnownConstants {
    /// Polynomial growth exponent of the coefficient increments.
    pub rho: f64,
    /// Growth constant of `μ(u) = H₃ u^{(2+ρ)/2}`.
    pub h3: f64,
    /// Khasminskii moment exponent.
    pub p: f64,
    /// Monotonicity exponent.
    pub q: f64,
}

#[derive(Clone)]
pub struct ProblemRegistryEntry {
    pub key: &'static str,
    pub problem: SddeProblem,
    pub known_constants: Option<KnownConstants>,
    /// `U(x, x̄)` for the monotonicity condition, when one is known.
    pub potential: Option<PairPotential>,
}

impl fmt::Debug for ProblemRegistryEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemRegistryEntry")
            .field("key", &self.key)
            .field("problem", &self.problem)
            .field("known_constants", &self.known_constants)
            .field("potential", &self.potential.is_some())
            .finish()
    }
}

pub const PAPER_EXAMPLE_2D: &str = "paper-example-2d";
pub const LINEAR_SCALAR: &str = "linear-scalar";
pub const SUPERLINEAR_BLOWUP: &str = "superlinear-blowup";

pub const REGISTRY_KEYS: [&str; 3] = [PAPER_EXAMPLE_2D, LINEAR_SCALAR, SUPERLINEAR_BLOWUP];

/// Scalar parameters addressable from experiment configs.
pub type ProblemParams = BTreeMap<String, f64>;

struct ParamReader<'a> {
    key: &'static str,
    params: &'a ProblemParams,
    allowed: &'static [&'static str],
}

impl ParamReader<'_> {
    fn check_unknown(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .params
            .keys()
            .map(String::as_str)
            .filter(|k| !self.allowed.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(SddeError::arg(format!(
                "problem '{}' does not accept parameter(s) {unknown:?}; allowed: {:?}",
                self.key, self.allowed
            )))
        }
    }

    fn get(&self, name: &str, default: f64) -> Result<f64> {
        let v = self.params.get(name).copied().unwrap_or(default);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(SddeError::arg(format!("parameter '{name}' must be finite")))
        }
    }
}

/// Builds a registry problem. Every problem accepts `tau`, `x0` and
/// `x0_slope`: the initial segment is `ξ(u) = x0 + u·x0_slope` in every
/// component. `linear-scalar` additionally takes `a`, `b`, `c`, `d`.
pub fn lookup(key: &str, params: &ProblemParams) -> Result<ProblemRegistryEntry> {
    match key {
        PAPER_EXAMPLE_2D => {
            let r = ParamReader {
                key: PAPER_EXAMPLE_2D,
                params,
                allowed: &["tau", "x0", "x0_slope"],
            };
            r.check_unknown()?;
            let tau = r.get("tau", 1.0)?;
            let x0 = r.get("x0", 1.0)?;
            let slope = r.get("x0_slope", 1.0 / tau)?;
            let initial = InitialSegment::affine(vec![x0; 2], vec![slope; 2])?;
            paper_example_2d(tau, initial)
        }
        LINEAR_SCALAR => {
            let r = ParamReader {
                key: LINEAR_SCALAR,
                params,
                allowed: &["tau", "x0", "x0_slope", "a", "b", "c", "d"],
            };
            r.check_unknown()?;
            let tau = r.get("tau", 1.0)?;
            let initial = InitialSegment::affine(vec![r.get("x0", 1.0)?], vec![r.get("x0_slope", 0.0)?])?;
            linear_scalar(
                r.get("a", -2.0)?,
                r.get("b", 0.0)?,
                r.get("c", 0.0)?,
                r.get("d", 0.0)?,
                tau,
                initial,
            )
        }
        SUPERLINEAR_BLOWUP => {
            let r = ParamReader {
                key: SUPERLINEAR_BLOWUP,
                params,
                allowed: &["tau", "x0", "x0_slope"],
            };
            r.check_unknown()?;
            let tau = r.get("tau", 1.0)?;
            let initial = InitialSegment::affine(vec![r.get("x0", 8.0)?], vec![r.get("x0_slope", 0.0)?])?;
            superlinear_blowup(tau, initial)
        }
        other => Err(SddeError::arg(format!(
            "unknown problem '{other}'; known problems: {REGISTRY_KEYS:?}"
        ))),
    }
}

/// All builtin problems with default parameters.
pub fn registry() -> Vec<ProblemRegistryEntry> {
    REGISTRY_KEYS
        .iter()
        .map(|k| lookup(k, &ProblemParams::new()).expect("builtin defaults are valid"))
        .collect()
}

/// The two-dimensional example driven by one scalar Brownian motion:
///
/// ```text
/// f(x, y) = (|y₂|^{4/3} - x₁³, |y₁|^{4/3} - x₂³)
/// g(x, y) = (|x₁|^{3/2} + y₂, |x₂|^{3/2} + y₁)ᵀ
/// ```
pub fn paper_example_2d(tau: f64, initial: InitialSegment) -> Result<ProblemRegistryEntry> {
    let drift: CoefficientFn = Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
        out[0] = abs_pow(y[1], 4.0 / 3.0) - x[0] * x[0] * x[0];
        out[1] = abs_pow(y[0], 4.0 / 3.0) - x[1] * x[1] * x[1];
    });
    let diffusion: CoefficientFn = Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
        out[0] = abs_pow(x[0], 1.5) + y[1];
        out[1] = abs_pow(x[1], 1.5) + y[0];
    });
    let potential: PairPotential = Arc::new(|x: &[f64], xb: &[f64]| {
        0.25 * x
            .iter()
            .zip(xb)
            .map(|(a, b)| (a - b) * (a - b) * (a * a + b * b))
            .sum::<f64>()
    });
    let problem = SddeProblem::new(PAPER_EXAMPLE_2D, 2, 1, tau, drift, diffusion, initial, true)?;
    Ok(ProblemRegistryEntry {
        key: PAPER_EXAMPLE_2D,
        problem,
        known_constants: Some(KnownConstants {
            rho: 4.0,
            h3: (6.0 * PaperExampleBounds::for_exponents(10.0, 3.0).h2()).sqrt(),
            p: 10.0,
            q: 3.0,
        }),
        potential: Some(potential),
    })
}

/// `dx = (a x(t) + b x(t-τ)) dt + (c x(t) + d x(t-τ)) dW`.
pub fn linear_scalar(a: f64, b: f64, c: f64, d: f64, tau: f64, initial: InitialSegment) -> Result<ProblemRegistryEntry> {
    let drift: CoefficientFn = Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| {
        out[0] = a * x[0] + b * y[0];
    });
    let diffusion: CoefficientFn = Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| {
        out[0] = c * x[0] + d * y[0];
    });
    let problem = SddeProblem::new(LINEAR_SCALAR, 1, 1, tau, drift, diffusion, initial, true)?;
    // |f| ≤ (|a|+|b|) r ≤ H₃ r² for r ≥ 1, likewise for g.
    let h3 = (a.abs() + b.abs()).max(c.abs() + d.abs()).max(1.0);
    Ok(ProblemRegistryEntry {
        key: LINEAR_SCALAR,
        problem,
        known_constants: Some(KnownConstants {
            rho: 2.0,
            h3,
            p: 6.0,
            q: 2.5,
        }),
        potential: Some(Arc::new(|_: &[f64], _: &[f64]| 0.0)),
    })
}

/// `dx = (x(t-τ) - x(t)³) dt + x(t)² dW`; classical Euler–Maruyama moments
/// explode on this problem.
pub fn superlinear_blowup(tau: f64, initial: InitialSegment) -> Result<ProblemRegistryEntry> {
    let drift: CoefficientFn = Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
        out[0] = y[0] - x[0] * x[0] * x[0];
    });
    let diffusion: CoefficientFn = Arc::new(|x: &[f64], _: &[f64], out: &mut [f64]| {
        out[0] = x[0] * x[0];
    });
    let problem = SddeProblem::new(SUPERLINEAR_BLOWUP, 1, 1, tau, drift, diffusion, initial, true)?;
    Ok(ProblemRegistryEntry {
        key: SUPERLINEAR_BLOWUP,
        problem,
        // |f| ≤ r + r³ ≤ 2r³ and |g| ≤ r² ≤ 2r³ for r ≥ 1.
        known_constants: Some(KnownConstants {
            rho: 4.0,
            h3: 2.0,
            p: 2.5,
            q: 2.2,
        }),
        potential: Some(Arc::new(|_: &[f64], _: &[f64]| 0.0)),
    })
}

/// Bounding constants `a₁ … a₁₀` derived for the two-dimensional example,
/// each a one-dimensional supremum over `u ≥ 0` evaluated by grid search.
/// They are documentation of the hand verification only; no checker asserts
/// against them except the Khasminskii bound `a₂`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PaperExampleBounds {
    pub p: f64,
    pub q: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
    pub a6: f64,
    pub a7: f64,
    pub a8: f64,
    pub a9: f64,
    pub a10: f64,
}

fn sup_on_grid(upper: f64, f: impl Fn(f64) -> f64) -> f64 {
    const N: usize = 200_000;
    (0..=N)
        .map(|i| f(upper * i as f64 / N as f64))
        .fold(f64::NEG_INFINITY, f64::max)
}

impl PaperExampleBounds {
    pub fn for_exponents(p: f64, q: f64) -> Self {
        let a1 = sup_on_grid(p.max(1.0), |u| -u.powi(4) + p * u.powi(3));
        let a2 = (2.0 * a1).max(p);
        let a3 = sup_on_grid(16.0, |u| 8.0 * u.powf(2.0 / 3.0) - 0.5 * u * u);
        let a4 = sup_on_grid(18.0 * (q - 1.0).max(1.0), |u| 9.0 * (q - 1.0) * u - 0.5 * u * u);
        let a5 = 1f64.max(a3).max(a4).max(q - 1.0);
        let a6 = sup_on_grid(2.0, |u| u.powf(2.0 / 3.0) - u.powi(4));
        let a7 = (128.0 / p * a6).max(36.0);
        let a8 = sup_on_grid(2.0, |u| u - u.powi(4));
        let a9 = (8.0 * a8).max(4.0);
        let a10 = (2.0 * a9).max(4.0);
        Self {
            p,
            q,
            a1,
            a2,
            a3,
            a4,
            a5,
            a6,
            a7,
            a8,
            a9,
            a10,
        }
    }

    /// The growth constant `H₂ = a₇ ∨ a₁₀` covering both increment bounds.
    pub fn h2(&self) -> f64 {
        self.a7.max(self.a10)
    }
}
