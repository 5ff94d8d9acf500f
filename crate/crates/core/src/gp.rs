//! Kriging metamodel: anisotropic Matérn 5/2 Gaussian process with a trend
//! in `a`, maximum-likelihood hyperparameters, universal-kriging
//! prediction and conditional simulation.
//!
//! Inputs `(a, x)` are mapped affinely to the unit cube before fitting and
//! lengthscales are reported in those standardized units. The covariance
//! is `σ² (R(θ) + g I)` where `R` is the Matérn correlation and `g` a
//! relative nugget, so that `β` and `σ²` have closed-form maximizers and
//! the optimizer only searches over `log θ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::predictor::{Prediction, Predictor};
use crate::rng;
use crate::testbed::DesignMatrix;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Largest point set accepted by [`FittedGp::simulate_conditional`].
pub const MAX_SIMULATION_POINTS: usize = 10_000;

/// Version tag of the JSON model document.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Matérn 5/2 correlation at scaled distance `r`.
pub fn matern52(r: f64) -> f64 {
    let s = SQRT5 * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// `∂k / ∂ log θ_k = (5/3)(1 + √5 r) e^{−√5 r} (h_k / θ_k)²`.
fn matern52_dlog_theta(r: f64, h_over_theta_sq: f64) -> f64 {
    let s = SQRT5 * r;
    (5.0 / 3.0) * (1.0 + s) * (-s).exp() * h_over_theta_sq
}

fn scaled_distance(p: &[f64], q: &[f64], theta: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .zip(theta)
        .map(|((u, v), t)| {
            let h = (u - v) / t;
            h * h
        })
        .sum::<f64>()
        .sqrt()
}

/// Affine map of raw `(a, x)` onto the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Per-dimension offsets; index 0 is `a`.
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Observed ranges of the design, with `a_bounds` taking precedence for
    /// the first dimension when given.
    pub fn from_design(design: &DesignMatrix, a_bounds: Option<(f64, f64)>) -> Result<Self> {
        let d = design.input_dim();
        let mut offsets = Vec::with_capacity(d + 1);
        let mut scales = Vec::with_capacity(d + 1);
        let range = |vals: &mut dyn Iterator<Item = f64>| {
            vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (alo, ahi) = a_bounds.unwrap_or_else(|| range(&mut design.a.iter().copied()));
        offsets.push(alo);
        scales.push(ahi - alo);
        for i in 0..d {
            let (lo, hi) = range(&mut design.x.iter().map(|r| r[i]));
            offsets.push(lo);
            scales.push(hi - lo);
        }
        for (k, s) in scales.iter_mut().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                if k == 0 {
                    return invalid("the design needs at least two distinct a values");
                }
                // constant input column: leave it unscaled
                *s = 1.0;
            }
        }
        Ok(Standardizer { offsets, scales })
    }

    pub fn to_unit(&self, a: f64, x: &[f64]) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.offsets.len());
        u.push((a - self.offsets[0]) / self.scales[0]);
        for (i, v) in x.iter().enumerate() {
            u.push((v - self.offsets[i + 1]) / self.scales[i + 1]);
        }
        u
    }
}

/// Matérn 5/2 kernel hyperparameters (lengthscales in standardized units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    /// Nugget as a fraction of `variance`.
    pub nugget: f64,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return invalid("lengthscales must be positive");
        }
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return invalid("kernel variance must be positive");
        }
        if !(self.nugget.is_finite() && self.nugget >= 0.0) {
            return invalid("nugget must be non-negative");
        }
        Ok(())
    }
}

/// Trend `β0 + β1·a` in raw units of `a` (`β1 = 0` when the trend is off).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub beta0: f64,
    pub beta1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "lowercase")]
pub enum NuggetPolicy {
    /// Use exactly this relative nugget.
    Fixed(f64),
    /// Start at this relative nugget and multiply by 10 (up to 1e-4) until
    /// the covariance can be factorized.
    Auto(f64),
}

impl Default for NuggetPolicy {
    fn default() -> Self {
        NuggetPolicy::Auto(1e-8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Include the `β1·a` trend term.
    pub trend: bool,
    pub nugget: NuggetPolicy,
    pub multistarts: usize,
    pub seed: u64,
    /// Range of `a` used for standardization; observed range when absent.
    pub a_bounds: Option<(f64, f64)>,
    /// Box for the lengthscale search, standardized units.
    pub theta_bounds: (f64, f64),
    /// Box for the random starting points.
    pub start_bounds: (f64, f64),
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            trend: true,
            nugget: NuggetPolicy::default(),
            multistarts: 10,
            seed: 0,
            a_bounds: None,
            theta_bounds: (1e-3, 1e2),
            start_bounds: (1e-2, 1e1),
            max_iterations: 200,
            tolerance: 1e-8,
        }
    }
}

/// Training data in standardized coordinates together with the trend basis.
#[derive(Debug, Clone)]
pub struct GpProblem {
    pub points: Vec<Vec<f64>>,
    pub y: DVector<f64>,
    /// Trend basis `(1[, u_a])`, one row per training point.
    pub basis: DMatrix<f64>,
}

/// Log-likelihood value with its gradient in `log θ`.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// False when the covariance could not be factorized; `value` is then
    /// `-inf` and `gradient` empty.
    pub positive_definite: bool,
}

impl LikelihoodEval {
    fn not_positive_definite() -> Self {
        LikelihoodEval { value: f64::NEG_INFINITY, gradient: vec![], positive_definite: false }
    }
}

struct ProfileFit {
    value: f64,
    gradient: Vec<f64>,
    beta: DVector<f64>,
    sigma2: f64,
}

impl GpProblem {
    pub fn new(design: &DesignMatrix, standardizer: &Standardizer, trend: bool) -> Result<Self> {
        let y = design
            .y
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("design has no response column".into()))?;
        let points: Vec<Vec<f64>> = design.a.iter().zip(&design.x).map(|(&a, x)| standardizer.to_unit(a, x)).collect();
        let n = points.len();
        let p = if trend { 2 } else { 1 };
        let basis = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { points[i][0] });
        Ok(GpProblem { points, y: DVector::from_column_slice(y), basis })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `R(θ) + g I`.
    pub fn correlation(&self, theta: &[f64], nugget: f64) -> DMatrix<f64> {
        let n = self.len();
        let mut r = DMatrix::zeros(n, n);
        for i in 0..n {
            r[(i, i)] = 1.0 + nugget;
            for j in 0..i {
                let v = matern52(scaled_distance(&self.points[i], &self.points[j], theta));
                r[(i, j)] = v;
                r[(j, i)] = v;
            }
        }
        r
    }

    /// `Σ_ij W_ij ∂R_ij/∂log θ_k` for each `k`.
    fn contract_derivative(&self, theta: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
        let n = self.len();
        let dim = theta.len();
        let mut out = vec![0.0; dim];
        let mut hs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..i {
                let mut r2 = 0.0;
                for k in 0..dim {
                    let h = (self.points[i][k] - self.points[j][k]) / theta[k];
                    hs[k] = h * h;
                    r2 += hs[k];
                }
                let r = r2.sqrt();
                let wij = w[(i, j)] + w[(j, i)];
                for k in 0..dim {
                    out[k] += wij * matern52_dlog_theta(r, hs[k]);
                }
            }
        }
        out
    }

    fn factor(&self, theta: &[f64], nugget: f64) -> Option<Cholesky<f64, Dyn>> {
        let r = self.correlation(theta, nugget);
        Cholesky::new(r)
    }

    fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
        2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Generalized-least-squares trend coefficients.
    fn gls_beta(&self, chol: &Cholesky<f64, Dyn>) -> Option<DVector<f64>> {
        let rinv_f = chol.solve(&self.basis);
        let a = self.basis.transpose() * &rinv_f;
        let b = rinv_f.transpose() * &self.y;
        Cholesky::new(a).map(|c| c.solve(&b))
    }

    fn profile_fit(&self, theta: &[f64], nugget: f64, with_gradient: bool) -> Option<ProfileFit> {
        let chol = self.factor(theta, nugget)?;
        let beta = self.gls_beta(&chol)?;
        let resid = &self.y - &self.basis * &beta;
        let alpha = chol.solve(&resid);
        let n = self.len() as f64;
        let sigma2 = resid.dot(&alpha) / n;
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return None;
        }
        let value = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) - 0.5 * Self::log_det(&chol);
        let gradient = if with_gradient {
            let rinv = chol.inverse();
            let w = (&alpha * alpha.transpose()) / sigma2 - rinv;
            self.contract_derivative(theta, &w).into_iter().map(|v| 0.5 * v).collect()
        } else {
            vec![]
        };
        Some(ProfileFit { value, gradient, beta, sigma2 })
    }

    /// Profile log-likelihood (trend and variance concentrated out) and its
    /// gradient in `log θ`. `None` when `R + g I` is not positive definite.
    pub fn profile_log_likelihood(&self, theta: &[f64], nugget: f64) -> Option<LikelihoodEval> {
        self.profile_fit(theta, nugget, true)
            .map(|p| LikelihoodEval { value: p.value, gradient: p.gradient, positive_definite: true })
    }

    /// Exact Gaussian log-likelihood for fully specified kernel and trend
    /// (trend coefficients on the standardized basis), with gradient in
    /// `log θ`.
    pub fn log_likelihood(&self, kernel: &KernelSpec, beta: &[f64]) -> LikelihoodEval {
        let Some(chol) = self.factor(&kernel.lengthscales, kernel.nugget) else {
            return LikelihoodEval::not_positive_definite();
        };
        let beta = DVector::from_column_slice(beta);
        let resid = &self.y - &self.basis * &beta;
        let alpha = chol.solve(&resid);
        let n = self.len() as f64;
        let s2 = kernel.variance;
        let value = -0.5 * n * (2.0 * std::f64::consts::PI * s2).ln()
            - 0.5 * Self::log_det(&chol)
            - 0.5 * resid.dot(&alpha) / s2;
        let rinv = chol.inverse();
        let w = (&alpha * alpha.transpose()) / s2 - rinv;
        let gradient = self.contract_derivative(&kernel.lengthscales, &w).into_iter().map(|v| 0.5 * v).collect();
        LikelihoodEval { value, gradient, positive_definite: true }
    }
}

/// Outcome of one local optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub initial_theta: Vec<f64>,
    /// Profile log-likelihood at the start (`-inf` when not factorizable).
    pub initial_value: f64,
    pub final_theta: Vec<f64>,
    pub final_value: f64,
    pub iterations: usize,
}

/// Bounded quasi-Newton maximization of the profile likelihood in `log θ`.
fn maximize_profile(
    problem: &GpProblem,
    nugget: f64,
    start: &[f64],
    bounds: (f64, f64),
    max_iter: usize,
    tol: f64,
    gtol: f64,
) -> StartRecord {
    let (lo, hi) = (bounds.0.ln(), bounds.1.ln());
    let dim = start.len();
    let eval = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let theta: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        problem
            .profile_log_likelihood(&theta, nugget)
            .map(|e| (-e.value, e.gradient.into_iter().map(|g| -g).collect()))
    };
    let mut x: Vec<f64> = start.iter().map(|t| t.ln().clamp(lo, hi)).collect();
    let initial_theta: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let Some((mut f, mut g)) = eval(&x) else {
        return StartRecord {
            initial_theta: initial_theta.clone(),
            initial_value: f64::NEG_INFINITY,
            final_theta: initial_theta,
            final_value: f64::NEG_INFINITY,
            iterations: 0,
        };
    };
    let initial_value = -f;
    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut iterations = 0;
    let active = |x: &[f64], g: &[f64]| -> Vec<bool> {
        (0..dim).map(|k| (x[k] <= lo && g[k] > 0.0) || (x[k] >= hi && g[k] < 0.0)).collect()
    };
    let mut prev_active = active(&x, &g);
    let mut stalls = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let act = active(&x, &g);
        if act != prev_active {
            h = DMatrix::identity(dim, dim);
            prev_active = act.clone();
        }
        let gfree: Vec<f64> = (0..dim).map(|k| if act[k] { 0.0 } else { g[k] }).collect();
        if gfree.iter().map(|v| v.abs()).fold(0.0, f64::max) < gtol.min(1e-7) {
            break;
        }
        let mut d: Vec<f64> = (0..dim)
            .map(|i| if act[i] { 0.0 } else { -(0..dim).filter(|&j| !act[j]).map(|j| h[(i, j)] * g[j]).sum::<f64>() })
            .collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            h = DMatrix::identity(dim, dim);
            d = gfree.iter().map(|v| -v).collect();
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        // cap the step at a factor e^3 in any lengthscale
        let dmax = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if dmax > 3.0 {
            let c = 3.0 / dmax;
            d.iter_mut().for_each(|v| *v *= c);
            slope *= c;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| (xi + t * di).clamp(lo, hi)).collect();
            if let Some((fc, gc)) = eval(&cand) {
                let moved: f64 = cand.iter().zip(&x).zip(&g).map(|((c, xi), gi)| (c - xi) * gi).sum();
                if fc <= f + 1e-4 * moved.min(t * slope).min(0.0) {
                    next = Some((cand, fc, gc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = next else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let converged = (f - fnew).abs() <= tol * (1.0 + f.abs());
        if sy > 1e-12 {
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&yv);
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(dim, dim);
            let left = &i - rho * &sv * yv.transpose();
            let right = &i - rho * &yv * sv.transpose();
            h = &left * &h * &right + rho * &sv * sv.transpose();
        }
        x = xn;
        f = fnew;
        g = gn;
        let gmax = active(&x, &g)
            .iter()
            .zip(&g)
            .filter(|(a, _)| !**a)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        stalls = if converged { stalls + 1 } else { 0 };
        if converged && (gmax <= gtol || stalls >= 5) {
            break;
        }
    }
    StartRecord {
        initial_theta,
        initial_value,
        final_theta: x.iter().map(|v| v.exp()).collect(),
        final_value: -f,
        iterations,
    }
}

/// Newton refinement of a local maximum in `log θ`, with the Hessian taken
/// from central differences of the analytic gradient. Coordinates held at
/// a bound stay fixed. A step is kept only if it reduces the gradient norm
/// without lowering the likelihood beyond rounding level.
fn newton_polish(problem: &GpProblem, nugget: f64, theta: &[f64], bounds: (f64, f64), value: f64) -> Vec<f64> {
    let (lo, hi) = (bounds.0.ln(), bounds.1.ln());
    let dim = theta.len();
    let eval = |x: &[f64]| {
        let t: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        problem.profile_log_likelihood(&t, nugget)
    };
    let mut x: Vec<f64> = theta.iter().map(|t| t.ln()).collect();
    let Some(mut cur) = eval(&x) else { return theta.to_vec() };
    if cur.value < value {
        return theta.to_vec();
    }
    let free: Vec<usize> = (0..dim).filter(|&k| x[k] > lo + 1e-12 && x[k] < hi - 1e-12).collect();
    if free.is_empty() {
        return theta.to_vec();
    }
    let gnorm = |e: &LikelihoodEval| free.iter().map(|&k| e.gradient[k].abs()).fold(0.0, f64::max);
    let h = 1e-4;
    for _ in 0..10 {
        if gnorm(&cur) < 1e-10 {
            break;
        }
        let nf = free.len();
        let mut hess = DMatrix::zeros(nf, nf);
        for (c, &k) in free.iter().enumerate() {
            let mut up = x.clone();
            up[k] += h;
            let mut dn = x.clone();
            dn[k] -= h;
            let (Some(gu), Some(gd)) = (eval(&up), eval(&dn)) else { return x.iter().map(|v| v.exp()).collect() };
            for (r, &j) in free.iter().enumerate() {
                hess[(r, c)] = (gu.gradient[j] - gd.gradient[j]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        // ascent direction needs a negative definite Hessian
        let neg = -hess;
        let Some(chol) = Cholesky::new(neg) else { break };
        let grad = DVector::from_iterator(nf, free.iter().map(|&k| cur.gradient[k]));
        let step = chol.solve(&grad);
        if step.amax() > 0.5 {
            break;
        }
        let mut cand = x.clone();
        for (r, &k) in free.iter().enumerate() {
            cand[k] = (x[k] + step[r]).clamp(lo, hi);
        }
        let Some(next) = eval(&cand) else { break };
        if gnorm(&next) >= gnorm(&cur) || next.value < cur.value - 1e-12 * (1.0 + cur.value.abs()) {
            break;
        }
        x = cand;
        cur = next;
    }
    x.iter().map(|v| v.exp()).collect()
}

/// Diagnostics of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub starts: Vec<StartRecord>,
    pub best_start: usize,
    pub log_likelihood: f64,
    pub nugget: f64,
}

/// A trained kriging model. Immutable; prediction and simulation are
/// read-only.
#[derive(Debug, Clone)]
pub struct FittedGp {
    design: DesignMatrix,
    standardizer: Standardizer,
    kernel: KernelSpec,
    trend: TrendSpec,
    trend_on: bool,
    beta_std: DVector<f64>,
    report: FitReport,
    points: Vec<Vec<f64>>,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    l_inv_basis: DMatrix<f64>,
    trend_precision: Cholesky<f64, Dyn>,
}

/// Serializable form of a [`FittedGp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpDocument {
    pub version: u32,
    pub design: DesignMatrix,
    pub standardizer: Standardizer,
    pub kernel: KernelSpec,
    pub trend: TrendSpec,
    pub trend_on: bool,
    pub beta_standardized: Vec<f64>,
    pub report: FitReport,
}

/// Fits the kriging model by multistart maximum likelihood.
pub fn fit(design: &DesignMatrix, options: &FitOptions) -> Result<FittedGp> {
    design.validate()?;
    let d = design.input_dim();
    let n = design.len();
    if d == 0 {
        return invalid("design has no input columns");
    }
    if n < d + 3 {
        return invalid(format!("design has {n} rows; at least d + 3 = {} are needed", d + 3));
    }
    if options.multistarts == 0 {
        return invalid("multistarts must be at least 1");
    }
    let y = design.y.as_ref().ok_or_else(|| Error::InvalidArgument("design has no response column".into()))?;
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("responses must be finite");
    }
    let nuggets: Vec<f64> = match options.nugget {
        NuggetPolicy::Fixed(g) => vec![g],
        NuggetPolicy::Auto(g0) => {
            let mut v = vec![g0];
            let mut g = if g0 > 0.0 { g0 } else { 1e-10 };
            while g < 1e-4 * (1.0 - 1e-12) {
                g = (g * 10.0).min(1e-4);
                v.push(g);
            }
            v
        }
    };
    if nuggets.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return invalid("nugget must be non-negative");
    }
    if nuggets[0] == 0.0 && nuggets.len() == 1 {
        if let Some((i, j)) = design.duplicate_rows().first() {
            let differ = y[*i] != y[*j];
            return invalid(format!(
                "rows {i} and {j} share the same (a, x){}; use a positive nugget",
                if differ { " with different responses" } else { "" }
            ));
        }
    }
    let standardizer = Standardizer::from_design(design, options.a_bounds)?;
    let problem = GpProblem::new(design, &standardizer, options.trend)?;

    let dim = d + 1;
    let mut rng = rng::stream(options.seed, 0);
    let (slo, shi) = (options.start_bounds.0.ln(), options.start_bounds.1.ln());
    let starts: Vec<Vec<f64>> = (0..options.multistarts)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let u: f64 = rand::Rng::random(&mut rng);
                    (slo + u * (shi - slo)).exp()
                })
                .collect()
        })
        .collect();

    for &g in &nuggets {
        let records: Vec<StartRecord> = starts
            .par_iter()
            .map(|s| maximize_profile(&problem, g, s, options.theta_bounds, options.max_iterations, options.tolerance, 1e-5))
            .collect();
        let best = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.final_value.is_finite())
            .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
                Some((_, v)) if v >= r.final_value => acc,
                _ => Some((i, r.final_value)),
            });
        let Some((best, best_value)) = best else { continue };
        let theta = newton_polish(&problem, g, &records[best].final_theta, options.theta_bounds, best_value);
        let Some(pf) = problem.profile_fit(&theta, g, false) else { continue };
        let kernel = KernelSpec { lengthscales: theta, variance: pf.sigma2, nugget: g };
        let report = FitReport { log_likelihood: pf.value, starts: records, best_start: best, nugget: g };
        return FittedGp::assemble(design.clone(), standardizer, kernel, options.trend, pf.beta, report);
    }
    Err(Error::NotPositiveDefinite(format!(
        "covariance factorization failed at every start for nuggets {nuggets:?}"
    )))
}

impl FittedGp {
    /// Conditions on `design` with the kernel held fixed; only the trend
    /// coefficients are estimated (by generalized least squares).
    pub fn with_kernel(
        design: &DesignMatrix,
        kernel: KernelSpec,
        trend_on: bool,
        a_bounds: Option<(f64, f64)>,
    ) -> Result<Self> {
        design.validate()?;
        kernel.validate()?;
        if kernel.lengthscales.len() != design.input_dim() + 1 {
            return invalid("one lengthscale per input dimension, plus one for a, is required");
        }
        let standardizer = Standardizer::from_design(design, a_bounds)?;
        let problem = GpProblem::new(design, &standardizer, trend_on)?;
        let chol = problem
            .factor(&kernel.lengthscales, kernel.nugget)
            .ok_or_else(|| Error::NotPositiveDefinite("training covariance".into()))?;
        let beta = problem
            .gls_beta(&chol)
            .ok_or_else(|| Error::NotPositiveDefinite("trend is not identifiable from this design".into()))?;
        let log_likelihood = problem.log_likelihood(&kernel, beta.as_slice()).value;
        let report = FitReport { starts: vec![], best_start: 0, log_likelihood, nugget: kernel.nugget };
        FittedGp::assemble(design.clone(), standardizer, kernel, trend_on, beta, report)
    }

    fn assemble(
        design: DesignMatrix,
        standardizer: Standardizer,
        kernel: KernelSpec,
        trend_on: bool,
        beta_std: DVector<f64>,
        report: FitReport,
    ) -> Result<Self> {
        kernel.validate()?;
        let problem = GpProblem::new(&design, &standardizer, trend_on)?;
        let chol = problem
            .factor(&kernel.lengthscales, kernel.nugget)
            .ok_or_else(|| Error::NotPositiveDefinite("training covariance".into()))?;
        let resid = &problem.y - &problem.basis * &beta_std;
        let alpha = chol.solve(&resid);
        let l = chol.unpack();
        let l_inv_basis = l
            .solve_lower_triangular(&problem.basis)
            .ok_or_else(|| Error::NotPositiveDefinite("training covariance".into()))?;
        let trend_precision = Cholesky::new(l_inv_basis.transpose() * &l_inv_basis)
            .ok_or_else(|| Error::NotPositiveDefinite("trend is not identifiable from this design".into()))?;
        let (off, sc) = (standardizer.offsets[0], standardizer.scales[0]);
        let trend = if trend_on {
            TrendSpec { beta0: beta_std[0] - beta_std[1] * off / sc, beta1: beta_std[1] / sc }
        } else {
            TrendSpec { beta0: beta_std[0], beta1: 0.0 }
        };
        Ok(FittedGp {
            design,
            standardizer,
            kernel,
            trend,
            trend_on,
            beta_std,
            report,
            points: problem.points,
            l,
            alpha,
            l_inv_basis,
            trend_precision,
        })
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn trend(&self) -> TrendSpec {
        self.trend
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    /// Profile log-likelihood of the training data at other lengthscales
    /// (same nugget).
    pub fn profile_log_likelihood(&self, theta: &[f64]) -> Option<f64> {
        let problem = GpProblem::new(&self.design, &self.standardizer, self.trend_on).ok()?;
        problem.profile_log_likelihood(theta, self.kernel.nugget).map(|e| e.value)
    }

    fn basis_row(&self, u: &[f64]) -> DVector<f64> {
        if self.trend_on {
            DVector::from_column_slice(&[1.0, u[0]])
        } else {
            DVector::from_column_slice(&[1.0])
        }
    }

    fn cross_correlation(&self, units: &[Vec<f64>]) -> DMatrix<f64> {
        let theta = &self.kernel.lengthscales;
        DMatrix::from_fn(self.points.len(), units.len(), |i, j| matern52(scaled_distance(&self.points[i], &units[j], theta)))
    }

    /// Mean and variance at standardized points.
    fn predict_units(&self, units: &[Vec<f64>]) -> Vec<Prediction> {
        if units.is_empty() {
            return vec![];
        }
        let r = self.cross_correlation(units);
        let v = self.l.solve_lower_triangular(&r).expect("factor is nonsingular");
        let s2 = self.kernel.variance;
        units
            .iter()
            .enumerate()
            .map(|(j, u)| {
                let rj = r.column(j);
                let vj = v.column(j);
                let f = self.basis_row(u);
                let mean = f.dot(&self.beta_std) + rj.dot(&self.alpha);
                let w = &f - self.l_inv_basis.transpose() * vj;
                let trend_term = w.dot(&self.trend_precision.solve(&w));
                let variance = s2 * (1.0 - vj.norm_squared() + trend_term);
                Prediction { mean, variance: variance.max(0.0) }
            })
            .collect()
    }

    fn predict_units_chunked(&self, units: Vec<Vec<f64>>) -> Vec<Prediction> {
        const CHUNK: usize = 256;
        units.par_chunks(CHUNK).flat_map_iter(|c| self.predict_units(c)).collect()
    }

    /// Predictive mean vector and full covariance matrix at a point set.
    pub fn predict_covariance(&self, a: &[f64], xs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let units: Vec<Vec<f64>> = a.iter().zip(xs).map(|(&a, x)| self.standardizer.to_unit(a, x)).collect();
        let m = units.len();
        let theta = &self.kernel.lengthscales;
        let r = self.cross_correlation(&units);
        let v = self.l.solve_lower_triangular(&r).expect("factor is nonsingular");
        let p = self.beta_std.len();
        let fstar = DMatrix::from_fn(p, m, |i, j| if i == 0 { 1.0 } else { units[j][0] });
        let w = &fstar - self.l_inv_basis.transpose() * &v;
        let aw = self.trend_precision.solve(&w);
        let mut cov = w.transpose() * aw - v.transpose() * &v;
        for i in 0..m {
            for j in 0..=i {
                let k = if i == j { 1.0 } else { matern52(scaled_distance(&units[i], &units[j], theta)) };
                let c = self.kernel.variance * (cov[(i, j)] + k);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let mean = DVector::from_fn(m, |j, _| {
            let f = fstar.column(j);
            f.dot(&self.beta_std) + r.column(j).dot(&self.alpha)
        });
        (mean, cov)
    }

    /// Draws `m` joint realizations of the conditioned process at the given
    /// points. Realization `j` uses random stream `j` of `seed`.
    pub fn simulate_conditional(&self, a: &[f64], xs: &[Vec<f64>], m: usize, seed: u64) -> Result<RealizationSet> {
        let npts = a.len();
        if npts != xs.len() {
            return invalid("point coordinate lengths differ");
        }
        if npts > MAX_SIMULATION_POINTS {
            return Err(Error::TooManyPoints { points: npts, limit: MAX_SIMULATION_POINTS });
        }
        let (mean, cov) = self.predict_covariance(a, xs);
        let (factor, jitter) = jittered_cholesky(cov, self.kernel.variance)?;
        let mut values = DMatrix::zeros(m, npts);
        const BLOCK: usize = 64;
        let blocks: Vec<DMatrix<f64>> = (0..m.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let j0 = b * BLOCK;
                let cols = BLOCK.min(m - j0);
                // full-width blocks keep each draw's arithmetic independent of m
                let mut z = DMatrix::zeros(npts, BLOCK);
                for c in 0..cols {
                    let mut r = rng::stream(seed, (j0 + c) as u64);
                    for i in 0..npts {
                        z[(i, c)] = StandardNormal.sample(&mut r);
                    }
                }
                &factor * z
            })
            .collect();
        for (b, blk) in blocks.iter().enumerate() {
            for c in 0..BLOCK.min(m - b * BLOCK) {
                let row = b * BLOCK + c;
                for i in 0..npts {
                    values[(row, i)] = mean[i] + blk[(i, c)];
                }
            }
        }
        Ok(RealizationSet { a: a.to_vec(), x: xs.to_vec(), values, seed, jitter })
    }

    pub fn to_document(&self) -> GpDocument {
        GpDocument {
            version: MODEL_FORMAT_VERSION,
            design: self.design.clone(),
            standardizer: self.standardizer.clone(),
            kernel: self.kernel.clone(),
            trend: self.trend,
            trend_on: self.trend_on,
            beta_standardized: self.beta_std.iter().copied().collect(),
            report: self.report.clone(),
        }
    }

    pub fn from_document(doc: GpDocument) -> Result<Self> {
        if doc.version != MODEL_FORMAT_VERSION {
            return invalid(format!("unsupported model version {} (expected {MODEL_FORMAT_VERSION})", doc.version));
        }
        let expected = if doc.trend_on { 2 } else { 1 };
        if doc.beta_standardized.len() != expected {
            return invalid("trend coefficient count does not match trend flag");
        }
        FittedGp::assemble(
            doc.design,
            doc.standardizer,
            doc.kernel,
            doc.trend_on,
            DVector::from_vec(doc.beta_standardized),
            doc.report,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

/// Lower Cholesky factor of a positive semi-definite matrix. Pivots in
/// `[-tol, tol]` are treated as zero (the column is dropped); `None` when a
/// pivot falls below `-tol`.
pub fn semidefinite_cholesky(cov: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = cov.nrows();
    // row-major lower triangle so that inner products run over contiguous memory
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            let v = cov[(i, j)] - dot;
            if i == j {
                if v > tol {
                    l[i * n + i] = v.sqrt();
                } else if v >= -tol {
                    l[i * n + i] = 0.0;
                } else {
                    return None;
                }
            } else {
                let d = l[j * n + j];
                l[i * n + j] = if d > 0.0 { v / d } else { 0.0 };
            }
        }
    }
    Some(DMatrix::from_row_slice(n, n, &l))
}

/// Factor `L` with `L Lᵀ ≈ cov`, and the diagonal jitter that was added.
///
/// Zero pivots up to `1e-10·σ²` in magnitude are dropped first; if the
/// matrix is further from positive semi-definite, jitter starting at
/// `1e-10·σ²` is added and grown tenfold up to `1e-4·σ²`.
pub fn jittered_cholesky(cov: DMatrix<f64>, sigma2: f64) -> Result<(DMatrix<f64>, f64)> {
    let tol = 1e-10 * sigma2;
    if let Some(l) = semidefinite_cholesky(&cov, tol) {
        return Ok((l, 0.0));
    }
    let mut eps = tol;
    while eps <= 1e-4 * sigma2 * (1.0 + 1e-9) {
        let mut m = cov.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        if let Some(l) = semidefinite_cholesky(&m, tol) {
            log::warn!("conditional covariance needed jitter {eps:.3e}");
            return Ok((l, eps));
        }
        eps *= 10.0;
    }
    Err(Error::NotPositiveDefinite("conditional covariance, even with jitter 1e-4·σ²".into()))
}

impl Predictor for FittedGp {
    fn input_dim(&self) -> usize {
        self.design.input_dim()
    }

    fn predict_point(&self, a: f64, x: &[f64]) -> Prediction {
        self.predict_units(&[self.standardizer.to_unit(a, x)])[0]
    }

    fn predict_at_a(&self, a: f64, xs: &[Vec<f64>]) -> Vec<Prediction> {
        self.predict_units_chunked(xs.iter().map(|x| self.standardizer.to_unit(a, x)).collect())
    }

    fn predict_points(&self, a: &[f64], xs: &[Vec<f64>]) -> Vec<Prediction> {
        self.predict_units_chunked(a.iter().zip(xs).map(|(&a, x)| self.standardizer.to_unit(a, x)).collect())
    }
}

/// Joint conditional draws: `values[(j, k)]` is realization `j` at point `k`.
#[derive(Debug, Clone)]
pub struct RealizationSet {
    pub a: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub values: DMatrix<f64>,
    pub seed: u64,
    /// Diagonal jitter that was needed to factorize the covariance.
    pub jitter: f64,
}
