//! Probabilistic input model: marginal densities, sampling, and the
//! exponential tilts that minimize Kullback-Leibler divergence under a
//! moment constraint.
//!
//! A tilt of a base density `f` with sufficient statistic `T` is
//!
//! ```text
//! f_λ(x) = exp(λ·T(x) − ψ(λ)) f(x),   ψ(λ) = log E_f[exp(λ·T(X))]
//! ```
//!
//! Among all densities on the support of `f` with `E[T] = t`, `f_λ` with
//! `∇ψ(λ) = t` has the smallest `KL(· || f)`, and that divergence equals
//! `λ·t − ψ(λ)`. The statistic is centered at the nominal mean `c`:
//! `T(x) = x − c` for a mean constraint, `T(x) = (x − c, (x − c)²)` for a
//! variance constraint (which holds the mean at `c`).

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{integrate, norm_cdf, norm_pdf, norm_quantile};
use crate::rng;

/// Half-width, in standard deviations, of the window used to integrate
/// Gaussian densities numerically.
pub const GAUSSIAN_QUADRATURE_HALF_WIDTH: f64 = 10.0;

/// A univariate marginal density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScalarDistribution {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mu: f64, sigma: f64 },
}

impl ScalarDistribution {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        let d = ScalarDistribution::Uniform { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        let d = ScalarDistribution::Gaussian { mu, sigma };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return invalid(format!("uniform requires finite lo < hi, got ({lo}, {hi})"));
                }
            }
            ScalarDistribution::Gaussian { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) {
                    return invalid(format!("gaussian requires finite mu and sigma > 0, got ({mu}, {sigma})"));
                }
            }
        }
        Ok(())
    }

    pub fn density(&self, x: f64) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            ScalarDistribution::Gaussian { mu, sigma } => norm_pdf((x - mu) / sigma) / sigma,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            ScalarDistribution::Gaussian { mu, sigma } => norm_cdf((x - mu) / sigma),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => lo + p.clamp(0.0, 1.0) * (hi - lo),
            ScalarDistribution::Gaussian { mu, sigma } => mu + sigma * norm_quantile(p),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            ScalarDistribution::Gaussian { mu, .. } => mu,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            ScalarDistribution::Gaussian { sigma, .. } => sigma * sigma,
        }
    }

    /// Closed support (infinite ends for the Gaussian).
    pub fn support(&self) -> (f64, f64) {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => (lo, hi),
            ScalarDistribution::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        let (lo, hi) = self.support();
        x >= lo && x <= hi
    }

    /// Finite interval used for numerical integration against the density.
    pub fn quadrature_range(&self) -> (f64, f64) {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => (lo, hi),
            ScalarDistribution::Gaussian { mu, sigma } => (
                mu - GAUSSIAN_QUADRATURE_HALF_WIDTH * sigma,
                mu + GAUSSIAN_QUADRATURE_HALF_WIDTH * sigma,
            ),
        }
    }

    pub fn draw(&self, rng: &mut rng::Rng) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ScalarDistribution::Gaussian { mu, sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                mu + sigma * z
            }
        }
    }

    /// `n` i.i.d. draws, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, 0);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }
}

/// Joint model of the uncertain inputs (independent marginals) together
/// with the range of the critical parameter `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputModel {
    pub marginals: Vec<ScalarDistribution>,
    pub a_bounds: (f64, f64),
}

impl InputModel {
    pub fn new(marginals: Vec<ScalarDistribution>, a_bounds: (f64, f64)) -> Result<Self> {
        let m = InputModel { marginals, a_bounds };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.marginals.is_empty() {
            return invalid("input model needs at least one input");
        }
        for (i, m) in self.marginals.iter().enumerate() {
            m.validate().map_err(|e| Error::InvalidArgument(format!("input {i}: {e}")))?;
        }
        let (a0, a1) = self.a_bounds;
        if !(a0.is_finite() && a1.is_finite() && a0 < a1) {
            return invalid(format!("a_bounds must satisfy a_min < a_max, got ({a0}, {a1})"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    /// Joint density of `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        self.marginals.iter().zip(x).map(|(m, &v)| m.density(v)).product()
    }

    /// `n` joint draws as rows. Column `i` comes from stream `i` of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let columns: Vec<Vec<f64>> = self
            .marginals
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut rng = rng::stream(seed, i as u64);
                (0..n).map(|_| m.draw(&mut rng)).collect()
            })
            .collect();
        (0..n).map(|k| columns.iter().map(|c| c[k]).collect()).collect()
    }
}

/// Moment constraint imposed on a perturbed marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "moment", content = "delta", rename_all = "lowercase")]
pub enum Constraint {
    Mean(f64),
    Variance(f64),
}

impl Constraint {
    pub fn delta(&self) -> f64 {
        match *self {
            Constraint::Mean(d) | Constraint::Variance(d) => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub input_index: usize,
    pub constraint: Constraint,
}

/// Checks that `constraint` can be met by a density on the support of `base`.
pub fn check_feasible(base: &ScalarDistribution, constraint: Constraint) -> Result<()> {
    let delta = constraint.delta();
    if !delta.is_finite() {
        return Err(Error::Infeasible(format!("non-finite delta {delta}")));
    }
    match (*base, constraint) {
        (ScalarDistribution::Uniform { lo, hi }, Constraint::Mean(d)) => {
            if !(d > lo && d < hi) {
                return Err(Error::Infeasible(format!(
                    "mean {d} outside the feasible range ({lo}, {hi})"
                )));
            }
        }
        (ScalarDistribution::Uniform { lo, hi }, Constraint::Variance(d)) => {
            let max = (hi - lo) * (hi - lo) / 4.0;
            if !(d > 0.0 && d < max) {
                return Err(Error::Infeasible(format!(
                    "variance {d} outside the feasible range (0, {max})"
                )));
            }
        }
        (ScalarDistribution::Gaussian { .. }, Constraint::Mean(_)) => {}
        (ScalarDistribution::Gaussian { .. }, Constraint::Variance(d)) => {
            if d <= 0.0 {
                return Err(Error::Infeasible(format!(
                    "variance {d} outside the feasible range (0, inf)"
                )));
            }
        }
    }
    Ok(())
}

/// Exponential tilt of a base marginal meeting a moment constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedDistribution {
    pub base: ScalarDistribution,
    pub constraint: Constraint,
    /// Centering constant of the sufficient statistic (the nominal mean).
    pub center: f64,
    pub lambda: Vec<f64>,
    pub log_normalizer: f64,
}

/// Log-partition value, gradient (tilted moments of `T`) and Hessian
/// (tilted covariance of `T`) at one `λ`.
struct Partition {
    psi: f64,
    grad: Vec<f64>,
    hess: Vec<Vec<f64>>,
}

fn statistic(x: f64, center: f64, dim: usize) -> [f64; 2] {
    let z = x - center;
    if dim == 1 {
        [z, 0.0]
    } else {
        [z, z * z]
    }
}

fn dot(lambda: &[f64], t: &[f64; 2]) -> f64 {
    lambda.iter().zip(t).map(|(l, t)| l * t).sum()
}

fn partition(base: &ScalarDistribution, center: f64, lambda: &[f64]) -> Option<Partition> {
    let dim = lambda.len();
    match *base {
        ScalarDistribution::Gaussian { sigma, .. } => {
            // z = x - mu ~ N(0, s2); tilted law is N(m, v).
            let s2 = sigma * sigma;
            let l2 = if dim == 2 { lambda[1] } else { 0.0 };
            let q = 1.0 - 2.0 * l2 * s2;
            if q <= 0.0 {
                return None;
            }
            let v = s2 / q;
            let m = lambda[0] * v;
            let psi = -0.5 * q.ln() + 0.5 * lambda[0] * lambda[0] * v;
            if dim == 1 {
                Some(Partition { psi, grad: vec![m], hess: vec![vec![v]] })
            } else {
                let c12 = 2.0 * m * v;
                let c22 = 2.0 * v * v + 4.0 * m * m * v;
                Some(Partition {
                    psi,
                    grad: vec![m, v + m * m],
                    hess: vec![vec![v, c12], vec![c12, c22]],
                })
            }
        }
        ScalarDistribution::Uniform { lo, hi } => {
            // exponent maximum over [lo, hi], for overflow-free integrands
            let mut shift = dot(lambda, &statistic(lo, center, dim)).max(dot(lambda, &statistic(hi, center, dim)));
            if dim == 2 && lambda[1] < 0.0 {
                let zv = -lambda[0] / (2.0 * lambda[1]);
                let xv = center + zv;
                if xv > lo && xv < hi {
                    shift = shift.max(dot(lambda, &statistic(xv, center, dim)));
                }
            }
            let width = hi - lo;
            let weight = |x: f64| (dot(lambda, &statistic(x, center, dim)) - shift).exp() / width;
            let tol = 1e-15;
            let z0 = integrate(weight, lo, hi, tol, 1e-14);
            let moment = |k: usize, l: usize| {
                integrate(
                    |x| {
                        let t = statistic(x, center, dim);
                        let mut v = weight(x);
                        if k < 2 {
                            v *= t[k];
                        }
                        if l < 2 {
                            v *= t[l];
                        }
                        v
                    },
                    lo,
                    hi,
                    tol,
                    1e-14,
                ) / z0
            };
            let psi = z0.ln() + shift;
            if dim == 1 {
                let m1 = moment(0, 2);
                let m11 = moment(0, 0);
                Some(Partition { psi, grad: vec![m1], hess: vec![vec![(m11 - m1 * m1).max(0.0)]] })
            } else {
                let m1 = moment(0, 2);
                let m2 = moment(1, 2);
                let m11 = moment(0, 0);
                let m12 = moment(0, 1);
                let m22 = moment(1, 1);
                let c12 = m12 - m1 * m2;
                Some(Partition {
                    psi,
                    grad: vec![m1, m2],
                    hess: vec![vec![m11 - m1 * m1, c12], vec![c12, m22 - m2 * m2]],
                })
            }
        }
    }
}

const MAX_NEWTON_ITERATIONS: usize = 200;

/// Solves for the exponential tilt of `base` meeting `constraint`.
///
/// The dual objective `ψ(λ) − λ·t` is convex; it is minimized by Newton
/// steps with backtracking (a step is accepted when it decreases either the
/// objective or the moment residual), and for the one-parameter (mean) case a sign
/// bracket on the moment residual is maintained so that rejected Newton
/// steps fall back to bisection. Converged when every moment residual is
/// below `1e-10` in the base's natural scale.
pub fn kl_tilt(base: &ScalarDistribution, constraint: Constraint) -> Result<TiltedDistribution> {
    base.validate()?;
    check_feasible(base, constraint)?;
    let center = base.mean();
    let scale = base.variance().sqrt();
    let (dim, target) = match constraint {
        Constraint::Mean(d) => (1, vec![d - center]),
        Constraint::Variance(d) => (2, vec![0.0, d]),
    };
    let identity = match constraint {
        Constraint::Mean(d) => d == center,
        Constraint::Variance(d) => d == base.variance(),
    };
    if identity {
        return Ok(TiltedDistribution {
            base: *base,
            constraint,
            center,
            lambda: vec![0.0; dim],
            log_normalizer: 0.0,
        });
    }
    let tol: Vec<f64> = if dim == 1 { vec![1e-10 * scale.max(1.0)] } else { vec![1e-10 * scale.max(1.0), 1e-10 * (scale * scale).max(1.0)] };

    let objective = |lambda: &[f64], p: &Partition| p.psi - lambda.iter().zip(&target).map(|(l, t)| l * t).sum::<f64>();

    let mut lambda = vec![0.0; dim];
    let mut part = partition(base, center, &lambda).expect("partition at zero");
    // sign bracket for the mean case: residual is increasing in lambda
    let mut bracket: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);

    for _ in 0..MAX_NEWTON_ITERATIONS {
        let resid: Vec<f64> = part.grad.iter().zip(&target).map(|(g, t)| g - t).collect();
        if resid.iter().zip(&tol).all(|(r, t)| r.abs() <= *t) {
            return Ok(TiltedDistribution { base: *base, constraint, center, lambda, log_normalizer: part.psi });
        }
        if dim == 1 {
            if resid[0] > 0.0 {
                bracket.1 = bracket.1.min(lambda[0]);
            } else {
                bracket.0 = bracket.0.max(lambda[0]);
            }
        }
        let step = newton_step(&part.hess, &resid);
        let f0 = objective(&lambda, &part);
        let slope: f64 = resid.iter().zip(&step).map(|(r, s)| r * s).sum();
        let r0 = norm_resid(&part.grad, &target);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = lambda.iter().zip(&step).map(|(l, s)| l + t * s).collect();
            let in_bracket = dim != 1 || (cand[0] > bracket.0 && cand[0] < bracket.1);
            if in_bracket {
                if let Some(p) = partition(base, center, &cand) {
                    let decrease = objective(&cand, &p) <= f0 + 1e-4 * t * slope.min(0.0);
                    let r_cand = norm_resid(&p.grad, &target);
                    if p.psi.is_finite() && (decrease || r_cand < (1.0 - 1e-4 * t) * r0) {
                        accepted = Some((cand, p));
                        break;
                    }
                }
            }
            if dim == 1 && !in_bracket {
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, p)) => {
                lambda = cand;
                part = p;
            }
            None if dim == 1 => {
                // bisection on the bracket, expanding an open end geometrically
                let next = match (bracket.0.is_finite(), bracket.1.is_finite()) {
                    (true, true) => 0.5 * (bracket.0 + bracket.1),
                    (true, false) => bracket.0 + (bracket.0.abs() + 1.0 / scale),
                    (false, true) => bracket.1 - (bracket.1.abs() + 1.0 / scale),
                    (false, false) => lambda[0],
                };
                lambda = vec![next];
                part = partition(base, center, &lambda)
                    .ok_or_else(|| Error::NoConvergence("tilt partition function diverged".into()))?;
            }
            None => {
                return Err(Error::NoConvergence(format!(
                    "tilt line search failed at lambda {lambda:?}"
                )))
            }
        }
    }
    Err(Error::NoConvergence(format!(
        "tilt solve did not converge after {MAX_NEWTON_ITERATIONS} iterations"
    )))
}

fn norm_resid(grad: &[f64], target: &[f64]) -> f64 {
    grad.iter().zip(target).map(|(g, t)| (g - t) * (g - t)).sum::<f64>().sqrt()
}

fn newton_step(hess: &[Vec<f64>], resid: &[f64]) -> Vec<f64> {
    if resid.len() == 1 {
        let h = hess[0][0].max(1e-300);
        return vec![-resid[0] / h];
    }
    let (a, b, c) = (hess[0][0], hess[0][1], hess[1][1]);
    let det = a * c - b * b;
    if det > 1e-300 * a.abs().max(c.abs()).max(1e-300) {
        vec![-(c * resid[0] - b * resid[1]) / det, -(-b * resid[0] + a * resid[1]) / det]
    } else {
        // fall back to steepest descent
        vec![-resid[0], -resid[1]]
    }
}

impl TiltedDistribution {
    pub fn is_identity(&self) -> bool {
        self.lambda.iter().all(|&l| l == 0.0) && self.log_normalizer == 0.0
    }

    fn exponent(&self, x: f64) -> f64 {
        dot(&self.lambda, &statistic(x, self.center, self.lambda.len())) - self.log_normalizer
    }

    /// Tilted density; zero outside the base support.
    pub fn density(&self, x: f64) -> f64 {
        if !self.base.in_support(x) {
            return 0.0;
        }
        self.base.density(x) * self.exponent(x).exp()
    }

    /// Likelihood ratio `f_δ(x) / f(x)`; `x` must lie in the support.
    pub fn likelihood_ratio(&self, x: f64) -> Result<f64> {
        if !self.base.in_support(x) {
            let (lo, hi) = self.base.support();
            return invalid(format!("x = {x} outside the support [{lo}, {hi}]"));
        }
        if self.is_identity() {
            return Ok(1.0);
        }
        Ok(self.exponent(x).exp())
    }

    /// KL(f_δ || f) from the dual identity `λ·t − ψ(λ)`.
    pub fn kl_divergence(&self) -> f64 {
        if self.is_identity() {
            return 0.0;
        }
        let t = match self.constraint {
            Constraint::Mean(d) => vec![d - self.center],
            Constraint::Variance(d) => vec![0.0, d],
        };
        let v: f64 = self.lambda.iter().zip(&t).map(|(l, t)| l * t).sum::<f64>() - self.log_normalizer;
        v.max(0.0)
    }

    /// Mean of the tilted law.
    pub fn mean(&self) -> f64 {
        match self.constraint {
            Constraint::Mean(d) => d,
            Constraint::Variance(_) => self.center,
        }
    }

    /// For Gaussian bases the tilt is again Gaussian; returns `(mean, sd)`.
    pub fn gaussian_equivalent(&self) -> Option<(f64, f64)> {
        match self.base {
            ScalarDistribution::Gaussian { sigma, mu } => {
                let s2 = sigma * sigma;
                let l2 = if self.lambda.len() == 2 { self.lambda[1] } else { 0.0 };
                let v = s2 / (1.0 - 2.0 * l2 * s2);
                Some((mu + self.lambda[0] * v, v.sqrt()))
            }
            ScalarDistribution::Uniform { .. } => None,
        }
    }

    /// Finite interval holding all but a negligible part of the tilted mass.
    pub fn quadrature_range(&self) -> (f64, f64) {
        match self.gaussian_equivalent() {
            Some((m, s)) => {
                let (lo, hi) = self.base.quadrature_range();
                (
                    lo.min(m - GAUSSIAN_QUADRATURE_HALF_WIDTH * s),
                    hi.max(m + GAUSSIAN_QUADRATURE_HALF_WIDTH * s),
                )
            }
            None => self.base.quadrature_range(),
        }
    }

    /// One draw: exact for Gaussian bases, rejection from the base otherwise.
    pub fn draw(&self, rng: &mut rng::Rng) -> f64 {
        if let Some((m, s)) = self.gaussian_equivalent() {
            let z: f64 = rng.sample(StandardNormal);
            return m + s * z;
        }
        let (lo, hi) = self.base.support();
        let mut bound = self.exponent(lo).max(self.exponent(hi));
        if self.lambda.len() == 2 && self.lambda[1] < 0.0 {
            let xv = self.center - self.lambda[0] / (2.0 * self.lambda[1]);
            if xv > lo && xv < hi {
                bound = bound.max(self.exponent(xv));
            }
        }
        loop {
            let x = self.base.draw(rng);
            let u: f64 = rng.random();
            if u.ln() <= self.exponent(x) - bound {
                return x;
            }
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, 0);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }
}

/// `KL(p || q) = ∫ p log(p / q)` over `[lo, hi]` by adaptive quadrature.
/// Points where `p` vanishes contribute zero.
pub fn kl_divergence_quadrature<P, Q>(p: P, q: Q, lo: f64, hi: f64) -> f64
where
    P: Fn(f64) -> f64,
    Q: Fn(f64) -> f64,
{
    integrate(
        |x| {
            let px = p(x);
            if px <= 0.0 {
                0.0
            } else {
                px * (px / q(x)).ln()
            }
        },
        lo,
        hi,
        1e-14,
        1e-13,
    )
}

/// KL divergence of a tilt from its base, by quadrature.
pub fn kl_divergence(tilted: &TiltedDistribution) -> f64 {
    let (lo, hi) = tilted.quadrature_range();
    kl_divergence_quadrature(|x| tilted.density(x), |x| tilted.base.density(x), lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities() {
        let u = ScalarDistribution::uniform(0.0, 1.0).unwrap();
        assert_eq!(u.density(0.5), 1.0);
        assert_eq!(u.density(1.5), 0.0);
        let g = ScalarDistribution::gaussian(0.0, 1.0).unwrap();
        assert!((g.density(0.0) - 0.398_942_280_4).abs() < 1e-10);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(ScalarDistribution::uniform(1.0, 1.0).is_err());
        assert!(ScalarDistribution::gaussian(0.0, 0.0).is_err());
        assert!(InputModel::new(vec![], (0.0, 1.0)).is_err());
        assert!(InputModel::new(vec![ScalarDistribution::uniform(0.0, 1.0).unwrap()], (1.0, 0.0)).is_err());
    }

    #[test]
    fn sampling_moments() {
        let u = ScalarDistribution::uniform(0.0, 1.0).unwrap();
        let s = u.sample(100_000, 3);
        let m = s.iter().sum::<f64>() / s.len() as f64;
        assert!((m - 0.5).abs() < 0.01);
        let g = ScalarDistribution::gaussian(2.0, 3.0).unwrap();
        let s = g.sample(100_000, 4);
        let (_, v) = crate::numerics::mean_var(&s);
        assert!((v.sqrt() - 3.0).abs() < 0.05);
        assert_eq!(g.sample(10, 9), g.sample(10, 9));
    }

    #[test]
    fn infeasible_constraints_name_the_range() {
        let u = ScalarDistribution::uniform(0.0, 1.0).unwrap();
        let err = kl_tilt(&u, Constraint::Mean(1.2)).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
        let err = kl_tilt(&u, Constraint::Variance(0.3)).unwrap_err();
        assert!(err.to_string().contains("0.25"), "{err}");
        let g = ScalarDistribution::gaussian(0.0, 1.0).unwrap();
        assert!(kl_tilt(&g, Constraint::Variance(-1.0)).is_err());
    }

    #[test]
    fn nominal_constraint_is_identity() {
        let u = ScalarDistribution::uniform(0.0, 1.0).unwrap();
        let t = kl_tilt(&u, Constraint::Mean(0.5)).unwrap();
        assert_eq!(t.lambda, vec![0.0]);
        assert_eq!(t.likelihood_ratio(0.3).unwrap(), 1.0);
        assert_eq!(t.kl_divergence(), 0.0);
        assert_eq!(t.density(0.77), 1.0);
    }

    #[test]
    fn likelihood_ratio_outside_support_errors() {
        let u = ScalarDistribution::uniform(0.0, 1.0).unwrap();
        let t = kl_tilt(&u, Constraint::Mean(0.7)).unwrap();
        assert!(t.likelihood_ratio(1.01).is_err());
        assert_eq!(t.density(-0.1), 0.0);
    }

    #[test]
    fn uniform_variance_tilt_keeps_mean() {
        let u = ScalarDistribution::uniform(0.0, 1.0).unwrap();
        for &v in &[0.02, 0.05, 0.15, 0.2] {
            let t = kl_tilt(&u, Constraint::Variance(v)).unwrap();
            let m = integrate(|x| x * t.density(x), 0.0, 1.0, 1e-14, 0.0);
            let var = integrate(|x| (x - 0.5) * (x - 0.5) * t.density(x), 0.0, 1.0, 1e-14, 0.0);
            assert!((m - 0.5).abs() < 1e-8, "mean {m}");
            assert!((var - v).abs() < 1e-8, "var {var} vs {v}");
        }
    }

    #[test]
    fn gaussian_variance_tilt_is_rescaled_gaussian() {
        let g = ScalarDistribution::gaussian(1.0, 2.0).unwrap();
        let t = kl_tilt(&g, Constraint::Variance(9.0)).unwrap();
        let (m, s) = t.gaussian_equivalent().unwrap();
        assert!((m - 1.0).abs() < 1e-10);
        assert!((s - 3.0).abs() < 1e-9);
        let target = ScalarDistribution::gaussian(1.0, 3.0).unwrap();
        for &x in &[-5.0, 0.0, 1.0, 4.0] {
            assert!((t.density(x) - target.density(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_sign_follows_shift() {
        let u = ScalarDistribution::uniform(0.0, 1.0).unwrap();
        for &d in &[0.1, 0.3, 0.45, 0.55, 0.8, 0.95] {
            let t = kl_tilt(&u, Constraint::Mean(d)).unwrap();
            assert_eq!(t.lambda[0] > 0.0, d > 0.5);
        }
    }
}
