//! Functional risk curves `a ↦ P(Y > s | a)`.
//!
//! Two families of estimators live here: the parametric Berens model (a
//! linear-Gaussian regression of a log or Box-Cox transformed response on
//! `a`) and the metamodel-based curves built on a [`Predictor`], including
//! the double Monte-Carlo procedure that separates metamodel uncertainty
//! from integration error.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::InputModel;
use crate::error::{invalid, Error, Result};
use crate::gp::FittedGp;
use crate::numerics::{self, is_non_decreasing, isotonic_increasing, norm_cdf, norm_quantile, quantile_sorted};
use crate::predictor::Predictor;
use crate::rng::{self, derive_seed};

// ---------------------------------------------------------------------------
// Berens / Box-Cox

/// Response transform applied before the linear regression on `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lambda", rename_all = "lowercase")]
pub enum Transform {
    /// `log y` (the classical Berens model).
    Log,
    /// Box-Cox with `λ` chosen by profile likelihood on `[-2, 2]`.
    BoxCox,
    /// Box-Cox with a given `λ`.
    Fixed(f64),
}

/// `(y^λ − 1)/λ`, with the logarithm at `λ = 0`.
pub fn box_cox(y: f64, lambda: f64) -> f64 {
    if lambda.abs() < 1e-12 {
        y.ln()
    } else {
        (lambda * y.ln()).exp_m1() / lambda
    }
}

fn box_cox_checked(y: f64, lambda: f64) -> Option<f64> {
    if y > 0.0 {
        return Some(box_cox(y, lambda));
    }
    // negative values only make sense for positive integer powers
    if lambda > 0.0 && lambda.fract() == 0.0 {
        return Some((y.powi(lambda as i32) - 1.0) / lambda);
    }
    None
}

/// Fitted Berens model `FRC(a) = Φ((a − α)/β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerensFit {
    pub alpha: f64,
    pub beta: f64,
    pub beta0: f64,
    pub beta1: f64,
    /// Residual standard deviation (maximum-likelihood, divisor `N`).
    pub sigma: f64,
    /// Box-Cox exponent; `0` for the log transform.
    pub lambda: f64,
    pub threshold: f64,
    /// Threshold on the transformed scale.
    pub threshold_transformed: f64,
    /// Asymptotic covariance of `(β0, β1, σ)`, row-major.
    pub covariance: [[f64; 3]; 3],
    /// Delta-method covariance of `(α, β)`, row-major.
    pub alpha_beta_covariance: [[f64; 2]; 2],
    pub n: usize,
}

struct Regression {
    beta0: f64,
    beta1: f64,
    sigma2: f64,
}

fn regress(a: &[f64], t: &[f64]) -> Regression {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let sxx: f64 = a.iter().map(|v| (v - ma) * (v - ma)).sum();
    let sxy: f64 = a.iter().zip(t).map(|(x, y)| (x - ma) * (y - mt)).sum();
    let beta1 = sxy / sxx;
    let beta0 = mt - beta1 * ma;
    let sigma2 = a.iter().zip(t).map(|(x, y)| (y - beta0 - beta1 * x).powi(2)).sum::<f64>() / n;
    Regression { beta0, beta1, sigma2 }
}

fn box_cox_profile(a: &[f64], y: &[f64], log_sum: f64, lambda: f64) -> f64 {
    let t: Vec<f64> = y.iter().map(|&v| box_cox(v, lambda)).collect();
    let r = regress(a, &t);
    -0.5 * a.len() as f64 * r.sigma2.ln() + (lambda - 1.0) * log_sum
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Fits the Berens model to `(a_i, y_i)` pairs for threshold `s`.
pub fn fit_berens(a: &[f64], y: &[f64], s: f64, transform: Transform) -> Result<BerensFit> {
    if a.len() != y.len() {
        return invalid("a and y have different lengths");
    }
    if a.len() < 5 {
        return invalid(format!("at least 5 pairs are needed, got {}", a.len()));
    }
    if a.iter().chain(y).any(|v| !v.is_finite()) || !s.is_finite() {
        return invalid("inputs must be finite");
    }
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if amax <= amin {
        return invalid("all a values are equal");
    }
    let lambda = match transform {
        Transform::Log => 0.0,
        Transform::Fixed(l) => {
            if !l.is_finite() {
                return invalid("Box-Cox exponent must be finite");
            }
            l
        }
        Transform::BoxCox => {
            if y.iter().any(|&v| v <= 0.0) {
                return invalid("Box-Cox profile likelihood needs positive responses");
            }
            let log_sum: f64 = y.iter().map(|v| v.ln()).sum();
            let grid = numerics::linspace(-2.0, 2.0, 41);
            let vals: Vec<f64> = grid.iter().map(|&l| box_cox_profile(a, y, log_sum, l)).collect();
            let k = (0..grid.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
            let lo = grid[k.saturating_sub(1)];
            let hi = grid[(k + 1).min(grid.len() - 1)];
            golden_max(|l| box_cox_profile(a, y, log_sum, l), lo, hi, 1e-8)
        }
    };
    let mut t = Vec::with_capacity(y.len());
    for &v in y {
        match box_cox_checked(v, lambda) {
            Some(x) => t.push(x),
            None => return invalid(format!("response {v} cannot be transformed with lambda = {lambda}")),
        }
    }
    let s_t = box_cox_checked(s, lambda)
        .ok_or_else(|| Error::InvalidArgument(format!("threshold {s} cannot be transformed with lambda = {lambda}")))?;
    let reg = regress(a, &t);
    if !(reg.sigma2 > 0.0) {
        return Err(Error::DegenerateVariance("regression residuals are all zero".into()));
    }
    if !(reg.beta1 > 0.0) {
        return Err(Error::DegenerateVariance(format!(
            "slope {} is not positive; the curve is not increasing in a",
            reg.beta1
        )));
    }
    let n = a.len() as f64;
    let sigma = reg.sigma2.sqrt();
    // (XᵀX)⁻¹ for the design (1, a)
    let sa: f64 = a.iter().sum();
    let saa: f64 = a.iter().map(|v| v * v).sum();
    let xtx = Matrix2::new(n, sa, sa, saa);
    let xtx_inv = xtx.try_inverse().ok_or_else(|| Error::InvalidArgument("a values are degenerate".into()))?;
    let mut cov = Matrix3::zeros();
    for i in 0..2 {
        for j in 0..2 {
            cov[(i, j)] = reg.sigma2 * xtx_inv[(i, j)];
        }
    }
    cov[(2, 2)] = reg.sigma2 / (2.0 * n);
    let alpha = (s_t - reg.beta0) / reg.beta1;
    let beta = sigma / reg.beta1;
    // Jacobian of (α, β) with respect to (β0, β1, σ)
    let jac = nalgebra::Matrix2x3::new(
        -1.0 / reg.beta1,
        -alpha / reg.beta1,
        0.0,
        0.0,
        -beta / reg.beta1,
        1.0 / reg.beta1,
    );
    let ab = jac * cov * jac.transpose();
    let to3 = |m: &Matrix3<f64>| [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]];
    Ok(BerensFit {
        alpha,
        beta,
        beta0: reg.beta0,
        beta1: reg.beta1,
        sigma,
        lambda,
        threshold: s,
        threshold_transformed: s_t,
        covariance: to3(&cov),
        alpha_beta_covariance: [[ab[(0, 0)], ab[(0, 1)]], [ab[(1, 0)], ab[(1, 1)]]],
        n: a.len(),
    })
}

impl BerensFit {
    pub fn frc(&self, a: f64) -> f64 {
        norm_cdf((a - self.alpha) / self.beta)
    }

    fn z(level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return invalid("confidence level must lie in (0, 1)");
        }
        Ok(norm_quantile(0.5 + 0.5 * level))
    }

    /// Two-sided Wald interval for `α`.
    pub fn alpha_interval(&self, level: f64) -> Result<(f64, f64)> {
        let h = Self::z(level)? * self.alpha_beta_covariance[0][0].sqrt();
        Ok((self.alpha - h, self.alpha + h))
    }

    /// Two-sided Wald interval for `β`.
    pub fn beta_interval(&self, level: f64) -> Result<(f64, f64)> {
        let h = Self::z(level)? * self.alpha_beta_covariance[1][1].sqrt();
        Ok((self.beta - h, self.beta + h))
    }

    /// Pointwise interval for the curve at `a`, from the delta method on
    /// the probit `(β0 + β1 a − s̃)/σ`.
    pub fn frc_interval(&self, a: f64, level: f64) -> Result<(f64, f64)> {
        let z = Self::z(level)?;
        let eta = (self.beta0 + self.beta1 * a - self.threshold_transformed) / self.sigma;
        let g = Vector3::new(1.0 / self.sigma, a / self.sigma, -eta / self.sigma);
        let c = Matrix3::from_fn(|i, j| self.covariance[i][j]);
        let sd = (g.transpose() * c * g)[(0, 0)].sqrt();
        Ok((norm_cdf(eta - z * sd), norm_cdf(eta + z * sd)))
    }

    /// Standard errors of `(α, β)`.
    pub fn standard_errors(&self) -> Vector2<f64> {
        Vector2::new(self.alpha_beta_covariance[0][0].sqrt(), self.alpha_beta_covariance[1][1].sqrt())
    }
}

// ---------------------------------------------------------------------------
// Metamodel-based curves

fn validate_grid(a_grid: &[f64]) -> Result<()> {
    if a_grid.is_empty() {
        return invalid("a grid is empty");
    }
    if a_grid.iter().any(|v| !v.is_finite()) {
        return invalid("a grid must be finite");
    }
    if a_grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("a grid must be strictly increasing");
    }
    Ok(())
}

/// Mean curve with Monte-Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    pub a_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// The `x` sample shared by every `a` of a curve computed with `seed`.
pub fn curve_sample(inputs: &InputModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    inputs.sample(n, derive_seed(seed, "x-sample"))
}

fn mean_curve_on_sample<P: Predictor + ?Sized>(predictor: &P, xs: &[Vec<f64>], s: f64, a_grid: &[f64]) -> MeanCurve {
    let n = xs.len() as f64;
    let (values, std_errors) = a_grid
        .iter()
        .map(|&a| {
            let p: Vec<f64> = predictor.predict_at_a(a, xs).iter().map(|p| p.exceedance(s)).collect();
            let (m, v) = numerics::mean_var(&p);
            (m.clamp(0.0, 1.0), (v / n).sqrt())
        })
        .unzip();
    MeanCurve { a_grid: a_grid.to_vec(), values, std_errors }
}

/// `E_X[1 − Φ((s − Ŷ(a, X))/σ_Y(a, X))]` by Monte Carlo over one `x`
/// sample of size `n` shared across the grid.
pub fn frc_mean_gp<P: Predictor + ?Sized>(
    predictor: &P,
    inputs: &InputModel,
    s: f64,
    a_grid: &[f64],
    n: usize,
    seed: u64,
) -> Result<MeanCurve> {
    inputs.validate()?;
    validate_grid(a_grid)?;
    if n < 100 {
        return invalid(format!("n = {n}; at least 100 samples are needed"));
    }
    if s.is_nan() {
        return invalid("threshold is NaN");
    }
    if predictor.input_dim() != inputs.dim() {
        return invalid("predictor and input model dimensions differ");
    }
    let xs = curve_sample(inputs, n, seed);
    Ok(mean_curve_on_sample(predictor, &xs, s, a_grid))
}

/// Confidence band shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "lowercase")]
pub enum BandLevel {
    /// Equal-tailed two-sided band.
    Central(f64),
    /// One-sided lower bound; the upper end is 1.
    Lower(f64),
}

impl BandLevel {
    pub fn level(&self) -> f64 {
        match *self {
            BandLevel::Central(l) | BandLevel::Lower(l) => l,
        }
    }

    /// Probabilities of the lower and (if any) upper quantiles.
    pub fn probabilities(&self) -> (f64, Option<f64>) {
        match *self {
            BandLevel::Central(l) => (0.5 - 0.5 * l, Some(0.5 + 0.5 * l)),
            BandLevel::Lower(l) => (1.0 - l, None),
        }
    }

    pub fn label(&self) -> String {
        let pct = format!("{}", (self.level() * 1000.0).round() / 10.0);
        match self {
            BandLevel::Central(_) => format!("central{pct}"),
            BandLevel::Lower(_) => format!("lower{pct}"),
        }
    }

    fn validate(&self) -> Result<()> {
        let l = self.level();
        if !(l > 0.0 && l < 1.0) {
            return invalid(format!("band level {l} must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandSource {
    GpOnly,
    McOnly,
    Combined,
}

impl BandSource {
    pub fn label(&self) -> &'static str {
        match self {
            BandSource::GpOnly => "gp",
            BandSource::McOnly => "mc",
            BandSource::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub source: BandSource,
    pub level: BandLevel,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleMcSettings {
    /// Size of the `x` sample.
    pub n: usize,
    /// Number of conditional realizations.
    pub m: usize,
    /// Number of normal draws per realization and grid point.
    pub n_clt: usize,
    pub levels: Vec<BandLevel>,
    pub seed: u64,
    /// Point budget of one joint conditional simulation.
    pub max_joint_points: usize,
    /// Pooled samples larger than this use a histogram for quantiles.
    pub exact_pool_limit: usize,
}

impl Default for DoubleMcSettings {
    fn default() -> Self {
        DoubleMcSettings {
            n: 10_000,
            m: 3_000,
            n_clt: 100_000,
            levels: vec![BandLevel::Lower(0.95), BandLevel::Central(0.9)],
            seed: 0,
            max_joint_points: 2_000,
            exact_pool_limit: 4_000_000,
        }
    }
}

/// Estimated curve with bands per source and level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrcCurve {
    pub a_grid: Vec<f64>,
    pub threshold: f64,
    pub point_estimate: Vec<f64>,
    /// Mean curve on the full `x` sample.
    pub mean_curve: Vec<f64>,
    /// Standard deviation of the pooled sample divided by `√m`.
    pub pooled_std_error: Vec<f64>,
    pub bands: Vec<Band>,
    pub settings: DoubleMcSettings,
    /// Realizations were simulated independently per grid point.
    pub pointwise_only: bool,
    /// `x` points per grid value carried by each realization.
    pub simulated_x: usize,
    pub clamped_fraction: f64,
    pub warnings: Vec<String>,
}

/// Draws `n_clt` values from `N(ψ, ψ(1−ψ)/n)` clamped to `[0, 1]`; returns
/// the draws and how many were clamped.
pub fn clt_draws(psi: f64, n: usize, n_clt: usize, rng: &mut rng::Rng) -> (Vec<f64>, usize) {
    let sd = (psi * (1.0 - psi) / n as f64).max(0.0).sqrt();
    let mut clamped = 0;
    let draws = (0..n_clt)
        .map(|_| {
            if sd == 0.0 {
                return psi;
            }
            let z: f64 = StandardNormal.sample(rng);
            let v = psi + sd * z;
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    (draws, clamped)
}

struct PooledSummary {
    mean: f64,
    sd: f64,
    quantiles: Vec<f64>,
    clamped: usize,
}

const HISTOGRAM_BINS: usize = 1 << 22;

/// Mean, standard deviation and quantiles of the pooled CLT sample at one
/// grid point; realization `j` uses random stream `j` of `seed`.
fn pooled_summary(psi: &[f64], n: usize, n_clt: usize, seed: u64, probs: &[f64], exact_limit: usize) -> PooledSummary {
    let total = psi.len() * n_clt;
    let mut clamped = 0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let exact = total <= exact_limit;
    let mut pool = Vec::with_capacity(if exact { total } else { 0 });
    let mut counts = if exact { vec![] } else { vec![0u32; HISTOGRAM_BINS] };
    let (mut zeros, mut ones) = (0usize, 0usize);
    for (j, &p) in psi.iter().enumerate() {
        let mut r = rng::stream(seed, j as u64);
        let (draws, c) = clt_draws(p, n, n_clt, &mut r);
        clamped += c;
        let mut block = 0.0;
        let mut block_sq = 0.0;
        for &v in &draws {
            block += v;
            block_sq += v * v;
        }
        sum += block;
        sum_sq += block_sq;
        if exact {
            pool.extend_from_slice(&draws);
        } else {
            for v in draws {
                if v == 0.0 {
                    zeros += 1;
                } else if v == 1.0 {
                    ones += 1;
                } else {
                    counts[((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
                }
            }
        }
    }
    let mean = sum / total as f64;
    let var = if total > 1 { ((sum_sq - sum * mean) / (total - 1) as f64).max(0.0) } else { 0.0 };
    let quantiles = if exact {
        exact_quantiles(&mut pool, probs)
    } else {
        histogram_quantiles(&counts, zeros, ones, total, probs)
    };
    PooledSummary { mean, sd: var.sqrt(), quantiles, clamped }
}

/// Type-7 quantiles by selection, without a full sort.
fn exact_quantiles(values: &mut [f64], probs: &[f64]) -> Vec<f64> {
    let n = values.len();
    probs
        .iter()
        .map(|&p| {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            let (_, x_lo, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
            let x_lo = *x_lo;
            if frac == 0.0 || rest.is_empty() {
                return x_lo;
            }
            let x_hi = rest.iter().cloned().fold(f64::INFINITY, f64::min);
            x_lo + frac * (x_hi - x_lo)
        })
        .collect()
}

fn histogram_quantiles(counts: &[u32], zeros: usize, ones: usize, total: usize, probs: &[f64]) -> Vec<f64> {
    let width = 1.0 / counts.len() as f64;
    probs
        .iter()
        .map(|&p| {
            let k = ((total - 1) as f64 * p).round() as usize;
            if k < zeros {
                return 0.0;
            }
            if k >= total - ones {
                return 1.0;
            }
            let mut cum = zeros;
            for (b, &c) in counts.iter().enumerate() {
                let c = c as usize;
                if k < cum + c {
                    return (b as f64 + (k - cum) as f64 / c as f64 + 0.5 / c as f64) * width;
                }
                cum += c;
            }
            1.0
        })
        .collect()
}

/// Double Monte-Carlo estimate of the curve with bands separating the
/// metamodel (GP-only), integration (MC-only) and combined uncertainty.
///
/// Realizations are simulated jointly on `grid × x_sim`, where `x_sim` is
/// the first `min(n, max_joint_points/|grid|)` points of the `x` sample.
/// When `x_sim < n`, each realization's fluctuation on the subsample is
/// added to the mean curve of the full sample. If fewer than 50 points per
/// grid value fit in the budget, grid values are simulated independently
/// and the result is flagged `pointwise_only`.
pub fn frc_double_mc(
    gp: &FittedGp,
    inputs: &InputModel,
    s: f64,
    a_grid: &[f64],
    settings: &DoubleMcSettings,
) -> Result<FrcCurve> {
    inputs.validate()?;
    validate_grid(a_grid)?;
    if settings.n == 0 || settings.m == 0 || settings.n_clt == 0 {
        return invalid("n, m and n_CLT must all be at least 1");
    }
    if settings.levels.is_empty() {
        return invalid("at least one band level is required");
    }
    for l in &settings.levels {
        l.validate()?;
    }
    if gp.input_dim() != inputs.dim() {
        return invalid("model and input model dimensions differ");
    }
    if s.is_nan() {
        return invalid("threshold is NaN");
    }
    let (n, m, n_clt) = (settings.n, settings.m, settings.n_clt);
    let seed = settings.seed;
    let xs = curve_sample(inputs, n, seed);
    let mean = mean_curve_on_sample(gp, &xs, s, a_grid);
    let g = a_grid.len();
    let budget = settings.max_joint_points / g;
    let joint = budget >= 50 || budget >= n;
    let n_sim = if joint { n.min(budget) } else { n.min(settings.max_joint_points) };
    let sub = &xs[..n_sim];
    let sim_seed = derive_seed(seed, "realizations");

    // fraction of subsample points above threshold, per grid point and realization
    let mut psi: Vec<Vec<f64>> = vec![vec![0.0; m]; g];
    if joint {
        let mut pa = Vec::with_capacity(g * n_sim);
        let mut px = Vec::with_capacity(g * n_sim);
        for &a in a_grid {
            for x in sub {
                pa.push(a);
                px.push(x.clone());
            }
        }
        let sims = gp.simulate_conditional(&pa, &px, m, sim_seed)?;
        for (k, row) in psi.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let c = (0..n_sim).filter(|&i| sims.values[(j, k * n_sim + i)] > s).count();
                *v = c as f64 / n_sim as f64;
            }
        }
    } else {
        let rows: Vec<Result<Vec<f64>>> = a_grid
            .par_iter()
            .enumerate()
            .map(|(k, &a)| {
                let pa = vec![a; n_sim];
                let sims = gp.simulate_conditional(&pa, sub, m, derive_seed(sim_seed, &format!("a{k}")))?;
                Ok((0..m)
                    .map(|j| (0..n_sim).filter(|&i| sims.values[(j, i)] > s).count() as f64 / n_sim as f64)
                    .collect())
            })
            .collect();
        for (k, r) in rows.into_iter().enumerate() {
            psi[k] = r?;
        }
    }
    if n_sim < n {
        let sub_mean = mean_curve_on_sample(gp, sub, s, a_grid);
        for k in 0..g {
            let shift = mean.values[k] - sub_mean.values[k];
            for v in psi[k].iter_mut() {
                *v = (*v + shift).clamp(0.0, 1.0);
            }
        }
    }

    let mut probs: Vec<f64> = vec![];
    for l in &settings.levels {
        let (lo, hi) = l.probabilities();
        probs.push(lo);
        if let Some(h) = hi {
            probs.push(h);
        }
    }
    probs.sort_by(f64::total_cmp);
    probs.dedup();
    let clt_seed = derive_seed(seed, "clt");
    let summaries: Vec<PooledSummary> = psi
        .par_iter()
        .enumerate()
        .map(|(k, row)| {
            pooled_summary(row, n, n_clt, derive_seed(clt_seed, &format!("a{k}")), &probs, settings.exact_pool_limit)
        })
        .collect();

    let point: Vec<f64> = summaries.iter().map(|p| p.mean.clamp(0.0, 1.0)).collect();
    let pooled_std_error: Vec<f64> = summaries.iter().map(|p| p.sd / (m as f64).sqrt()).collect();
    let q_index = |p: f64| probs.iter().position(|&v| v == p).expect("probability was registered");

    let mut bands = Vec::new();
    for level in &settings.levels {
        let (plo, phi) = level.probabilities();
        let mut gp_lo = vec![0.0; g];
        let mut gp_hi = vec![1.0; g];
        let mut mc_lo = vec![0.0; g];
        let mut mc_hi = vec![1.0; g];
        let mut co_lo = vec![0.0; g];
        let mut co_hi = vec![1.0; g];
        for k in 0..g {
            let mut sorted = psi[k].clone();
            sorted.sort_by(f64::total_cmp);
            let sd_mc = (point[k] * (1.0 - point[k]) / n as f64).sqrt();
            gp_lo[k] = quantile_sorted(&sorted, plo).min(point[k]);
            mc_lo[k] = (point[k] + norm_quantile(plo) * sd_mc).clamp(0.0, 1.0);
            co_lo[k] = summaries[k].quantiles[q_index(plo)].min(gp_lo[k]).min(point[k]);
            if let Some(phi) = phi {
                gp_hi[k] = quantile_sorted(&sorted, phi).max(point[k]);
                mc_hi[k] = (point[k] + norm_quantile(phi) * sd_mc).clamp(0.0, 1.0);
                co_hi[k] = summaries[k].quantiles[q_index(phi)].max(gp_hi[k]).max(point[k]);
            }
        }
        bands.push(Band { source: BandSource::GpOnly, level: *level, lower: gp_lo, upper: gp_hi });
        bands.push(Band { source: BandSource::McOnly, level: *level, lower: mc_lo, upper: mc_hi });
        bands.push(Band { source: BandSource::Combined, level: *level, lower: co_lo, upper: co_hi });
    }

    let clamped: usize = summaries.iter().map(|p| p.clamped).sum();
    let clamped_fraction = clamped as f64 / (g * m * n_clt) as f64;
    let mut warnings = Vec::new();
    if clamped_fraction > 1e-3 {
        let w = format!(
            "{:.3}% of CLT draws fell outside [0, 1] and were clamped; increase n",
            100.0 * clamped_fraction
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    if !joint {
        let w = format!(
            "grid of {g} points exceeds the joint simulation budget; realizations are independent across a (pointwise bands only)"
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(FrcCurve {
        a_grid: a_grid.to_vec(),
        threshold: s,
        point_estimate: point,
        mean_curve: mean.values,
        pooled_std_error,
        bands,
        settings: settings.clone(),
        pointwise_only: !joint,
        simulated_x: n_sim,
        clamped_fraction,
        warnings,
    })
}

impl FrcCurve {
    pub fn band(&self, source: BandSource, level: BandLevel) -> Option<&Band> {
        self.bands.iter().find(|b| b.source == source && b.level == level)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut cols = vec!["a".to_string(), "estimate".to_string()];
        for b in &self.bands {
            cols.push(format!("{}_{}_lower", b.source.label(), b.level.label()));
            cols.push(format!("{}_{}_upper", b.source.label(), b.level.label()));
        }
        cols
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(self.column_names())?;
        for k in 0..self.a_grid.len() {
            let mut row = vec![self.a_grid[k].to_string(), self.point_estimate[k].to_string()];
            for b in &self.bands {
                row.push(b.lower[k].to_string());
                row.push(b.upper[k].to_string());
            }
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `path` as CSV and `path` with extension `.json` as metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_csv(std::fs::File::create(path)?)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.metadata())?)?;
        Ok(())
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "threshold": self.threshold,
            "settings": self.settings,
            "seed": self.settings.seed,
            "pointwise_only": self.pointwise_only,
            "simulated_x": self.simulated_x,
            "clamped_fraction": self.clamped_fraction,
            "warnings": self.warnings,
            "columns": self.column_names(),
        })
    }
}

// ---------------------------------------------------------------------------
// Inversion

/// Abscissa at which a curve first reaches `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseResult {
    pub a: f64,
    /// The curve was not monotone and isotonic regression was applied.
    pub rectified: bool,
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("probability {p} must lie in (0, 1)"));
    }
    Ok(())
}

/// Smallest `a` with `curve(a) ≥ p` on the piecewise-linear interpolant of
/// tabulated values.
pub fn frc_inverse_tabulated(a_grid: &[f64], values: &[f64], p: f64) -> Result<InverseResult> {
    check_p(p)?;
    validate_grid(a_grid)?;
    if values.len() != a_grid.len() {
        return invalid("curve values and grid have different lengths");
    }
    let rectified = !is_non_decreasing(values);
    let v = if rectified {
        log::warn!("curve is not monotone; isotonic regression applied before inversion");
        isotonic_increasing(values)
    } else {
        values.to_vec()
    };
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max < p {
        return Err(Error::LevelNotReached { p, max_attained: max });
    }
    let k = v.iter().position(|&x| x >= p).expect("level is reached");
    if k == 0 {
        return Ok(InverseResult { a: a_grid[0], rectified });
    }
    let (a0, a1, v0, v1) = (a_grid[k - 1], a_grid[k], v[k - 1], v[k]);
    let t = (p - v0) / (v1 - v0);
    Ok(InverseResult { a: a0 + t * (a1 - a0), rectified })
}

/// Inverts the point estimate of a curve.
pub fn frc_inverse(curve: &FrcCurve, p: f64) -> Result<InverseResult> {
    frc_inverse_tabulated(&curve.a_grid, &curve.point_estimate, p)
}

/// Smallest `a` in `[a_min, a_max]` with `f(a) ≥ p` for a callable curve:
/// a probe grid locates the first cell where the running maximum crosses
/// `p`, then bisection refines it to `tol`.
pub fn frc_inverse_fn<F: Fn(f64) -> f64>(f: F, p: f64, a_min: f64, a_max: f64, tol: f64) -> Result<InverseResult> {
    check_p(p)?;
    if !(a_min < a_max) {
        return invalid("a_min must be below a_max");
    }
    const PROBES: usize = 257;
    let grid = numerics::linspace(a_min, a_max, PROBES);
    let vals: Vec<f64> = grid.iter().map(|&a| f(a)).collect();
    let rectified = !is_non_decreasing(&vals);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max < p {
        return Err(Error::LevelNotReached { p, max_attained: max });
    }
    let k = vals.iter().position(|&v| v >= p).expect("level is reached");
    if k == 0 {
        return Ok(InverseResult { a: a_min, rectified });
    }
    let (mut lo, mut hi) = (grid[k - 1], grid[k]);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(InverseResult { a: hi, rectified })
}
