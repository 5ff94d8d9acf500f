//! Variance-based sensitivity of the risk curve by pick-freeze sampling.
//!
//! Two independent input samples `X`, `X'` of size `n` and, for each input
//! `i`, the mixed sample `X⁽ⁱ⁾` (column `i` from `X`, the others from `X'`)
//! give `Y = f(X)`, `Y' = f(X')` and `Y⁽ⁱ⁾ = f(X⁽ⁱ⁾)`. At each evaluation
//! point, with `c` the pooled mean of `Y` and `Y'`:
//!
//! ```text
//! V_i = mean[(Y − c)(Y⁽ⁱ⁾ − Y')]       estimates Var E[f | X_i]
//! W_i = ½ mean[(Y' − Y⁽ⁱ⁾)²]           estimates E Var[f | X_{-i}]
//! D   = ½ mean[(Y − c)² + (Y' − c)²]   estimates Var f
//! ```
//!
//! `Y` and `Y⁽ⁱ⁾` share `X_i` (centered covariance form); `Y'` and `Y⁽ⁱ⁾`
//! share `X_{-i}` (Jansen form). For a curve-valued output the three
//! numerators are integrated over the abscissa with trapezoid weights
//! before the ratios `S_i = V_i / D` and `T_i = W_i / D` are taken.
//!
//! Every estimator is a sample mean of per-sample contributions, so the
//! bootstrap resamples those contributions; the centering constant `c`
//! stays at its full-sample value across replicates.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::InputModel;
use crate::error::{invalid, Error, Result};
use crate::numerics::{self, isotonic_increasing, quantiles, trapezoid_weights};
use crate::predictor::{ConditionalFrc, Predictor};
use crate::rng::{self, derive_seed};

/// Output variances below this are treated as zero for risk-curve values,
/// which live in `[0, 1]`.
pub const MIN_CURVE_VARIANCE: f64 = 1e-10;

/// Fraction of samples allowed to miss the target level in the inverse
/// flavor before the analysis is refused.
pub const MAX_NON_CROSSING: f64 = 0.05;

const INVERSE_PROBES: usize = 65;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SobolFlavor {
    Aggregated,
    Pointwise { a: f64 },
    Inverse { p: f64 },
}

impl SobolFlavor {
    pub fn label(&self) -> &'static str {
        match self {
            SobolFlavor::Aggregated => "aggregated",
            SobolFlavor::Pointwise { .. } => "pointwise",
            SobolFlavor::Inverse { .. } => "inverse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SobolSettings {
    /// Size of each pick-freeze sample.
    pub n_pf: usize,
    /// Bootstrap replicates.
    pub bootstrap: usize,
    /// Confidence level of the percentile intervals.
    pub level: f64,
    pub seed: u64,
}

impl Default for SobolSettings {
    fn default() -> Self {
        SobolSettings { n_pf: 10_000, bootstrap: 500, level: 0.95, seed: 0 }
    }
}

impl SobolSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_pf < 100 {
            return invalid(format!("n_pf must be at least 100, got {}", self.n_pf));
        }
        if self.bootstrap < 100 {
            return invalid(format!("bootstrap must be at least 100, got {}", self.bootstrap));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return invalid(format!("level must lie in (0, 1), got {}", self.level));
        }
        Ok(())
    }
}

/// Indices of one input. Estimates are raw and may fall slightly outside
/// `[0, 1]`; the `*_display` accessors clip them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolIndex {
    pub input: usize,
    pub first: f64,
    pub first_ci: (f64, f64),
    pub first_se: f64,
    pub total: f64,
    pub total_ci: (f64, f64),
    pub total_se: f64,
}

impl SobolIndex {
    pub fn first_display(&self) -> f64 {
        self.first.clamp(0.0, 1.0)
    }

    pub fn total_display(&self) -> f64 {
        self.total.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolResult {
    pub flavor: SobolFlavor,
    pub indices: Vec<SobolIndex>,
    /// Estimated output variance (integrated over `a` when aggregated).
    pub variance: f64,
    pub settings: SobolSettings,
    /// Inverse flavor: share of samples clamped to `a_max`.
    pub non_crossing_fraction: Option<f64>,
    pub warnings: Vec<String>,
}

pub const CSV_COLUMNS: [&str; 8] = ["input", "flavor", "S", "S_lo", "S_hi", "T", "T_lo", "T_hi"];

impl SobolResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(CSV_COLUMNS)?;
        for ix in &self.indices {
            w.write_record([
                ix.input.to_string(),
                self.flavor.label().to_string(),
                ix.first.to_string(),
                ix.first_ci.0.to_string(),
                ix.first_ci.1.to_string(),
                ix.total.to_string(),
                ix.total_ci.0.to_string(),
                ix.total_ci.1.to_string(),
            ])?;
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
        let display: Vec<_> = self
            .indices
            .iter()
            .map(|ix| serde_json::json!({"input": ix.input, "S": ix.first_display(), "T": ix.total_display()}))
            .collect();
        serde_json::json!({
            "flavor": self.flavor,
            "settings": self.settings,
            "seed": self.settings.seed,
            "variance": self.variance,
            "non_crossing_fraction": self.non_crossing_fraction,
            "standard_errors": self.indices.iter().map(|ix| [ix.first_se, ix.total_se]).collect::<Vec<_>>(),
            "display": display,
            "warnings": self.warnings,
            "columns": CSV_COLUMNS,
        })
    }
}

/// The `n·(d + 2)` rows of a pick-freeze design, stacked as `X`, `X'`,
/// `X⁽¹⁾`, …, `X⁽ᵈ⁾`.
#[derive(Debug, Clone)]
pub struct PickFreezeDesign {
    pub n: usize,
    pub d: usize,
    pub rows: Vec<Vec<f64>>,
}

impl PickFreezeDesign {
    pub fn new(inputs: &InputModel, n: usize, seed: u64) -> Self {
        let x = inputs.sample(n, derive_seed(seed, "x"));
        let xp = inputs.sample(n, derive_seed(seed, "x-prime"));
        let d = inputs.dim();
        let mut rows = Vec::with_capacity(n * (d + 2));
        rows.extend(x.iter().cloned());
        rows.extend(xp.iter().cloned());
        for i in 0..d {
            rows.extend(xp.iter().zip(&x).map(|(b, a)| {
                let mut r = b.clone();
                r[i] = a[i];
                r
            }));
        }
        PickFreezeDesign { n, d, rows }
    }
}

/// Point estimates and bootstrap summaries from pick-freeze evaluations.
#[derive(Debug, Clone)]
pub struct PickFreezeEstimate {
    pub indices: Vec<SobolIndex>,
    pub variance: f64,
}

/// Runs the estimators on a curve-valued function of `x`.
///
/// `eval` receives the stacked design rows and returns one vector of row
/// values per entry of `weights`. Fails with a degenerate-variance error
/// naming `context` when the estimated variance is at most `min_variance`.
pub fn pick_freeze<F>(
    inputs: &InputModel,
    weights: &[f64],
    settings: &SobolSettings,
    min_variance: f64,
    context: &str,
    eval: F,
) -> Result<PickFreezeEstimate>
where
    F: FnOnce(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    settings.validate()?;
    let design = PickFreezeDesign::new(inputs, settings.n_pf, settings.seed);
    let values = eval(&design.rows)?;
    if values.len() != weights.len() || values.iter().any(|v| v.len() != design.rows.len()) {
        return invalid("evaluator returned values of the wrong shape");
    }
    let (n, d) = (design.n, design.d);
    // contributions[j] = [d_j, v_1j .. v_dj, w_1j .. w_dj]
    let mut contributions = vec![vec![0.0; 2 * d + 1]; n];
    for (vals, &wk) in values.iter().zip(weights) {
        let (y, yp) = (&vals[..n], &vals[n..2 * n]);
        let c = (y.iter().sum::<f64>() + yp.iter().sum::<f64>()) / (2 * n) as f64;
        for (j, row) in contributions.iter_mut().enumerate() {
            let (a, b) = (y[j] - c, yp[j] - c);
            row[0] += wk * 0.5 * (a * a + b * b);
            for i in 0..d {
                let yi = vals[(2 + i) * n + j];
                row[1 + i] += wk * a * (yi - yp[j]);
                row[1 + d + i] += wk * 0.5 * (yp[j] - yi) * (yp[j] - yi);
            }
        }
    }
    let ratios = |sums: &[f64]| -> Vec<f64> {
        if sums[0] <= 0.0 {
            return vec![0.0; 2 * d];
        }
        sums[1..].iter().map(|s| s / sums[0]).collect()
    };
    let mut totals = vec![0.0; 2 * d + 1];
    for row in &contributions {
        for (t, c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    let variance = totals[0] / n as f64;
    if !(variance > min_variance) {
        return Err(Error::DegenerateVariance(format!("output variance {variance:.3e} {context}")));
    }
    let estimate = ratios(&totals);

    let boot_seed = derive_seed(settings.seed, "bootstrap");
    let replicates: Vec<Vec<f64>> = (0..settings.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(boot_seed, b as u64);
            let mut sums = vec![0.0; 2 * d + 1];
            for _ in 0..n {
                let row = &contributions[r.random_range(0..n)];
                for (s, c) in sums.iter_mut().zip(row) {
                    *s += c;
                }
            }
            ratios(&sums)
        })
        .collect();
    let tail = 0.5 * (1.0 - settings.level);
    let summary: Vec<((f64, f64), f64)> = (0..2 * d)
        .map(|q| {
            let mut col: Vec<f64> = replicates.iter().map(|r| r[q]).collect();
            let (_, var) = numerics::mean_var(&col);
            let qs = quantiles(&mut col, &[tail, 1.0 - tail]);
            ((qs[0].min(estimate[q]), qs[1].max(estimate[q])), var.sqrt())
        })
        .collect();
    let indices = (0..d)
        .map(|i| SobolIndex {
            input: i,
            first: estimate[i],
            first_ci: summary[i].0,
            first_se: summary[i].1,
            total: estimate[d + i],
            total_ci: summary[d + i].0,
            total_se: summary[d + i].1,
        })
        .collect();
    Ok(PickFreezeEstimate { indices, variance })
}

fn check_dims<P: Predictor + ?Sized>(pred: &P, inputs: &InputModel) -> Result<()> {
    inputs.validate()?;
    if pred.input_dim() != inputs.dim() {
        return invalid(format!(
            "model has {} inputs but the input model has {}",
            pred.input_dim(),
            inputs.dim()
        ));
    }
    Ok(())
}

fn finish(flavor: SobolFlavor, est: PickFreezeEstimate, settings: &SobolSettings) -> SobolResult {
    SobolResult {
        flavor,
        indices: est.indices,
        variance: est.variance,
        settings: *settings,
        non_crossing_fraction: None,
        warnings: Vec::new(),
    }
}

/// Aggregated indices of the curve `a ↦ Ψ_X(a)` over `a_grid`.
pub fn sobol_aggregated<P: Predictor + ?Sized>(
    pred: &P,
    inputs: &InputModel,
    s: f64,
    a_grid: &[f64],
    settings: &SobolSettings,
) -> Result<SobolResult> {
    check_dims(pred, inputs)?;
    if a_grid.len() < 2 || !a_grid.windows(2).all(|w| w[0] < w[1]) {
        return invalid("a_grid needs at least two strictly increasing points");
    }
    let cond = ConditionalFrc::new(pred, s);
    let weights = trapezoid_weights(a_grid);
    let range = a_grid[a_grid.len() - 1] - a_grid[0];
    let est = pick_freeze(
        inputs,
        &weights,
        settings,
        MIN_CURVE_VARIANCE * range,
        "integrated over the a grid (flat curve, no input influence)",
        |rows| Ok(a_grid.iter().map(|&a| cond.eval_at_a(a, rows)).collect()),
    )?;
    Ok(finish(SobolFlavor::Aggregated, est, settings))
}

/// Indices of the scalar `Ψ_X(a)` at one abscissa.
pub fn sobol_pointwise<P: Predictor + ?Sized>(
    pred: &P,
    inputs: &InputModel,
    s: f64,
    a: f64,
    settings: &SobolSettings,
) -> Result<SobolResult> {
    check_dims(pred, inputs)?;
    if !a.is_finite() {
        return invalid(format!("a must be finite, got {a}"));
    }
    let cond = ConditionalFrc::new(pred, s);
    let est = pick_freeze(
        inputs,
        &[1.0],
        settings,
        MIN_CURVE_VARIANCE,
        &format!("at a = {a} (curve saturated)"),
        |rows| Ok(vec![cond.eval_at_a(a, rows)]),
    )?;
    Ok(finish(SobolFlavor::Pointwise { a }, est, settings))
}

/// Crossing abscissae `a(x) = inf{a : Ψ_x(a) ≥ p}` on `inputs.a_bounds`.
#[derive(Debug, Clone)]
pub struct Crossings {
    pub a: Vec<f64>,
    /// Rows whose curve never reaches `p`; their abscissa is `a_max`.
    pub non_crossing: usize,
}

/// Per-row crossing of level `p`. Each row's curve is probed on a regular
/// grid and made non-decreasing by isotonic regression; the first probe
/// cell where it reaches `p` is then bisected to `1e-6·(a_max − a_min)`.
pub fn crossing_abscissae<P: Predictor + ?Sized>(
    cond: &ConditionalFrc<'_, P>,
    rows: &[Vec<f64>],
    p: f64,
    a_bounds: (f64, f64),
) -> Crossings {
    let (a_min, a_max) = a_bounds;
    let probes = numerics::linspace(a_min, a_max, INVERSE_PROBES);
    let grid_vals: Vec<Vec<f64>> = probes.iter().map(|&a| cond.eval_at_a(a, rows)).collect();
    let mut out = vec![a_max; rows.len()];
    let mut non_crossing = 0;
    let mut active = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for (r, o) in out.iter_mut().enumerate() {
        let curve: Vec<f64> = grid_vals.iter().map(|v| v[r]).collect();
        let rect = isotonic_increasing(&curve);
        match rect.iter().position(|&v| v >= p) {
            None => non_crossing += 1,
            Some(0) => *o = a_min,
            Some(k) => {
                active.push(r);
                lo.push(probes[k - 1]);
                hi.push(probes[k]);
            }
        }
    }
    let tol = 1e-6 * (a_max - a_min);
    let xs: Vec<Vec<f64>> = active.iter().map(|&r| rows[r].clone()).collect();
    let mut width = (a_max - a_min) / (INVERSE_PROBES - 1) as f64;
    while width > tol && !active.is_empty() {
        let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let preds = cond.predictor.predict_points(&mid, &xs);
        for (k, pr) in preds.iter().enumerate() {
            if pr.exceedance(cond.threshold) >= p {
                hi[k] = mid[k];
            } else {
                lo[k] = mid[k];
            }
        }
        width *= 0.5;
    }
    for (k, &r) in active.iter().enumerate() {
        out[r] = hi[k];
    }
    Crossings { a: out, non_crossing }
}

/// Indices of the abscissa `a(X)` at which `Ψ_X` first reaches `p`.
pub fn sobol_inverse<P: Predictor + ?Sized>(
    pred: &P,
    inputs: &InputModel,
    s: f64,
    p: f64,
    settings: &SobolSettings,
) -> Result<SobolResult> {
    check_dims(pred, inputs)?;
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("probability {p} must lie in (0, 1)"));
    }
    let cond = ConditionalFrc::new(pred, s);
    let (a_min, a_max) = inputs.a_bounds;
    let tol = 1e-6 * (a_max - a_min);
    let mut fraction = 0.0;
    let est = pick_freeze(
        inputs,
        &[1.0],
        settings,
        tol * tol,
        &format!("of the crossing abscissa at p = {p}"),
        |rows| {
            let c = crossing_abscissae(&cond, rows, p, inputs.a_bounds);
            fraction = c.non_crossing as f64 / rows.len() as f64;
            if fraction > MAX_NON_CROSSING {
                return Err(Error::NoCrossing { p, fraction });
            }
            Ok(vec![c.a])
        },
    )?;
    let mut res = finish(SobolFlavor::Inverse { p }, est, settings);
    res.non_crossing_fraction = Some(fraction);
    if fraction > 0.0 {
        let w = format!("{fraction:.4} of samples never reach p = {p}; their abscissa was set to a_max = {a_max}");
        log::warn!("{w}");
        res.warnings.push(w);
    }
    Ok(res)
}
