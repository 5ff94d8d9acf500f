//! Perturbed-law based indices of the risk curve.
//!
//! One input marginal `f_i` is replaced by its KL-closest density `f_{i,δ}`
//! meeting a moment constraint, and the curve is re-estimated from the
//! nominal sample by reverse importance sampling:
//!
//! ```text
//! Ψ̂(a)   = mean_k p_k(a)
//! Ψ̂_δ(a) = mean_k p_k(a)·w_k,    w_k = f_{i,δ}(x_{k,i}) / f_i(x_{k,i})
//! S      = (Ψ̂_δ − Ψ̂)/Ψ̂_δ  if Ψ̂_δ ≥ Ψ̂,   (Ψ̂_δ − Ψ̂)/Ψ̂  otherwise
//! ```
//!
//! with `p_k(a) = P(Ŷ(a, x_k) > s)` under the metamodel. `S > 0` means the
//! perturbation raises the curve. Only the weights change between cells,
//! so a whole `(input, δ, a)` grid costs one set of model evaluations.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{kl_tilt, Constraint, InputModel, PerturbationSpec, TiltedDistribution};
use crate::error::{invalid, Error, Result};
use crate::numerics::{norm_quantile, quantiles};
use crate::predictor::{ConditionalFrc, Predictor};
use crate::rng::{self, derive_seed};

/// Smallest effective sample size of the importance weights.
pub const MIN_EFFECTIVE_SAMPLE_SIZE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Delta,
    Bootstrap,
}

/// Which moment of the marginal the grid perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Moment {
    Mean,
    Variance,
}

impl Moment {
    pub fn constraint(self, delta: f64) -> Constraint {
        match self {
            Moment::Mean => Constraint::Mean(delta),
            Moment::Variance => Constraint::Variance(delta),
        }
    }
}

/// `0.1, 0.2, …, 0.9`: mean perturbations of a uniform input on `[0, 1]`,
/// with `0.5` the unperturbed case.
pub fn default_delta_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PliSettings {
    pub n: usize,
    pub seed: u64,
    pub level: f64,
    pub ci: CiMethod,
    /// Replicates for the bootstrap intervals.
    pub bootstrap: usize,
}

impl Default for PliSettings {
    fn default() -> Self {
        PliSettings { n: 100_000, seed: 0, level: 0.95, ci: CiMethod::Delta, bootstrap: 500 }
    }
}

impl PliSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1000 {
            return invalid(format!("n must be at least 1000, got {}", self.n));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return invalid(format!("level must lie in (0, 1), got {}", self.level));
        }
        if self.bootstrap < 100 {
            return invalid(format!("bootstrap must be at least 100, got {}", self.bootstrap));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PliCell {
    pub input_index: usize,
    pub delta: f64,
    pub a: f64,
    pub s_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub effective_sample_size: f64,
    pub psi: f64,
    pub psi_delta: f64,
    /// Monte-Carlo standard errors of `psi` and `psi_delta`.
    pub psi_se: f64,
    pub psi_delta_se: f64,
}

/// A grid cell that could not be estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingCell {
    pub input_index: usize,
    pub delta: f64,
    pub a: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PliResult {
    pub moment: Moment,
    pub threshold: f64,
    pub cells: Vec<PliCell>,
    pub missing: Vec<MissingCell>,
    pub settings: PliSettings,
}

pub const CSV_COLUMNS: [&str; 7] = ["input", "delta", "a", "S", "ci_low", "ci_high", "n_eff"];

impl PliResult {
    pub fn cell(&self, input: usize, delta: f64, a: f64) -> Option<&PliCell> {
        self.cells.iter().find(|c| c.input_index == input && c.delta == delta && c.a == a)
    }

    /// Long format, one row per cell; missing cells have empty values.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut rows: Vec<(usize, f64, f64, Vec<String>)> = self
            .cells
            .iter()
            .map(|c| {
                (
                    c.input_index,
                    c.delta,
                    c.a,
                    vec![
                        c.s_value.to_string(),
                        c.ci_low.to_string(),
                        c.ci_high.to_string(),
                        c.effective_sample_size.to_string(),
                    ],
                )
            })
            .collect();
        rows.extend(self.missing.iter().map(|m| (m.input_index, m.delta, m.a, vec![String::new(); 4])));
        rows.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.total_cmp(&y.2)));
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(CSV_COLUMNS)?;
        for (i, d, a, vals) in rows {
            let mut rec = vec![i.to_string(), d.to_string(), a.to_string()];
            rec.extend(vals);
            w.write_record(rec)?;
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
            "moment": self.moment,
            "threshold": self.threshold,
            "settings": self.settings,
            "seed": self.settings.seed,
            "missing": self.missing,
            "columns": CSV_COLUMNS,
        })
    }
}

/// Piecewise index: the difference relative to the larger probability.
pub fn pli_index(psi: f64, psi_delta: f64) -> f64 {
    if psi_delta >= psi {
        if psi_delta == 0.0 {
            0.0
        } else {
            (psi_delta - psi) / psi_delta
        }
    } else {
        (psi_delta - psi) / psi
    }
}

/// `(Σw)² / Σw²`.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let (s, s2) = w.iter().fold((0.0, 0.0), |(s, s2), &v| (s + v, s2 + v * v));
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Importance weights of the nominal sample for one perturbation.
pub fn perturbation_weights(
    inputs: &InputModel,
    spec: &PerturbationSpec,
    xs: &[Vec<f64>],
) -> Result<(TiltedDistribution, Vec<f64>)> {
    let base = inputs
        .marginals
        .get(spec.input_index)
        .ok_or_else(|| Error::InvalidArgument(format!("input index {} out of range", spec.input_index)))?;
    let tilt = kl_tilt(base, spec.constraint)?;
    let w = xs.iter().map(|x| tilt.likelihood_ratio(x[spec.input_index])).collect::<Result<Vec<f64>>>()?;
    Ok((tilt, w))
}

struct CellInput<'a> {
    input_index: usize,
    delta: f64,
    a: f64,
    p: &'a [f64],
    /// `None` for the unperturbed law.
    w: Option<&'a [f64]>,
    n_eff: f64,
}

fn estimate_cell(c: &CellInput<'_>, settings: &PliSettings) -> PliCell {
    let n = c.p.len() as f64;
    let psi = c.p.iter().sum::<f64>() / n;
    let var_p = c.p.iter().map(|v| (v - psi) * (v - psi)).sum::<f64>() / (n - 1.0);
    let mut cell = PliCell {
        input_index: c.input_index,
        delta: c.delta,
        a: c.a,
        s_value: 0.0,
        ci_low: 0.0,
        ci_high: 0.0,
        effective_sample_size: c.n_eff,
        psi,
        psi_delta: psi,
        psi_se: (var_p / n).sqrt(),
        psi_delta_se: (var_p / n).sqrt(),
    };
    let Some(w) = c.w else {
        return cell;
    };
    let q: Vec<f64> = c.p.iter().zip(w).map(|(p, w)| p * w).collect();
    let psi_d = q.iter().sum::<f64>() / n;
    let var_q = q.iter().map(|v| (v - psi_d) * (v - psi_d)).sum::<f64>() / (n - 1.0);
    let cov = c.p.iter().zip(&q).map(|(p, q)| (p - psi) * (q - psi_d)).sum::<f64>() / (n - 1.0);
    let s = pli_index(psi, psi_d);
    cell.psi_delta = psi_d;
    cell.psi_delta_se = (var_q / n).sqrt();
    cell.s_value = s;

    let z = norm_quantile(0.5 + 0.5 * settings.level);
    let use_bootstrap = settings.ci == CiMethod::Bootstrap || psi_d == psi;
    let (lo, hi) = if !use_bootstrap {
        let (gp, gq) = if psi_d > psi {
            (-1.0 / psi_d, psi / (psi_d * psi_d))
        } else {
            (-psi_d / (psi * psi), 1.0 / psi)
        };
        let var = (gp * gp * var_p + 2.0 * gp * gq * cov + gq * gq * var_q) / n;
        let h = z * var.max(0.0).sqrt();
        (s - h, s + h)
    } else {
        let seed = derive_seed(settings.seed, &format!("bootstrap/{}/{}/{}", c.input_index, c.delta, c.a));
        let len = c.p.len();
        let mut reps: Vec<f64> = (0..settings.bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut r = rng::stream(seed, b as u64);
                let (mut sp, mut sq) = (0.0, 0.0);
                for _ in 0..len {
                    let k = r.random_range(0..len);
                    sp += c.p[k];
                    sq += q[k];
                }
                pli_index(sp / n, sq / n)
            })
            .collect();
        let tail = 0.5 * (1.0 - settings.level);
        let qs = quantiles(&mut reps, &[tail, 1.0 - tail]);
        (qs[0], qs[1])
    };
    cell.ci_low = lo.max(-1.0).min(s);
    cell.ci_high = hi.min(1.0).max(s);
    cell
}

/// Index of one perturbation at one abscissa.
pub fn pli_point<P: Predictor + ?Sized>(
    pred: &P,
    inputs: &InputModel,
    s: f64,
    spec: &PerturbationSpec,
    a: f64,
    settings: &PliSettings,
) -> Result<PliCell> {
    let (mut cells, mut failures) =
        grid_cells(pred, inputs, s, &[spec.input_index], moment_of(spec.constraint), &[spec.constraint.delta()], &[a], settings)?;
    match failures.pop() {
        Some((_, _, e)) => Err(e),
        None => Ok(cells.remove(0)),
    }
}

fn moment_of(c: Constraint) -> Moment {
    match c {
        Constraint::Mean(_) => Moment::Mean,
        Constraint::Variance(_) => Moment::Variance,
    }
}

/// Indices over every `(input, δ, a)` combination from one nominal sample.
///
/// Cells whose perturbation is infeasible or whose weights are too
/// degenerate are listed in `missing` with the reason.
#[allow(clippy::too_many_arguments)]
pub fn pli_grid<P: Predictor + ?Sized>(
    pred: &P,
    inputs: &InputModel,
    s: f64,
    input_indices: &[usize],
    moment: Moment,
    delta_grid: &[f64],
    a_grid: &[f64],
    settings: &PliSettings,
) -> Result<PliResult> {
    let (cells, failures) = grid_cells(pred, inputs, s, input_indices, moment, delta_grid, a_grid, settings)?;
    let missing = failures
        .into_iter()
        .flat_map(|(i, delta, e)| {
            let reason = e.to_string();
            a_grid.iter().map(move |&a| MissingCell { input_index: i, delta, a, reason: reason.clone() })
        })
        .collect();
    Ok(PliResult { moment, threshold: s, cells, missing, settings: *settings })
}

type Failure = (usize, f64, Error);

#[allow(clippy::too_many_arguments)]
fn grid_cells<P: Predictor + ?Sized>(
    pred: &P,
    inputs: &InputModel,
    s: f64,
    input_indices: &[usize],
    moment: Moment,
    delta_grid: &[f64],
    a_grid: &[f64],
    settings: &PliSettings,
) -> Result<(Vec<PliCell>, Vec<Failure>)> {
    settings.validate()?;
    inputs.validate()?;
    if pred.input_dim() != inputs.dim() {
        return invalid(format!(
            "model has {} inputs but the input model has {}",
            pred.input_dim(),
            inputs.dim()
        ));
    }
    if let Some(&i) = input_indices.iter().find(|&&i| i >= inputs.dim()) {
        return invalid(format!("input index {i} out of range"));
    }
    if a_grid.is_empty() || delta_grid.is_empty() || input_indices.is_empty() {
        return invalid("inputs, delta grid and a grid must be non-empty");
    }
    let xs = inputs.sample(settings.n, derive_seed(settings.seed, "x-sample"));
    let cond = ConditionalFrc::new(pred, s);
    let probs: Vec<Vec<f64>> = a_grid.iter().map(|&a| cond.eval_at_a(a, &xs)).collect();

    let mut failures = Vec::new();
    let mut jobs: Vec<(usize, f64, Option<Vec<f64>>, f64)> = Vec::new();
    for &i in input_indices {
        for &delta in delta_grid {
            let spec = PerturbationSpec { input_index: i, constraint: moment.constraint(delta) };
            match perturbation_weights(inputs, &spec, &xs) {
                Err(e) => {
                    log::warn!("input {i}, delta {delta}: {e}");
                    failures.push((i, delta, e))
                }
                Ok((tilt, w)) => {
                    if tilt.is_identity() {
                        jobs.push((i, delta, None, settings.n as f64));
                        continue;
                    }
                    let n_eff = effective_sample_size(&w);
                    if n_eff < MIN_EFFECTIVE_SAMPLE_SIZE {
                        let e = Error::WeightDegeneracy { n_eff, min: MIN_EFFECTIVE_SAMPLE_SIZE };
                        log::warn!("input {i}, delta {delta}: {e}");
                        failures.push((i, delta, e));
                    } else {
                        jobs.push((i, delta, Some(w), n_eff));
                    }
                }
            }
        }
    }
    let cell_inputs: Vec<CellInput<'_>> = jobs
        .iter()
        .flat_map(|(i, delta, w, n_eff)| {
            a_grid.iter().zip(&probs).map(move |(&a, p)| CellInput {
                input_index: *i,
                delta: *delta,
                a,
                p,
                w: w.as_deref(),
                n_eff: *n_eff,
            })
        })
        .collect();
    let cells = cell_inputs.par_iter().map(|c| estimate_cell(c, settings)).collect();
    Ok((cells, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ScalarDistribution;
    use crate::testbed::AnalyticModel;

    fn uniform_case() -> (AnalyticModel, InputModel) {
        let model = AnalyticModel::linear(0.0, 1.0, vec![1.0, 0.5]);
        let inputs = InputModel::new(vec![ScalarDistribution::uniform(0.0, 1.0).unwrap(); 2], (0.0, 2.0)).unwrap();
        (model, inputs)
    }

    #[test]
    fn piecewise_index_range_and_sign() {
        assert_eq!(pli_index(0.5, 0.5), 0.0);
        assert_eq!(pli_index(0.0, 0.0), 0.0);
        assert!((pli_index(0.2, 0.4) - 0.5).abs() < 1e-15);
        assert!((pli_index(0.4, 0.2) + 0.5).abs() < 1e-15);
        assert_eq!(pli_index(0.3, 0.0), -1.0);
        assert_eq!(effective_sample_size(&[1.0; 10]), 10.0);
        assert_eq!(effective_sample_size(&[0.0, 0.0, 5.0]), 1.0);
    }

    #[test]
    fn nominal_column_is_exactly_zero() {
        let (m, im) = uniform_case();
        for ci in [CiMethod::Delta, CiMethod::Bootstrap] {
            let st = PliSettings { n: 2000, ci, seed: 3, ..Default::default() };
            let r = pli_grid(&m, &im, 1.5, &[0, 1], Moment::Mean, &default_delta_grid(), &[0.5, 1.0], &st)
                .unwrap();
            assert!(r.missing.is_empty());
            assert_eq!(r.cells.len(), 2 * 9 * 2);
            for c in r.cells.iter().filter(|c| c.delta == 0.5) {
                assert_eq!((c.s_value, c.ci_low, c.ci_high), (0.0, 0.0, 0.0));
            }
            for c in &r.cells {
                assert!(c.ci_low <= c.s_value && c.s_value <= c.ci_high);
                assert!(c.s_value > -1.0 && c.s_value < 1.0);
                assert_eq!(c.s_value > 0.0, c.psi_delta > c.psi);
            }
        }
    }

    #[test]
    fn infeasible_and_degenerate_cells_are_missing() {
        let (m, im) = uniform_case();
        let st = PliSettings { n: 1000, ..Default::default() };
        let r = pli_grid(&m, &im, 1.5, &[0], Moment::Mean, &[0.3, 1.5, 0.999], &[1.0], &st).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.missing.len(), 2);
        assert!(r.missing[0].reason.contains("infeasible"));
        assert!(r.missing[1].reason.contains("too far in the tail"));
        let spec = PerturbationSpec { input_index: 0, constraint: Constraint::Mean(0.999) };
        assert!(pli_point(&m, &im, 1.5, &spec, 1.0, &st).is_err());
        let small = PliSettings { n: 999, ..Default::default() };
        assert!(pli_grid(&m, &im, 1.5, &[0], Moment::Mean, &[0.3], &[1.0], &small).is_err());
    }

    #[test]
    fn csv_is_sorted_long_format() {
        let (m, im) = uniform_case();
        let st = PliSettings { n: 1000, ..Default::default() };
        let r = pli_grid(&m, &im, 1.5, &[1, 0], Moment::Mean, &[0.999, 0.3], &[1.0, 0.5], &st).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "input,delta,a,S,ci_low,ci_high,n_eff");
        assert_eq!(lines.len(), 9);
        assert!(lines[1].starts_with("0,0.3,0.5,"));
        assert_eq!(lines[3], "0,0.999,0.5,,,,");
    }
}
