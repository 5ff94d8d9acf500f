//! Synthetic data: designs of experiments, an analytic stand-in for the
//! simulator, closed-form reference values for the linear-Gaussian case,
//! and CSV dataset I/O.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distributions::{InputModel, ScalarDistribution};
use crate::error::{invalid, Error, Result};
use crate::numerics::{integrate, norm_pdf, norm_sf, trapezoid_weights};
use crate::predictor::{Prediction, Predictor};
use crate::rng;

/// Training sample: critical parameter `a`, inputs `x` and (optionally)
/// responses `y`, one row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub a: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub y: Option<Vec<f64>>,
}

impl DesignMatrix {
    pub fn new(a: Vec<f64>, x: Vec<Vec<f64>>, y: Option<Vec<f64>>) -> Result<Self> {
        let d = DesignMatrix { a, x, y };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.len() != self.x.len() {
            return invalid(format!("{} a values for {} x rows", self.a.len(), self.x.len()));
        }
        if let Some(first) = self.x.first() {
            if first.is_empty() {
                return invalid("design needs at least one input column");
            }
            if let Some(k) = self.x.iter().position(|r| r.len() != first.len()) {
                return invalid(format!("row {k} has {} inputs, expected {}", self.x[k].len(), first.len()));
            }
        }
        if let Some(y) = &self.y {
            if y.len() != self.a.len() {
                return invalid(format!("{} responses for {} rows", y.len(), self.a.len()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["a".to_string()];
        names.extend((1..=self.input_dim()).map(|i| format!("x{i}")));
        if self.y.is_some() {
            names.push("y".into());
        }
        names
    }

    /// Indices of rows whose `(a, x)` repeats an earlier row.
    pub fn duplicate_rows(&self) -> Vec<(usize, usize)> {
        let mut seen = std::collections::HashMap::new();
        let mut dups = Vec::new();
        for k in 0..self.len() {
            let key: Vec<u64> = std::iter::once(self.a[k]).chain(self.x[k].iter().copied()).map(f64::to_bits).collect();
            if let Some(&first) = seen.get(&key) {
                dups.push((first, k));
            } else {
                seen.insert(key, k);
            }
        }
        dups
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(self.column_names())?;
        for k in 0..self.len() {
            let mut rec = vec![self.a[k].to_string()];
            rec.extend(self.x[k].iter().map(f64::to_string));
            if let Some(y) = &self.y {
                rec.push(y[k].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads a design with header `a, x1, .., xd[, y]` (any column order).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let headers = r.headers()?.clone();
        let mut a_col = None;
        let mut y_col = None;
        let mut x_cols: Vec<(usize, usize)> = Vec::new();
        for (c, h) in headers.iter().enumerate() {
            let h = h.trim();
            if h == "a" {
                a_col = Some(c);
            } else if h == "y" {
                y_col = Some(c);
            } else if let Some(idx) = h.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()).filter(|&i| i >= 1) {
                x_cols.push((idx, c));
            } else {
                return Err(Error::Parse { line: 1, message: format!("unexpected column '{h}'") });
            }
        }
        let a_col = a_col.ok_or_else(|| Error::Parse { line: 1, message: "missing column 'a'".into() })?;
        x_cols.sort();
        if x_cols.is_empty() {
            return Err(Error::Parse { line: 1, message: "missing column 'x1'".into() });
        }
        for (expect, (idx, _)) in x_cols.iter().enumerate() {
            if *idx != expect + 1 {
                return Err(Error::Parse { line: 1, message: format!("missing column 'x{}'", expect + 1) });
            }
        }
        let mut a = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(row + 2, |p| p.line() as usize);
            if rec.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("row {row} has {} fields, header has {}", rec.len(), headers.len()),
                });
            }
            let cell = |c: usize| -> Result<f64> {
                let s = rec[c].trim();
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("row {row}, column '{}': '{s}' is not a number", &headers[c]),
                })
            };
            a.push(cell(a_col)?);
            x.push(x_cols.iter().map(|&(_, c)| cell(c)).collect::<Result<Vec<_>>>()?);
            if let Some(c) = y_col {
                y.push(cell(c)?);
            }
        }
        DesignMatrix::new(a, x, y_col.map(|_| y))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignScheme {
    /// Latin hypercube: one point per stratum in every dimension.
    Lhs,
    /// Independent draws.
    Mc,
}

/// Design over `(a, X)`: `a` uniform on the bounds, `X` from its marginals.
/// Dimension `j` (0 = `a`) uses random stream `j` of `seed`.
pub fn generate_design(model: &InputModel, n: usize, scheme: DesignScheme, seed: u64) -> Result<DesignMatrix> {
    model.validate()?;
    let d = model.dim();
    if n < d + 3 {
        return invalid(format!("design size {n} below the minimum d + 3 = {}", d + 3));
    }
    let (a0, a1) = model.a_bounds;
    let a_law = ScalarDistribution::Uniform { lo: a0, hi: a1 };
    let laws: Vec<ScalarDistribution> = std::iter::once(a_law).chain(model.marginals.iter().copied()).collect();
    let columns: Vec<Vec<f64>> = laws
        .iter()
        .enumerate()
        .map(|(j, law)| {
            let mut rng = rng::stream(seed, j as u64);
            match scheme {
                DesignScheme::Mc => (0..n).map(|_| law.draw(&mut rng)).collect(),
                DesignScheme::Lhs => {
                    let mut strata: Vec<usize> = (0..n).collect();
                    strata.shuffle(&mut rng);
                    strata
                        .into_iter()
                        .map(|k| {
                            // open unit interval keeps Gaussian quantiles finite
                            let u: f64 = rng.random();
                            let p = ((k as f64 + u) / n as f64).clamp(1e-300, 1.0 - f64::EPSILON);
                            law.quantile(p)
                        })
                        .collect()
                }
            }
        })
        .collect();
    let a = columns[0].clone();
    let x = (0..n).map(|k| columns[1..].iter().map(|c| c[k]).collect()).collect();
    DesignMatrix::new(a, x, None)
}

/// `y = b0 + b1·a + Σ c_i·x_i + Σ s_i·sin(π·x_i)`, a cheap stand-in for an
/// expensive simulator. Linear when every sine amplitude is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticModel {
    pub b0: f64,
    pub b1: f64,
    pub c: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sine: Option<Vec<f64>>,
}

impl AnalyticModel {
    pub fn linear(b0: f64, b1: f64, c: Vec<f64>) -> Self {
        AnalyticModel { b0, b1, c, sine: None }
    }

    pub fn is_linear(&self) -> bool {
        self.sine.as_ref().is_none_or(|s| s.iter().all(|&v| v == 0.0))
    }

    pub fn eval(&self, a: f64, x: &[f64]) -> f64 {
        let mut y = self.b0 + self.b1 * a;
        for (c, v) in self.c.iter().zip(x) {
            y += c * v;
        }
        if let Some(s) = &self.sine {
            for (s, v) in s.iter().zip(x) {
                y += s * (std::f64::consts::PI * v).sin();
            }
        }
        y
    }

    pub fn validate_for(&self, d: usize) -> Result<()> {
        if self.c.len() != d {
            return invalid(format!("model has {} coefficients for {d} inputs", self.c.len()));
        }
        if let Some(s) = &self.sine {
            if s.len() != d {
                return invalid(format!("model has {} sine amplitudes for {d} inputs", s.len()));
            }
        }
        Ok(())
    }
}

impl Predictor for AnalyticModel {
    fn input_dim(&self) -> usize {
        self.c.len()
    }

    fn predict_point(&self, a: f64, x: &[f64]) -> Prediction {
        Prediction { mean: self.eval(a, x), variance: 0.0 }
    }
}

/// Fills the response column of `design` with the analytic model.
pub fn evaluate_analytic(model: &AnalyticModel, design: &DesignMatrix) -> Result<DesignMatrix> {
    model.validate_for(design.input_dim())?;
    let y = design.a.iter().zip(&design.x).map(|(&a, x)| model.eval(a, x)).collect();
    Ok(DesignMatrix { a: design.a.clone(), x: design.x.clone(), y: Some(y) })
}

/// Mean and standard deviation of `Y | a` for a linear model with Gaussian
/// inputs.
fn linear_gaussian_moments(model: &AnalyticModel, inputs: &InputModel, a: f64) -> Result<(f64, Vec<f64>)> {
    if !model.is_linear() {
        return invalid("closed-form reference values need a linear model");
    }
    model.validate_for(inputs.dim())?;
    let mut mean = model.b0 + model.b1 * a;
    let mut parts = Vec::with_capacity(inputs.dim());
    for (c, m) in model.c.iter().zip(&inputs.marginals) {
        match *m {
            ScalarDistribution::Gaussian { mu, sigma } => {
                mean += c * mu;
                parts.push(c * c * sigma * sigma);
            }
            _ => return invalid("closed-form reference values need Gaussian inputs"),
        }
    }
    Ok((mean, parts))
}

/// Exact `P(G(a, X) > s)` for a linear model with Gaussian inputs.
pub fn oracle_frc(model: &AnalyticModel, inputs: &InputModel, s: f64, a: f64) -> Result<f64> {
    let (mean, parts) = linear_gaussian_moments(model, inputs, a)?;
    let var: f64 = parts.iter().sum();
    if var == 0.0 {
        return Ok(if mean > s { 1.0 } else { 0.0 });
    }
    Ok(norm_sf((s - mean) / var.sqrt()))
}

/// Brute-force Monte-Carlo estimate of `P(G(a, X) > s)` on the true model.
pub fn oracle_frc_mc(model: &AnalyticModel, inputs: &InputModel, s: f64, a: f64, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return invalid("n must be at least 1");
    }
    model.validate_for(inputs.dim())?;
    let xs = inputs.sample(n, seed);
    let hits = xs.iter().filter(|x| model.eval(a, x) > s).count();
    Ok(hits as f64 / n as f64)
}

/// First-order and total Sobol' indices with their variance numerators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolReference {
    pub first_order: Vec<f64>,
    pub total: Vec<f64>,
    pub first_numerators: Vec<f64>,
    pub total_numerators: Vec<f64>,
    pub variance: f64,
}

const ORACLE_TOL: f64 = 1e-12;

/// Variance decomposition of the indicator `1{G(a, X) > s}` at one `a`
/// for the linear-Gaussian model, by one-dimensional quadrature.
///
/// With `Z_i = c_i (X_i − μ_i) ~ N(0, v_i)`, `V = Σ v_i` and
/// `t = s − E[G(a, X)]`:
/// `Var E[1 | X_i] = E[Φ̄((t − Z_i)/√(V − v_i))²] − P²` and
/// `E Var[1 | X_{-i}] = E[h(1 − h)]` with `h = Φ̄((t − W)/√v_i)`,
/// `W ~ N(0, V − v_i)`.
pub fn oracle_sobol_pointwise(model: &AnalyticModel, inputs: &InputModel, s: f64, a: f64) -> Result<SobolReference> {
    let (mean, parts) = linear_gaussian_moments(model, inputs, a)?;
    let total_var: f64 = parts.iter().sum();
    let t = s - mean;
    if total_var == 0.0 {
        return Err(Error::DegenerateVariance(format!("output is constant at a = {a}")));
    }
    let p = norm_sf(t / total_var.sqrt());
    let var = p * (1.0 - p);
    if var < 1e-14 {
        return Err(Error::DegenerateVariance(format!("indicator variance {var:.2e} at a = {a}")));
    }
    let mut first_num = Vec::with_capacity(parts.len());
    let mut total_num = Vec::with_capacity(parts.len());
    for &vi in &parts {
        let rest = total_var - vi;
        if vi == 0.0 {
            first_num.push(0.0);
            total_num.push(0.0);
            continue;
        }
        if rest <= 0.0 {
            first_num.push(var);
            total_num.push(var);
            continue;
        }
        let (si, sr) = (vi.sqrt(), rest.sqrt());
        let e_g2 = integrate(
            |u| {
                let g = norm_sf((t - si * u) / sr);
                g * g * norm_pdf(u)
            },
            -12.0,
            12.0,
            ORACLE_TOL,
            0.0,
        );
        let e_h = integrate(
            |u| {
                let h = norm_sf((t - sr * u) / si);
                h * (1.0 - h) * norm_pdf(u)
            },
            -12.0,
            12.0,
            ORACLE_TOL,
            0.0,
        );
        first_num.push((e_g2 - p * p).max(0.0));
        total_num.push(e_h.max(0.0));
    }
    Ok(SobolReference {
        first_order: first_num.iter().map(|v| v / var).collect(),
        total: total_num.iter().map(|v| v / var).collect(),
        first_numerators: first_num,
        total_numerators: total_num,
        variance: var,
    })
}

/// Aggregated indices: numerators and denominator integrated over `a` with
/// the trapezoid rule on `a_grid` before taking ratios.
pub fn oracle_sobol_aggregated(model: &AnalyticModel, inputs: &InputModel, s: f64, a_grid: &[f64]) -> Result<SobolReference> {
    let w = trapezoid_weights(a_grid);
    let d = inputs.dim();
    let mut first = vec![0.0; d];
    let mut total = vec![0.0; d];
    let mut den = 0.0;
    for (&a, &wk) in a_grid.iter().zip(&w) {
        let r = match oracle_sobol_pointwise(model, inputs, s, a) {
            Ok(r) => r,
            // saturated grid points carry no variance
            Err(Error::DegenerateVariance(_)) => continue,
            Err(e) => return Err(e),
        };
        den += wk * r.variance;
        for i in 0..d {
            first[i] += wk * r.first_numerators[i];
            total[i] += wk * r.total_numerators[i];
        }
    }
    if den <= 0.0 {
        return Err(Error::DegenerateVariance("no variance anywhere on the grid".into()));
    }
    Ok(SobolReference {
        first_order: first.iter().map(|v| v / den).collect(),
        total: total.iter().map(|v| v / den).collect(),
        first_numerators: first,
        total_numerators: total,
        variance: den,
    })
}

/// Indices of the crossing abscissa `a(X) = (s − b0 − Σ c_i X_i) / b1`,
/// which is linear in `X`: both indices equal `v_i / V`. Clamping of
/// `a(X)` to the bounds is ignored.
pub fn oracle_sobol_inverse(model: &AnalyticModel, inputs: &InputModel) -> Result<SobolReference> {
    let (_, parts) = linear_gaussian_moments(model, inputs, 0.0)?;
    if model.b1 == 0.0 {
        return invalid("crossing abscissa undefined when b1 = 0");
    }
    let v: f64 = parts.iter().sum();
    if v == 0.0 {
        return Err(Error::DegenerateVariance("crossing abscissa is constant".into()));
    }
    let idx: Vec<f64> = parts.iter().map(|p| p / v).collect();
    let scale = 1.0 / (model.b1 * model.b1);
    Ok(SobolReference {
        first_order: idx.clone(),
        total: idx,
        first_numerators: parts.iter().map(|p| p * scale).collect(),
        total_numerators: parts.iter().map(|p| p * scale).collect(),
        variance: v * scale,
    })
}

/// Abscissa where the noiseless linear model crosses the threshold.
pub fn crossing_abscissa(model: &AnalyticModel, x: &[f64], s: f64) -> f64 {
    let lin: f64 = model.c.iter().zip(x).map(|(c, v)| c * v).sum();
    (s - model.b0 - lin) / model.b1
}

/// Exact risk curve after shifting the mean of Gaussian input `input` to
/// `delta` (the KL-minimal mean perturbation of a Gaussian).
pub fn oracle_frc_mean_shift(
    model: &AnalyticModel,
    inputs: &InputModel,
    s: f64,
    a: f64,
    input: usize,
    delta: f64,
) -> Result<f64> {
    let mut shifted = inputs.clone();
    match shifted.marginals.get_mut(input) {
        Some(ScalarDistribution::Gaussian { mu, .. }) => *mu = delta,
        Some(_) => return invalid("mean-shift reference needs a Gaussian input"),
        None => return invalid(format!("input index {input} out of range")),
    }
    oracle_frc(model, &shifted, s, a)
}

/// Exact perturbed-law index for a Gaussian mean shift.
pub fn oracle_pli_mean_shift(
    model: &AnalyticModel,
    inputs: &InputModel,
    s: f64,
    a: f64,
    input: usize,
    delta: f64,
) -> Result<f64> {
    let base = oracle_frc(model, inputs, s, a)?;
    let pert = oracle_frc_mean_shift(model, inputs, s, a, input, delta)?;
    Ok(if pert >= base {
        if pert == 0.0 {
            0.0
        } else {
            (pert - base) / pert
        }
    } else {
        (pert - base) / base
    })
}

/// One reference value, as emitted by the `oracle` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub quantity: String,
    pub value: f64,
    pub method: String,
}

/// Smallest Euclidean distance between two rows (the maximin
/// space-filling criterion; larger is better).
pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i].iter().zip(&points[j]).map(|(u, v)| (u - v) * (u - v)).sum();
            best = best.min(d2);
        }
    }
    best.sqrt()
}

/// Distinct `(a, x)` rows, for checking designs.
pub fn distinct_rows(design: &DesignMatrix) -> usize {
    let mut set = HashSet::new();
    for k in 0..design.len() {
        let key: Vec<u64> = std::iter::once(design.a[k]).chain(design.x[k].iter().copied()).map(f64::to_bits).collect();
        set.insert(key);
    }
    set.len()
}
