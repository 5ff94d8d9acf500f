//! Python bindings: input models, designs, kriging, risk curves and
//! sensitivity indices. Structured results are returned as plain Python
//! dicts and lists.

use std::sync::Arc;

use frc_core::distributions::{kl_tilt, InputModel, ScalarDistribution, TiltedDistribution};
use frc_core::frc::{self, BandLevel, DoubleMcSettings, Transform};
use frc_core::gp::{self, FitOptions, FittedGp};
use frc_core::pli::{self, CiMethod, Moment, PliSettings};
use frc_core::predictor::{Prediction, Predictor};
use frc_core::sobol::{self, SobolSettings};
use frc_core::testbed::{self, AnalyticModel, DesignMatrix, DesignScheme};
use frc_core::{Error, ErrorClass};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(frcgp, InputError, PyValueError, "Invalid argument, configuration or data.");
create_exception!(frcgp, NumericalError, PyRuntimeError, "A numerical procedure failed.");
create_exception!(frcgp, DegenerateError, PyRuntimeError, "The statistic is undefined for these data.");

fn to_py_err(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Input => InputError::new_err(e.to_string()),
        ErrorClass::Numerical => NumericalError::new_err(e.to_string()),
        ErrorClass::Degenerate => DegenerateError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for frc_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Converts a serializable value into Python objects through JSON.
fn to_python<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| InputError::new_err(format!("unknown {what} {value:?}")))
}

#[pyclass(name = "Marginal", frozen, from_py_object)]
#[derive(Clone)]
struct PyMarginal(ScalarDistribution);

#[pymethods]
impl PyMarginal {
    #[staticmethod]
    fn uniform(lo: f64, hi: f64) -> PyResult<Self> {
        ScalarDistribution::uniform(lo, hi).py_err().map(PyMarginal)
    }

    #[staticmethod]
    fn gaussian(mu: f64, sigma: f64) -> PyResult<Self> {
        ScalarDistribution::gaussian(mu, sigma).py_err().map(PyMarginal)
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn variance(&self) -> f64 {
        self.0.variance()
    }

    fn density(&self, x: f64) -> f64 {
        self.0.density(x)
    }

    fn cdf(&self, x: f64) -> f64 {
        self.0.cdf(x)
    }

    fn quantile(&self, p: f64) -> f64 {
        self.0.quantile(p)
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        self.0.sample(n, seed)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "Tilted", frozen)]
struct PyTilted(TiltedDistribution);

#[pymethods]
impl PyTilted {
    #[getter]
    fn lambda_(&self) -> Vec<f64> {
        self.0.lambda.clone()
    }

    fn is_identity(&self) -> bool {
        self.0.is_identity()
    }

    fn density(&self, x: f64) -> f64 {
        self.0.density(x)
    }

    fn likelihood_ratio(&self, x: f64) -> PyResult<f64> {
        self.0.likelihood_ratio(x).py_err()
    }

    fn kl_divergence(&self) -> f64 {
        self.0.kl_divergence()
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        self.0.sample(n, seed)
    }
}

/// KL-minimal perturbation of `marginal` meeting `moment` ("mean" or
/// "variance") equal to `delta`.
#[pyfunction(name = "kl_tilt")]
fn py_kl_tilt(marginal: &PyMarginal, moment: &str, delta: f64) -> PyResult<PyTilted> {
    let m: Moment = parse("moment", moment)?;
    kl_tilt(&marginal.0, m.constraint(delta)).py_err().map(PyTilted)
}

#[pyclass(name = "InputModel", frozen, from_py_object)]
#[derive(Clone)]
struct PyInputModel(InputModel);

#[pymethods]
impl PyInputModel {
    #[new]
    fn new(marginals: Vec<PyMarginal>, a_bounds: (f64, f64)) -> PyResult<Self> {
        InputModel::new(marginals.into_iter().map(|m| m.0).collect(), a_bounds).py_err().map(PyInputModel)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let m: InputModel = serde_json::from_str(text).map_err(|e| InputError::new_err(e.to_string()))?;
        m.validate().py_err()?;
        Ok(PyInputModel(m))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("input model serializes")
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn a_bounds(&self) -> (f64, f64) {
        self.0.a_bounds
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.0.sample(n, seed)
    }
}

#[pyclass(name = "AnalyticModel", frozen, from_py_object)]
#[derive(Clone)]
struct PyAnalytic(AnalyticModel);

#[pymethods]
impl PyAnalytic {
    /// `y = b0 + b1·a + Σ c_i x_i (+ Σ sine_i sin(π x_i))`.
    #[new]
    #[pyo3(signature = (b0, b1, c, sine=None))]
    fn new(b0: f64, b1: f64, c: Vec<f64>, sine: Option<Vec<f64>>) -> PyResult<Self> {
        let m = AnalyticModel { b0, b1, c, sine };
        m.validate_for(m.c.len()).py_err()?;
        Ok(PyAnalytic(m))
    }

    fn eval(&self, a: f64, x: Vec<f64>) -> f64 {
        self.0.eval(a, &x)
    }

    fn oracle_frc(&self, inputs: &PyInputModel, s: f64, a: f64) -> PyResult<f64> {
        testbed::oracle_frc(&self.0, &inputs.0, s, a).py_err()
    }

    /// Reference Sobol' indices; `flavor` is "aggregated" (needs `a_grid`),
    /// "pointwise" (needs `a`) or "inverse".
    #[pyo3(signature = (inputs, s, flavor, a=None, a_grid=None))]
    fn oracle_sobol(
        &self,
        py: Python<'_>,
        inputs: &PyInputModel,
        s: f64,
        flavor: &str,
        a: Option<f64>,
        a_grid: Option<Vec<f64>>,
    ) -> PyResult<Py<PyAny>> {
        let r = match flavor {
            "aggregated" => {
                let grid = a_grid.ok_or_else(|| InputError::new_err("a_grid is required"))?;
                testbed::oracle_sobol_aggregated(&self.0, &inputs.0, s, &grid)
            }
            "pointwise" => {
                let a = a.ok_or_else(|| InputError::new_err("a is required"))?;
                testbed::oracle_sobol_pointwise(&self.0, &inputs.0, s, a)
            }
            "inverse" => testbed::oracle_sobol_inverse(&self.0, &inputs.0),
            other => return Err(InputError::new_err(format!("unknown flavor {other:?}"))),
        }
        .py_err()?;
        to_python(py, &r)
    }

    fn oracle_pli_mean_shift(&self, inputs: &PyInputModel, s: f64, a: f64, input: usize, delta: f64) -> PyResult<f64> {
        testbed::oracle_pli_mean_shift(&self.0, &inputs.0, s, a, input, delta).py_err()
    }
}

#[pyclass(name = "Design", frozen)]
struct PyDesign(DesignMatrix);

#[pymethods]
impl PyDesign {
    #[new]
    #[pyo3(signature = (a, x, y=None))]
    fn new(a: Vec<f64>, x: Vec<Vec<f64>>, y: Option<Vec<f64>>) -> PyResult<Self> {
        DesignMatrix::new(a, x, y).py_err().map(PyDesign)
    }

    #[staticmethod]
    fn load_csv(path: &str) -> PyResult<Self> {
        DesignMatrix::load_csv(path).py_err().map(PyDesign)
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        self.0.save_csv(path).py_err()
    }

    /// Copy with responses from the analytic model.
    fn evaluate(&self, model: &PyAnalytic) -> PyResult<Self> {
        testbed::evaluate_analytic(&model.0, &self.0).py_err().map(PyDesign)
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.0.a.clone()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.0.x.clone()
    }

    #[getter]
    fn y(&self) -> Option<Vec<f64>> {
        self.0.y.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
#[pyo3(signature = (inputs, n, scheme="lhs", seed=0))]
fn generate_design(inputs: &PyInputModel, n: usize, scheme: &str, seed: u64) -> PyResult<PyDesign> {
    let scheme: DesignScheme = parse("scheme", scheme)?;
    testbed::generate_design(&inputs.0, n, scheme, seed).py_err().map(PyDesign)
}

#[pyclass(name = "GaussianProcess", frozen)]
struct PyGp(Arc<FittedGp>);

#[pymethods]
impl PyGp {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        FittedGp::from_json(text).py_err().map(|g| PyGp(Arc::new(g)))
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().py_err()
    }

    #[getter]
    fn lengthscales(&self) -> Vec<f64> {
        self.0.kernel().lengthscales.clone()
    }

    #[getter]
    fn variance(&self) -> f64 {
        self.0.kernel().variance
    }

    #[getter]
    fn nugget(&self) -> f64 {
        self.0.kernel().nugget
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.0.report().log_likelihood
    }

    /// Kriging mean and variance at the pairs `(a[k], x[k])`.
    fn predict(&self, py: Python<'_>, a: Vec<f64>, x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        if a.len() != x.len() {
            return Err(InputError::new_err("a and x have different lengths"));
        }
        let gp = self.0.clone();
        let p: Vec<Prediction> = py.detach(move || gp.predict_points(&a, &x));
        Ok(p.iter().map(|p| (p.mean, p.variance)).unzip())
    }

    /// `m` joint conditional realizations at the pairs `(a[k], x[k])`.
    fn simulate(&self, py: Python<'_>, a: Vec<f64>, x: Vec<Vec<f64>>, m: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let gp = self.0.clone();
        let r = py.detach(move || gp.simulate_conditional(&a, &x, m, seed)).py_err()?;
        Ok((0..r.values.nrows()).map(|j| r.values.row(j).iter().copied().collect()).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (design, seed=0, multistarts=10, a_bounds=None, trend=true))]
fn fit_gp(
    py: Python<'_>,
    design: &PyDesign,
    seed: u64,
    multistarts: usize,
    a_bounds: Option<(f64, f64)>,
    trend: bool,
) -> PyResult<PyGp> {
    let d = design.0.clone();
    let options = FitOptions { seed, multistarts, a_bounds, trend, ..FitOptions::default() };
    py.detach(move || gp::fit(&d, &options)).py_err().map(|g| PyGp(Arc::new(g)))
}

/// A GP or the noiseless analytic model.
#[derive(Clone)]
enum AnyPredictor {
    Gp(Arc<FittedGp>),
    Analytic(AnalyticModel),
}

impl<'a, 'py> FromPyObject<'a, 'py> for AnyPredictor {
    type Error = PyErr;

    fn extract(obj: Borrowed<'a, 'py, PyAny>) -> PyResult<Self> {
        if let Ok(g) = obj.cast::<PyGp>() {
            return Ok(AnyPredictor::Gp(g.get().0.clone()));
        }
        if let Ok(m) = obj.cast::<PyAnalytic>() {
            return Ok(AnyPredictor::Analytic(m.get().0.clone()));
        }
        Err(InputError::new_err("expected a GaussianProcess or an AnalyticModel"))
    }
}

impl Predictor for AnyPredictor {
    fn input_dim(&self) -> usize {
        match self {
            AnyPredictor::Gp(g) => g.input_dim(),
            AnyPredictor::Analytic(m) => m.input_dim(),
        }
    }

    fn predict_point(&self, a: f64, x: &[f64]) -> Prediction {
        match self {
            AnyPredictor::Gp(g) => g.predict_point(a, x),
            AnyPredictor::Analytic(m) => m.predict_point(a, x),
        }
    }

    fn predict_at_a(&self, a: f64, xs: &[Vec<f64>]) -> Vec<Prediction> {
        match self {
            AnyPredictor::Gp(g) => g.predict_at_a(a, xs),
            AnyPredictor::Analytic(m) => m.predict_at_a(a, xs),
        }
    }

    fn predict_points(&self, a: &[f64], xs: &[Vec<f64>]) -> Vec<Prediction> {
        match self {
            AnyPredictor::Gp(g) => g.predict_points(a, xs),
            AnyPredictor::Analytic(m) => m.predict_points(a, xs),
        }
    }
}

/// Mean risk curve and its Monte-Carlo standard errors.
#[pyfunction]
#[pyo3(signature = (predictor, inputs, s, a_grid, n=10_000, seed=0))]
fn frc_mean(
    py: Python<'_>,
    predictor: AnyPredictor,
    inputs: &PyInputModel,
    s: f64,
    a_grid: Vec<f64>,
    n: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let inputs = inputs.0.clone();
    let c = py.detach(move || frc::frc_mean_gp(&predictor, &inputs, s, &a_grid, n, seed)).py_err()?;
    to_python(py, &c)
}

/// Risk curve with GP-only, MC-only and combined bands; `levels` are
/// `("lower", 0.95)` or `("central", 0.9)` pairs.
#[pyfunction]
#[pyo3(signature = (gp, inputs, s, a_grid, n=10_000, m=3_000, n_clt=100_000, seed=0, levels=None))]
#[allow(clippy::too_many_arguments)]
fn frc_double_mc(
    py: Python<'_>,
    gp: &PyGp,
    inputs: &PyInputModel,
    s: f64,
    a_grid: Vec<f64>,
    n: usize,
    m: usize,
    n_clt: usize,
    seed: u64,
    levels: Option<Vec<(String, f64)>>,
) -> PyResult<Py<PyAny>> {
    let mut settings = DoubleMcSettings { n, m, n_clt, seed, ..DoubleMcSettings::default() };
    if let Some(levels) = levels {
        settings.levels = levels
            .into_iter()
            .map(|(kind, l)| match kind.as_str() {
                "lower" => Ok(BandLevel::Lower(l)),
                "central" => Ok(BandLevel::Central(l)),
                other => Err(InputError::new_err(format!("unknown band kind {other:?}"))),
            })
            .collect::<PyResult<_>>()?;
    }
    let (g, inputs) = (gp.0.clone(), inputs.0.clone());
    let c = py.detach(move || frc::frc_double_mc(&g, &inputs, s, &a_grid, &settings)).py_err()?;
    to_python(py, &c)
}

/// Berens fit; `transform` is "log", "boxcox" or a fixed exponent.
#[pyfunction]
#[pyo3(signature = (a, y, s, transform=None))]
fn fit_berens(py: Python<'_>, a: Vec<f64>, y: Vec<f64>, s: f64, transform: Option<Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let t = match transform {
        None => Transform::Log,
        Some(v) => {
            if let Ok(l) = v.extract::<f64>() {
                Transform::Fixed(l)
            } else {
                match v.extract::<String>()?.as_str() {
                    "log" => Transform::Log,
                    "boxcox" => Transform::BoxCox,
                    other => return Err(InputError::new_err(format!("unknown transform {other:?}"))),
                }
            }
        }
    };
    let f = frc::fit_berens(&a, &y, s, t).py_err()?;
    to_python(py, &f)
}

/// Sobol' indices of the risk curve; `flavor` is "aggregated" (uses
/// `a_grid`), "pointwise" (uses `a`) or "inverse" (uses `p`).
#[pyfunction]
#[pyo3(signature = (predictor, inputs, s, flavor="aggregated", a=None, p=None, a_grid=None, n_pf=10_000, bootstrap=500, level=0.95, seed=0))]
#[allow(clippy::too_many_arguments)]
fn sobol_indices(
    py: Python<'_>,
    predictor: AnyPredictor,
    inputs: &PyInputModel,
    s: f64,
    flavor: &str,
    a: Option<f64>,
    p: Option<f64>,
    a_grid: Option<Vec<f64>>,
    n_pf: usize,
    bootstrap: usize,
    level: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let settings = SobolSettings { n_pf, bootstrap, level, seed };
    let inputs = inputs.0.clone();
    let r = match flavor {
        "aggregated" => {
            let grid = a_grid.ok_or_else(|| InputError::new_err("a_grid is required"))?;
            py.detach(move || sobol::sobol_aggregated(&predictor, &inputs, s, &grid, &settings))
        }
        "pointwise" => {
            let a = a.ok_or_else(|| InputError::new_err("a is required"))?;
            py.detach(move || sobol::sobol_pointwise(&predictor, &inputs, s, a, &settings))
        }
        "inverse" => {
            let p = p.ok_or_else(|| InputError::new_err("p is required"))?;
            py.detach(move || sobol::sobol_inverse(&predictor, &inputs, s, p, &settings))
        }
        other => return Err(InputError::new_err(format!("unknown flavor {other:?}"))),
    }
    .py_err()?;
    to_python(py, &r)
}

/// Perturbed-law indices on the grid `input_indices × delta_grid × a_grid`.
#[pyfunction]
#[pyo3(signature = (predictor, inputs, s, input_indices, delta_grid, a_grid, moment="mean", n=100_000, ci="delta", bootstrap=500, level=0.95, seed=0))]
#[allow(clippy::too_many_arguments)]
fn pli_indices(
    py: Python<'_>,
    predictor: AnyPredictor,
    inputs: &PyInputModel,
    s: f64,
    input_indices: Vec<usize>,
    delta_grid: Vec<f64>,
    a_grid: Vec<f64>,
    moment: &str,
    n: usize,
    ci: &str,
    bootstrap: usize,
    level: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let moment: Moment = parse("moment", moment)?;
    let ci: CiMethod = parse("ci method", ci)?;
    let settings = PliSettings { n, seed, level, ci, bootstrap };
    let inputs = inputs.0.clone();
    let r = py
        .detach(move || pli::pli_grid(&predictor, &inputs, s, &input_indices, moment, &delta_grid, &a_grid, &settings))
        .py_err()?;
    to_python(py, &r)
}

#[pyfunction]
fn derive_seed(master: u64, label: &str) -> u64 {
    frc_core::rng::derive_seed(master, label)
}

#[pymodule]
pub fn frcgp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", frc_core::VERSION)?;
    m.add("InputError", py.get_type::<InputError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add("DegenerateError", py.get_type::<DegenerateError>())?;
    m.add_class::<PyMarginal>()?;
    m.add_class::<PyTilted>()?;
    m.add_class::<PyInputModel>()?;
    m.add_class::<PyAnalytic>()?;
    m.add_class::<PyDesign>()?;
    m.add_class::<PyGp>()?;
    m.add_function(wrap_pyfunction!(py_kl_tilt, m)?)?;
    m.add_function(wrap_pyfunction!(generate_design, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gp, m)?)?;
    m.add_function(wrap_pyfunction!(frc_mean, m)?)?;
    m.add_function(wrap_pyfunction!(frc_double_mc, m)?)?;
    m.add_function(wrap_pyfunction!(fit_berens, m)?)?;
    m.add_function(wrap_pyfunction!(sobol_indices, m)?)?;
    m.add_function(wrap_pyfunction!(pli_indices, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
