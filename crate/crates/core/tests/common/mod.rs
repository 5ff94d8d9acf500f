#![allow(dead_code)]

use frc_core::distributions::{InputModel, ScalarDistribution};
use frc_core::gp::{fit, FitOptions, FittedGp};
use frc_core::numerics::linspace;
use frc_core::testbed::{evaluate_analytic, generate_design, AnalyticModel, DesignScheme};

/// Linear model with three standard-Gaussian inputs; threshold 2 and
/// `a ∈ [0, 4]`, so the curve runs from about 0.04 to 0.96.
pub struct LinearCase {
    pub model: AnalyticModel,
    pub inputs: InputModel,
    pub s: f64,
    pub a_grid: Vec<f64>,
}

pub fn linear_case() -> LinearCase {
    LinearCase {
        model: AnalyticModel::linear(0.0, 1.0, vec![1.0, 0.5, 0.25]),
        inputs: InputModel::new(vec![ScalarDistribution::gaussian(0.0, 1.0).unwrap(); 3], (0.0, 4.0)).unwrap(),
        s: 2.0,
        a_grid: linspace(0.0, 4.0, 21),
    }
}

impl LinearCase {
    pub fn fit_gp(&self, n_train: usize, seed: u64) -> FittedGp {
        let design = generate_design(&self.inputs, n_train, DesignScheme::Lhs, seed).unwrap();
        let design = evaluate_analytic(&self.model, &design).unwrap();
        fit(&design, &FitOptions { seed, a_bounds: Some(self.inputs.a_bounds), ..Default::default() }).unwrap()
    }
}

/// Two standard-Gaussian inputs with unit coefficients; `a` spans ±5.6
/// standard deviations of the crossing abscissa `2 − x0 − x1`.
pub fn sobol_case() -> LinearCase {
    LinearCase {
        model: AnalyticModel::linear(0.0, 1.0, vec![1.0, 1.0]),
        inputs: InputModel::new(vec![ScalarDistribution::gaussian(0.0, 1.0).unwrap(); 2], (-6.0, 10.0)).unwrap(),
        s: 2.0,
        a_grid: linspace(-6.0, 10.0, 33),
    }
}
