//! The response model seen by the curve and sensitivity estimators: a
//! Gaussian predictive distribution `N(mean, variance)` of `Y(a, x)`.

/// Predictive mean and variance at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn sd(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }

    /// `P(Y > s)` under the predictive law; an indicator when the variance
    /// is zero.
    pub fn exceedance(&self, threshold: f64) -> f64 {
        crate::numerics::exceedance(self.mean, self.sd(), threshold)
    }
}

pub trait Predictor: Sync {
    /// Number of uncertain inputs `x` (excluding `a`).
    fn input_dim(&self) -> usize;

    fn predict_point(&self, a: f64, x: &[f64]) -> Prediction;

    /// Predictions at `(a, x_k)` for every row of `xs`.
    fn predict_at_a(&self, a: f64, xs: &[Vec<f64>]) -> Vec<Prediction> {
        xs.iter().map(|x| self.predict_point(a, x)).collect()
    }

    /// Predictions at arbitrary `(a_k, x_k)` pairs.
    fn predict_points(&self, a: &[f64], xs: &[Vec<f64>]) -> Vec<Prediction> {
        a.iter().zip(xs).map(|(&a, x)| self.predict_point(a, x)).collect()
    }
}

/// The map `(a, x) ↦ P(Y(a, x) > s)`, the conditional risk curve of one
/// input configuration.
#[derive(Clone, Copy)]
pub struct ConditionalFrc<'a, P: Predictor + ?Sized> {
    pub predictor: &'a P,
    pub threshold: f64,
}

impl<'a, P: Predictor + ?Sized> ConditionalFrc<'a, P> {
    pub fn new(predictor: &'a P, threshold: f64) -> Self {
        ConditionalFrc { predictor, threshold }
    }

    pub fn eval(&self, a: f64, x: &[f64]) -> f64 {
        self.predictor.predict_point(a, x).exceedance(self.threshold)
    }

    pub fn eval_at_a(&self, a: f64, xs: &[Vec<f64>]) -> Vec<f64> {
        self.predictor
            .predict_at_a(a, xs)
            .into_iter()
            .map(|p| p.exceedance(self.threshold))
            .collect()
    }
}
