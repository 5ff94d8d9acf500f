use std::path::{Path, PathBuf};

use frc_core::distributions::InputModel;
use frc_core::frc::{BandLevel, DoubleMcSettings, Transform};
use frc_core::gp::NuggetPolicy;
use frc_core::numerics::linspace;
use frc_core::pli::{default_delta_grid, CiMethod, Moment, PliSettings};
use frc_core::sobol::SobolSettings;
use frc_core::testbed::{AnalyticModel, DesignScheme};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Points used when no `a` grid is configured.
pub const DEFAULT_GRID_POINTS: usize = 21;

/// A grid of `a` values, either listed or evenly spaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Points(Vec<f64>),
    Range { from: f64, to: f64, points: usize },
}

impl GridSpec {
    pub fn values(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = match *self {
            GridSpec::Points(ref p) => p.clone(),
            GridSpec::Range { from, to, points } => {
                if points < 2 {
                    return Err(CliError::config(key, "a range needs at least 2 points"));
                }
                linspace(from, to, points)
            }
        };
        if v.is_empty() || v.iter().any(|a| !a.is_finite()) {
            return Err(CliError::config(key, "grid values must be finite and non-empty"));
        }
        if !v.windows(2).all(|w| w[0] < w[1]) {
            return Err(CliError::config(key, "grid values must be strictly increasing"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub n: usize,
    pub scheme: DesignScheme,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig { n: 50, scheme: DesignScheme::Lhs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub trend: bool,
    pub nugget: NuggetPolicy,
    pub multistarts: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        let d = frc_core::gp::FitOptions::default();
        GpConfig {
            trend: d.trend,
            nugget: d.nugget,
            multistarts: d.multistarts,
            max_iterations: d.max_iterations,
            tolerance: d.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub a_grid: Option<GridSpec>,
    pub n: usize,
    pub m: usize,
    pub n_clt: usize,
    pub levels: Vec<BandLevel>,
    pub max_joint_points: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        let d = DoubleMcSettings::default();
        CurveConfig {
            a_grid: None,
            n: d.n,
            m: d.m,
            n_clt: d.n_clt,
            levels: d.levels,
            max_joint_points: d.max_joint_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BerensConfig {
    pub transform: Transform,
    pub level: f64,
    pub a_grid: Option<GridSpec>,
}

impl Default for BerensConfig {
    fn default() -> Self {
        BerensConfig { transform: Transform::Log, level: 0.95, a_grid: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlavorName {
    Aggregated,
    Pointwise,
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SobolConfig {
    pub flavor: FlavorName,
    /// Abscissa of the pointwise flavor.
    pub a: Option<f64>,
    /// Level of the inverse flavor.
    pub p: Option<f64>,
    /// Integration grid of the aggregated flavor.
    pub a_grid: Option<GridSpec>,
    pub n_pf: usize,
    pub bootstrap: usize,
    pub level: f64,
}

impl Default for SobolConfig {
    fn default() -> Self {
        let d = SobolSettings::default();
        SobolConfig {
            flavor: FlavorName::Aggregated,
            a: None,
            p: None,
            a_grid: None,
            n_pf: d.n_pf,
            bootstrap: d.bootstrap,
            level: d.level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PliConfig {
    /// Perturbed inputs (0-based); all inputs when absent.
    pub inputs: Option<Vec<usize>>,
    pub moment: Moment,
    pub delta_grid: Option<Vec<f64>>,
    pub a: Option<f64>,
    pub a_grid: Option<GridSpec>,
    pub n: usize,
    pub ci: CiMethod,
    pub bootstrap: usize,
    pub level: f64,
}

impl Default for PliConfig {
    fn default() -> Self {
        let d = PliSettings::default();
        PliConfig {
            inputs: None,
            moment: Moment::Mean,
            delta_grid: None,
            a: None,
            a_grid: None,
            n: d.n,
            ci: d.ci,
            bootstrap: d.bootstrap,
            level: d.level,
        }
    }
}

/// One run's configuration. Relative paths are taken from the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub inputs: Option<InputModel>,
    pub threshold: Option<f64>,
    /// Design CSV; `<output_dir>/design.csv` when absent.
    pub dataset: Option<PathBuf>,
    /// Fitted model; `<output_dir>/model.json` when absent.
    pub model: Option<PathBuf>,
    /// Analytic simulator for `simulate-design` and `oracle`.
    pub analytic: Option<AnalyticModel>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default)]
    pub berens: BerensConfig,
    #[serde(default)]
    pub sobol: SobolConfig,
    #[serde(default)]
    pub pli: PliConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Parses `KEY=VALUE`; the value is read as JSON, or as a string when it
/// is not valid JSON.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(s, "expected KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Sets the dotted path `key` in `doc`, creating objects as needed.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "malformed key"));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(key, format!("`{part}` is inside a non-object value")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::config(key, "parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads the configuration file (if any), applies the overrides in
    /// order and deserializes the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(CliError::config("--config", "the configuration must be a JSON object"));
        }
        for (k, v) in overrides {
            set_path(&mut doc, k, v.clone())?;
        }
        serde_path_to_error::deserialize(doc).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(&key, e.into_inner().to_string())
        })
    }

    pub fn inputs(&self) -> Result<&InputModel, CliError> {
        let m = self.inputs.as_ref().ok_or_else(|| CliError::config("inputs", "missing"))?;
        m.validate().map_err(|e| CliError::config("inputs", e.to_string()))?;
        Ok(m)
    }

    pub fn threshold(&self) -> Result<f64, CliError> {
        match self.threshold {
            Some(s) if s.is_finite() => Ok(s),
            Some(s) => Err(CliError::config("threshold", format!("must be finite, got {s}"))),
            None => Err(CliError::config("threshold", "missing")),
        }
    }

    pub fn analytic(&self) -> Result<&AnalyticModel, CliError> {
        self.analytic.as_ref().ok_or_else(|| CliError::config("analytic", "missing"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.output_dir.join("design.csv"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.output_dir.join("model.json"))
    }

    fn default_grid(&self) -> Option<GridSpec> {
        self.inputs.as_ref().map(|m| GridSpec::Range {
            from: m.a_bounds.0,
            to: m.a_bounds.1,
            points: DEFAULT_GRID_POINTS,
        })
    }

    pub fn curve_grid(&self) -> Result<Vec<f64>, CliError> {
        grid_or_missing(&self.curve.a_grid, "curve.a_grid")
    }

    /// Copy with every default that can be determined written out.
    pub fn resolved(&self) -> RunConfig {
        let mut r = self.clone();
        r.dataset = Some(self.dataset_path());
        r.model = Some(self.model_path());
        if r.curve.a_grid.is_none() {
            r.curve.a_grid = self.default_grid();
        }
        if r.berens.a_grid.is_none() {
            r.berens.a_grid = r.curve.a_grid.clone();
        }
        if r.sobol.a_grid.is_none() {
            r.sobol.a_grid = r.curve.a_grid.clone();
        }
        if r.sobol.flavor == FlavorName::Inverse && r.sobol.p.is_none() {
            r.sobol.p = Some(0.9);
        }
        if r.pli.inputs.is_none() {
            r.pli.inputs = self.inputs.as_ref().map(|m| (0..m.dim()).collect());
        }
        if r.pli.delta_grid.is_none() {
            r.pli.delta_grid = Some(default_delta_grid());
        }
        r
    }
}

pub fn grid_or_missing(spec: &Option<GridSpec>, key: &str) -> Result<Vec<f64>, CliError> {
    spec.as_ref()
        .ok_or_else(|| CliError::config(key, "missing (and no inputs.a_bounds to default from)"))?
        .values(key)
}
