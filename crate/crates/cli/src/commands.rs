use std::path::{Path, PathBuf};
use std::time::Instant;

use frc_core::frc::{fit_berens, frc_double_mc, DoubleMcSettings};
use frc_core::gp::{fit, FitOptions, FittedGp};
use frc_core::pli::{pli_grid, Moment, PliSettings};
use frc_core::rng::derive_seed;
use frc_core::sobol::{sobol_aggregated, sobol_inverse, sobol_pointwise, SobolSettings};
use frc_core::testbed::{
    evaluate_analytic, generate_design, oracle_frc, oracle_pli_mean_shift, oracle_sobol_aggregated,
    oracle_sobol_inverse, oracle_sobol_pointwise, DesignMatrix, OracleRecord, SobolReference,
};
use serde_json::{json, Value};

use crate::config::{grid_or_missing, FlavorName, RunConfig};
use crate::error::{CliError, Context};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SimulateDesign,
    FitGp,
    Curve,
    Berens,
    Sobol,
    Pli,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SimulateDesign => "simulate-design",
            Command::FitGp => "fit-gp",
            Command::Curve => "curve",
            Command::Berens => "berens",
            Command::Sobol => "sobol",
            Command::Pli => "pli",
            Command::Oracle => "oracle",
        }
    }
}

/// State shared by the output writers of one invocation.
pub struct Run {
    pub command: Command,
    pub config: RunConfig,
    pub threads: usize,
    started: Instant,
}

/// A CSV table and the command-specific part of its metadata sidecar.
struct Output {
    stem: String,
    csv: Vec<u8>,
    result: Value,
    warnings: Vec<String>,
}

impl Run {
    pub fn new(command: Command, config: RunConfig, threads: usize) -> Self {
        Run { command, config: config.resolved(), threads, started: Instant::now() }
    }

    /// Sub-seed of this command: `derive_seed(master, command name)`.
    pub fn stage_seed(&self) -> u64 {
        derive_seed(self.config.seed, self.command.name())
    }

    /// Executes the command and returns the files written.
    pub fn execute(&self) -> Result<Vec<PathBuf>, CliError> {
        let out_dir = &self.config.output_dir;
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io("output_dir", e))?;
        let resolved = out_dir.join(format!("{}.resolved.json", self.command.name()));
        write_json(&resolved, &serde_json::to_value(&self.config).expect("config serializes"))?;
        let mut written = vec![resolved];
        let outputs = match self.command {
            Command::SimulateDesign => self.simulate_design()?,
            Command::FitGp => self.fit_gp(&mut written)?,
            Command::Curve => self.curve()?,
            Command::Berens => self.berens()?,
            Command::Sobol => self.sobol()?,
            Command::Pli => self.pli()?,
            Command::Oracle => self.oracle()?,
        };
        for o in outputs {
            written.extend(self.write_output(o)?);
        }
        Ok(written)
    }

    fn write_output(&self, o: Output) -> Result<[PathBuf; 2], CliError> {
        let csv_path = self.config.output_dir.join(format!("{}.csv", o.stem));
        std::fs::write(&csv_path, &o.csv).map_err(|e| CliError::io(&csv_path.display().to_string(), e))?;
        let meta = json!({
            "command": self.command.name(),
            "seed": self.config.seed,
            "stage_seed": self.stage_seed(),
            "versions": { "frc-core": frc_core::VERSION, "frc-cli": env!("CARGO_PKG_VERSION") },
            "config": self.config,
            "result": o.result,
            "warnings": o.warnings,
            "runtime": {
                "wall_time_s": self.started.elapsed().as_secs_f64(),
                "threads": self.threads,
            },
        });
        let json_path = csv_path.with_extension("json");
        write_json(&json_path, &meta)?;
        Ok([csv_path, json_path])
    }

    fn load_dataset(&self) -> Result<DesignMatrix, CliError> {
        let path = self.config.dataset_path();
        DesignMatrix::load_csv(&path).context(&format!("dataset {}", path.display()))
    }

    fn load_model(&self) -> Result<FittedGp, CliError> {
        let path = self.config.model_path();
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&format!("model {}", path.display()), e))?;
        let gp = FittedGp::from_json(&text).context(&format!("model {}", path.display()))?;
        let inputs = self.config.inputs()?;
        if frc_core::predictor::Predictor::input_dim(&gp) != inputs.dim() {
            return Err(CliError::config(
                "inputs",
                format!("{} marginals but the model has {} inputs", inputs.dim(), frc_core::predictor::Predictor::input_dim(&gp)),
            ));
        }
        Ok(gp)
    }

    fn simulate_design(&self) -> Result<Vec<Output>, CliError> {
        let c = &self.config;
        let inputs = c.inputs()?;
        let mut design = generate_design(inputs, c.design.n, c.design.scheme, self.stage_seed()).context("design")?;
        if let Some(model) = &c.analytic {
            design = evaluate_analytic(model, &design).context("analytic")?;
        }
        let mut csv = Vec::new();
        design.write_csv(&mut csv).context("design")?;
        Ok(vec![Output {
            stem: "design".into(),
            csv,
            result: json!({
                "n": design.len(),
                "scheme": c.design.scheme,
                "responses": design.y.is_some(),
                "columns": design.column_names(),
            }),
            warnings: vec![],
        }])
    }

    fn fit_gp(&self, written: &mut Vec<PathBuf>) -> Result<Vec<Output>, CliError> {
        let c = &self.config;
        let design = self.load_dataset()?;
        let a_bounds = match &c.inputs {
            Some(_) => {
                let m = c.inputs()?;
                if m.dim() != design.input_dim() {
                    return Err(CliError::config(
                        "inputs",
                        format!("{} marginals but the dataset has {} input columns", m.dim(), design.input_dim()),
                    ));
                }
                Some(m.a_bounds)
            }
            None => None,
        };
        let options = FitOptions {
            trend: c.gp.trend,
            nugget: c.gp.nugget,
            multistarts: c.gp.multistarts,
            seed: self.stage_seed(),
            a_bounds,
            max_iterations: c.gp.max_iterations,
            tolerance: c.gp.tolerance,
            ..FitOptions::default()
        };
        let gp = fit(&design, &options).context("gp")?;
        let model_path = c.model_path();
        if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io("model", e))?;
        }
        let doc = gp.to_json().context("model")?;
        std::fs::write(&model_path, doc).map_err(|e| CliError::io(&format!("model {}", model_path.display()), e))?;
        written.push(model_path.clone());

        let report = gp.report();
        let d = design.input_dim() + 1;
        let mut header = vec!["start".to_string(), "initial_loglik".into(), "final_loglik".into(), "iterations".into()];
        header.extend((0..d).map(|j| format!("theta_{j}")));
        let mut rows = vec![header];
        for (k, s) in report.starts.iter().enumerate() {
            let mut row = vec![k.to_string(), s.initial_value.to_string(), s.final_value.to_string(), s.iterations.to_string()];
            row.extend(s.final_theta.iter().map(|t| t.to_string()));
            rows.push(row);
        }
        Ok(vec![Output {
            stem: "fit".into(),
            csv: csv_bytes(&rows)?,
            result: json!({
                "model": model_path,
                "kernel": gp.kernel(),
                "trend": gp.trend(),
                "log_likelihood": report.log_likelihood,
                "nugget": report.nugget,
                "best_start": report.best_start,
                "n_train": design.len(),
            }),
            warnings: vec![],
        }])
    }

    fn curve(&self) -> Result<Vec<Output>, CliError> {
        let c = &self.config;
        let gp = self.load_model()?;
        let settings = DoubleMcSettings {
            n: c.curve.n,
            m: c.curve.m,
            n_clt: c.curve.n_clt,
            levels: c.curve.levels.clone(),
            seed: self.stage_seed(),
            max_joint_points: c.curve.max_joint_points,
            ..DoubleMcSettings::default()
        };
        let curve = frc_double_mc(&gp, c.inputs()?, c.threshold()?, &c.curve_grid()?, &settings).context("curve")?;
        let mut csv = Vec::new();
        curve.write_csv(&mut csv).context("curve")?;
        let mut result = curve.metadata();
        result["mean_curve"] = json!(curve.mean_curve);
        result["pooled_std_error"] = json!(curve.pooled_std_error);
        Ok(vec![Output { stem: "curve".into(), csv, result, warnings: curve.warnings.clone() }])
    }

    fn berens(&self) -> Result<Vec<Output>, CliError> {
        let c = &self.config;
        let design = self.load_dataset()?;
        let y = design
            .y
            .as_ref()
            .ok_or_else(|| CliError::config("dataset", "the dataset has no y column"))?;
        let s = c.threshold()?;
        let fitted = fit_berens(&design.a, y, s, c.berens.transform).context("berens")?;
        let level = c.berens.level;
        let grid = match &c.berens.a_grid {
            Some(g) => g.values("berens.a_grid")?,
            None => {
                let lo = design.a.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = design.a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                frc_core::numerics::linspace(lo, hi, crate::config::DEFAULT_GRID_POINTS)
            }
        };
        let mut rows = vec![vec!["a".to_string(), "estimate".into(), "lower".into(), "upper".into()]];
        for &a in &grid {
            let (lo, hi) = fitted.frc_interval(a, level).context("berens.level")?;
            rows.push(vec![a.to_string(), fitted.frc(a).to_string(), lo.to_string(), hi.to_string()]);
        }
        let alpha_ci = fitted.alpha_interval(level).context("berens.level")?;
        let beta_ci = fitted.beta_interval(level).context("berens.level")?;
        Ok(vec![Output {
            stem: "berens".into(),
            csv: csv_bytes(&rows)?,
            result: json!({ "fit": fitted, "level": level, "alpha_ci": alpha_ci, "beta_ci": beta_ci }),
            warnings: vec![],
        }])
    }

    fn sobol(&self) -> Result<Vec<Output>, CliError> {
        let c = &self.config;
        let gp = self.load_model()?;
        let inputs = c.inputs()?;
        let s = c.threshold()?;
        let settings = SobolSettings {
            n_pf: c.sobol.n_pf,
            bootstrap: c.sobol.bootstrap,
            level: c.sobol.level,
            seed: self.stage_seed(),
        };
        let result = match c.sobol.flavor {
            FlavorName::Aggregated => {
                let grid = grid_or_missing(&c.sobol.a_grid, "sobol.a_grid")?;
                sobol_aggregated(&gp, inputs, s, &grid, &settings)
            }
            FlavorName::Pointwise => {
                let a = c.sobol.a.ok_or_else(|| CliError::config("sobol.a", "required by the pointwise flavor"))?;
                sobol_pointwise(&gp, inputs, s, a, &settings)
            }
            FlavorName::Inverse => {
                let p = c.sobol.p.ok_or_else(|| CliError::config("sobol.p", "required by the inverse flavor"))?;
                sobol_inverse(&gp, inputs, s, p, &settings)
            }
        }
        .context("sobol")?;
        let mut csv = Vec::new();
        result.write_csv(&mut csv).context("sobol")?;
        Ok(vec![Output {
            stem: format!("sobol_{}", result.flavor.label()),
            csv,
            result: result.metadata(),
            warnings: result.warnings.clone(),
        }])
    }

    fn pli_grid_values(&self) -> Result<Vec<f64>, CliError> {
        let p = &self.config.pli;
        match (p.a, &p.a_grid) {
            (Some(_), Some(_)) => Err(CliError::config("pli.a", "give either pli.a or pli.a_grid, not both")),
            (Some(a), None) if a.is_finite() => Ok(vec![a]),
            (Some(a), None) => Err(CliError::config("pli.a", format!("must be finite, got {a}"))),
            (None, Some(g)) => g.values("pli.a_grid"),
            (None, None) => Err(CliError::config("pli.a", "required (or pli.a_grid)")),
        }
    }

    fn pli(&self) -> Result<Vec<Output>, CliError> {
        let c = &self.config;
        let a_grid = self.pli_grid_values()?;
        let gp = self.load_model()?;
        let inputs = c.inputs()?;
        let indices = c.pli.inputs.clone().unwrap_or_default();
        if let Some(&bad) = indices.iter().find(|&&i| i >= inputs.dim()) {
            return Err(CliError::config("pli.inputs", format!("index {bad} out of range for {} inputs", inputs.dim())));
        }
        let deltas = c.pli.delta_grid.clone().unwrap_or_default();
        let settings = PliSettings {
            n: c.pli.n,
            seed: self.stage_seed(),
            level: c.pli.level,
            ci: c.pli.ci,
            bootstrap: c.pli.bootstrap,
        };
        let result =
            pli_grid(&gp, inputs, c.threshold()?, &indices, c.pli.moment, &deltas, &a_grid, &settings).context("pli")?;
        let mut csv = Vec::new();
        result.write_csv(&mut csv).context("pli")?;
        let mut warnings: Vec<String> = result
            .missing
            .iter()
            .map(|m| format!("input {}, delta {}, a {}: {}", m.input_index, m.delta, m.a, m.reason))
            .collect();
        warnings.dedup();
        Ok(vec![Output { stem: "pli".into(), csv, result: result.metadata(), warnings }])
    }

    fn oracle(&self) -> Result<Vec<Output>, CliError> {
        let c = &self.config;
        let model = c.analytic()?;
        let inputs = c.inputs()?;
        let s = c.threshold()?;
        let mut records = Vec::new();
        for a in c.curve_grid()? {
            let v = oracle_frc(model, inputs, s, a).context("oracle")?;
            records.push(record(format!("frc(a={a})"), v, "closed form"));
        }
        let grid = grid_or_missing(&c.sobol.a_grid, "sobol.a_grid")?;
        let r = oracle_sobol_aggregated(model, inputs, s, &grid).context("oracle")?;
        push_sobol(&mut records, "aggregated", &r, "quadrature");
        if let Some(a) = c.sobol.a {
            let r = oracle_sobol_pointwise(model, inputs, s, a).context("oracle")?;
            push_sobol(&mut records, "pointwise", &r, "quadrature");
        }
        let r = oracle_sobol_inverse(model, inputs).context("oracle")?;
        push_sobol(&mut records, "inverse", &r, "closed form");
        if c.pli.moment == Moment::Mean && (c.pli.a.is_some() || c.pli.a_grid.is_some()) {
            let a_grid = self.pli_grid_values()?;
            for &i in c.pli.inputs.as_deref().unwrap_or_default() {
                for &delta in c.pli.delta_grid.as_deref().unwrap_or_default() {
                    for &a in &a_grid {
                        let v = oracle_pli_mean_shift(model, inputs, s, a, i, delta).context("oracle")?;
                        records.push(record(format!("pli[{i},{delta},{a}]"), v, "closed form"));
                    }
                }
            }
        }
        let mut rows = vec![vec!["quantity".to_string(), "value".into(), "method".into()]];
        rows.extend(records.iter().map(|r| vec![r.quantity.clone(), r.value.to_string(), r.method.clone()]));
        Ok(vec![Output { stem: "oracle".into(), csv: csv_bytes(&rows)?, result: json!({ "records": records.len() }), warnings: vec![] }])
    }
}

fn record(quantity: String, value: f64, method: &str) -> OracleRecord {
    OracleRecord { quantity, value, method: method.into() }
}

fn push_sobol(records: &mut Vec<OracleRecord>, tag: &str, r: &SobolReference, method: &str) {
    for (i, (f, t)) in r.first_order.iter().zip(&r.total).enumerate() {
        records.push(record(format!("S_{tag}[{i}]"), *f, method));
        records.push(record(format!("T_{tag}[{i}]"), *t, method));
    }
}

fn csv_bytes(rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.write_record(r).map_err(|e| CliError::io("csv", e.into()))?;
    }
    w.into_inner().map_err(|e| CliError::io("csv", e.into_error()))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(&path.display().to_string(), e))
}
