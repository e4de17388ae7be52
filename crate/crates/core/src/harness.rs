//! Experiment configuration, dispatch and reports.
//!
//! A run reads a TOML config, executes one experiment, and writes its CSV and
//! JSON artifacts plus `manifest.json` into the output directory. Artifacts
//! other than the manifest are byte-identical across runs of the same config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell_problem::{
    EstimatorConfig, Method, PenalizedOptions, DEFAULT_HORIZON, DEFAULT_LAMBDAS,
};
use crate::effective::{
    build_table_with, direction_fan, enhancement_test_steady, slow_table, verify_certificate,
    CertificateOptions, EffectiveHamiltonian, Zhat,
};
use crate::error::{Error, Result};
use crate::fields::{
    default_c_i, diagnostics, make_builtin, Family, Modulated, Profile, SampledField, VelocityField,
};
use crate::front_geometry::{
    area_fraction_trace, evolve_homogenized, export_snapshots, hopf_lax, inclusion_deviation,
    propagate_front, radial_level_data, sample_macro, trend_slope, BallData, CellMask,
    FrontOptions, MacroFunction, WulffShape,
};
use crate::hj_kernel::{Boundary, Evolver, GridSpec};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Diagnostics,
    HbarTable,
    Enhancement,
    Certificate,
    Wulff,
    Front,
    ErrorRate,
    SlowTable,
    AreaFraction,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Diagnostics,
        Experiment::HbarTable,
        Experiment::Enhancement,
        Experiment::Certificate,
        Experiment::Wulff,
        Experiment::Front,
        Experiment::ErrorRate,
        Experiment::SlowTable,
        Experiment::AreaFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Diagnostics => "diagnostics",
            Experiment::HbarTable => "hbar_table",
            Experiment::Enhancement => "enhancement",
            Experiment::Certificate => "certificate",
            Experiment::Wulff => "wulff",
            Experiment::Front => "front",
            Experiment::ErrorRate => "error_rate",
            Experiment::SlowTable => "slow_table",
            Experiment::AreaFraction => "area_fraction",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Turn violated hypotheses (`α* ≤ 0`) into errors.
    #[serde(default)]
    pub strict: bool,
    /// Built-in family keys, `path` to a sampled field, or `file` with a
    /// field definition.
    pub field: toml::Table,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub table: TableSection,
    #[serde(default)]
    pub enhancement: EnhancementSection,
    #[serde(default)]
    pub certificate: CertificateSection,
    #[serde(default)]
    pub front: FrontSection,
    #[serde(default)]
    pub rate: RateSection,
    pub slow: Option<SlowSection>,
    #[serde(default)]
    pub area_fraction: AreaSection,
}

fn default_seed() -> u64 {
    7
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub method: Method,
    pub n: usize,
    pub cfl: f64,
    pub lambdas: Vec<f64>,
    pub horizon: f64,
    pub refine: bool,
    pub tol_factor: f64,
    pub c_i: Option<f64>,
    pub diagnostics_resolution: usize,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            method: Method::Penalized,
            n: 128,
            cfl: crate::hj_kernel::DEFAULT_CFL,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            horizon: DEFAULT_HORIZON,
            refine: true,
            tol_factor: crate::cell_problem::DEFAULT_TOL_FACTOR,
            c_i: None,
            diagnostics_resolution: 64,
        }
    }
}

impl EstimatorSection {
    pub fn to_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            method: self.method,
            n: self.n,
            cfl: self.cfl,
            lambdas: self.lambdas.clone(),
            horizon: self.horizon,
            refine: self.refine,
            penalized: PenalizedOptions {
                tol_factor: self.tol_factor,
                ..PenalizedOptions::default()
            },
            c_i: self.c_i,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSection {
    pub m: usize,
    pub scaling: Vec<f64>,
}

impl Default for TableSection {
    fn default() -> Self {
        TableSection {
            m: 16,
            scaling: vec![2.0],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancementSection {
    /// A single slope; the whole table fan when absent.
    pub p: Option<Vec<f64>>,
    pub resolution: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateSection {
    pub p: Vec<f64>,
    /// `sawtooth` (`[s] − s`) or `zero`.
    pub zhat: String,
    pub samples: usize,
    pub degree: usize,
    pub resolution: usize,
    pub times: usize,
    pub seeds: usize,
    pub flow_time: f64,
    pub tolerance: f64,
}

impl Default for CertificateSection {
    fn default() -> Self {
        let o = CertificateOptions::default();
        CertificateSection {
            p: vec![1.0, 0.0],
            zhat: "sawtooth".into(),
            samples: 256,
            degree: o.degree,
            resolution: o.resolution,
            times: o.times,
            seeds: o.seeds,
            flow_time: o.flow_time,
            tolerance: o.tolerance,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontSection {
    /// Cells per field period, shared by the front grid and the table.
    pub cells_per_period: usize,
    pub seed_side: f64,
    pub times: Vec<f64>,
    /// Box side; sized from the margin requirement when absent.
    pub box_side: Option<f64>,
    pub slope_tolerance: f64,
    pub snapshots: bool,
}

impl Default for FrontSection {
    fn default() -> Self {
        FrontSection {
            cells_per_period: 16,
            seed_side: 2.0,
            times: (0..=12).map(|k| 10.0 + 2.5 * k as f64).collect(),
            box_side: None,
            slope_tolerance: 0.05,
            snapshots: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSection {
    pub eps: Vec<f64>,
    #[serde(rename = "T")]
    pub t: f64,
    pub torus: f64,
    pub cells_per_period: usize,
    pub radius: f64,
    pub reference_n: usize,
    pub fit_points: usize,
}

impl Default for RateSection {
    fn default() -> Self {
        RateSection {
            eps: vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
            t: 1.0,
            torus: 4.0,
            cells_per_period: 16,
            radius: 1.0,
            reference_n: 256,
            fit_points: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowSection {
    /// Macro axis of the modulation `a(x_axis)`.
    pub axis: usize,
    pub modulation: Profile,
    pub macro_points: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AreaSection {
    pub n: usize,
    pub rho0: f64,
    /// Final time; `t* + 1` when absent.
    #[serde(rename = "T")]
    pub t: Option<f64>,
}

impl Default for AreaSection {
    fn default() -> Self {
        AreaSection {
            n: 128,
            rho0: 0.25,
            t: None,
        }
    }
}

fn config_err(key: &str, reason: impl fmt::Display) -> Error {
    Error::Config(format!("{key}: {reason}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config; relative field paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for key in ["path", "file"] {
            if let Some(toml::Value::String(p)) = cfg.field.get_mut(key) {
                let pb = Path::new(p.as_str());
                if pb.is_relative() {
                    *p = base.join(pb).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    /// Range checks with the offending key in the message.
    pub fn validate(&self) -> Result<()> {
        let e = &self.estimator;
        if e.n < 4 {
            return Err(config_err("estimator.n", "must be at least 4"));
        }
        if !(e.cfl > 0.0 && e.cfl <= 1.0) {
            return Err(config_err("estimator.cfl", "must lie in (0, 1]"));
        }
        if e.lambdas.is_empty()
            || e.lambdas.iter().any(|l| !(*l > 0.0))
            || e.lambdas.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(config_err(
                "estimator.lambdas",
                "must be positive and strictly decreasing",
            ));
        }
        if !(e.horizon >= 5.0) {
            return Err(config_err("estimator.horizon", "must be at least 5"));
        }
        if let Some(c) = e.c_i {
            if !(c > 0.0) {
                return Err(config_err("estimator.c_i", "must be positive"));
            }
        }
        if e.diagnostics_resolution < 16 {
            return Err(config_err(
                "estimator.diagnostics_resolution",
                "must be at least 16",
            ));
        }
        if self.table.m < 8 {
            return Err(config_err("table.m", "must be at least 8"));
        }
        if self.table.scaling.iter().any(|s| !(*s > 0.0)) {
            return Err(config_err("table.scaling", "factors must be positive"));
        }
        let f = &self.front;
        if f.cells_per_period < 8 {
            return Err(config_err("front.cells_per_period", "must be at least 8"));
        }
        if !(f.seed_side > 0.0) {
            return Err(config_err("front.seed_side", "must be positive"));
        }
        if f.times.is_empty()
            || f.times.iter().any(|t| !(*t > 0.0))
            || f.times.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(config_err("front.times", "must be positive and increasing"));
        }
        let r = &self.rate;
        if r.eps.len() < 2 || r.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(config_err(
                "rate.eps",
                "need at least two strictly decreasing values",
            ));
        }
        for &eps in &r.eps {
            let k = 1.0 / eps;
            if !(eps > 0.0) || (k - k.round()).abs() > 1e-9 {
                return Err(config_err(
                    "rate.eps",
                    format!("{eps} is not the reciprocal of an integer"),
                ));
            }
        }
        if !(r.torus > 0.0) || (r.torus - r.torus.round()).abs() > 1e-12 {
            return Err(config_err(
                "rate.torus",
                "must be a positive integer number of periods",
            ));
        }
        if r.cells_per_period < 8 {
            return Err(config_err(
                "rate.cells_per_period",
                "fewer than 8 cells per micro period",
            ));
        }
        if !(r.t > 0.0) {
            return Err(config_err("rate.T", "must be positive"));
        }
        if r.fit_points < 2 || r.fit_points > r.eps.len() {
            return Err(config_err(
                "rate.fit_points",
                "must lie between 2 and the number of ε values",
            ));
        }
        let a = &self.area_fraction;
        if a.n < 16 {
            return Err(config_err("area_fraction.n", "must be at least 16"));
        }
        if !(a.rho0 > 0.0 && a.rho0 < 0.5) {
            return Err(config_err("area_fraction.rho0", "must lie in (0, 1/2)"));
        }
        for key in ["path", "file"] {
            if let Some(v) = self.field.get(key) {
                let p = v
                    .as_str()
                    .ok_or_else(|| config_err(&format!("field.{key}"), "must be a string"))?;
                if !Path::new(p).exists() {
                    return Err(config_err(
                        &format!("field.{key}"),
                        format!("file {p} does not exist"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Builds the configured velocity field.
    pub fn build_field(&self) -> Result<Arc<dyn VelocityField>> {
        if let Some(p) = self.field.get("path") {
            let p = p
                .as_str()
                .ok_or_else(|| config_err("field.path", "must be a string"))?;
            return Ok(Arc::new(SampledField::read(Path::new(p))?));
        }
        let table = match self.field.get("file") {
            Some(f) => {
                let f = f
                    .as_str()
                    .ok_or_else(|| config_err("field.file", "must be a string"))?;
                let text = std::fs::read_to_string(f).map_err(|e| config_err("field.file", e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_err("field.file", e))?
            }
            None => self.field.clone(),
        };
        let family: Family = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err("field", e.to_string().trim()))?;
        Ok(Arc::new(make_builtin(family)?))
    }
}

// ---------------------------------------------------------------------------
// Error-rate experiment
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateOptions {
    pub eps: Vec<f64>,
    pub t: f64,
    /// Side of the periodic macro torus.
    pub torus: f64,
    pub cells_per_period: usize,
    /// Grid of the homogenized cross-check.
    pub reference_n: usize,
    pub fit_points: usize,
    /// The cross-check and the band errors use cells with `|ū| ≤ band`.
    pub band: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateReport {
    pub eps: Vec<f64>,
    pub grid_n: Vec<usize>,
    /// `‖u^ε(·, T) − ū(·, T)‖_∞` over the torus.
    pub errors: Vec<f64>,
    /// The same restricted to the front band `|ū| ≤ band`.
    pub band_errors: Vec<f64>,
    /// Fitted order over the final `fit_points` values.
    pub q: f64,
    pub c_hat: f64,
    pub fit_points: usize,
    /// `sup |Hopf–Lax − grid evolution of H̄_W|` over the front band of the
    /// reference grid.
    pub reference_gap: f64,
    /// The same over every cell, including the rounded plateau edges.
    pub reference_gap_full: f64,
    pub reference_tolerance: f64,
    pub t: f64,
    pub torus: f64,
    pub cells_per_period: usize,
}

impl RateReport {
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "eps,n,error,band_error")?;
        for (k, e) in self.eps.iter().enumerate() {
            writeln!(
                w,
                "{e},{},{},{}",
                self.grid_n[k], self.errors[k], self.band_errors[k]
            )?;
        }
        Ok(())
    }
}

/// Least-squares fit `log y = log C + q log x`.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let q = trend_slope(&lx, &ly);
    let n = lx.len() as f64;
    let c = ((ly.iter().sum::<f64>() - q * lx.iter().sum::<f64>()) / n).exp();
    (q, c)
}

fn band_distance(a: &[f64], exact: &[f64], band: f64) -> f64 {
    a.iter()
        .zip(exact)
        .filter(|(_, e)| e.abs() <= band)
        .map(|(x, e)| (x - e).abs())
        .fold(0.0, f64::max)
}

/// Solves `u_t = |Du| + ⟨V(x/ε, t/ε), Du⟩` on a periodic macro torus for
/// each `ε` with a fixed number of cells per micro period, and compares with
/// the Hopf–Lax solution for the Wulff shape `W`.
pub fn error_rate(
    field: &dyn VelocityField,
    u0: &dyn MacroFunction,
    wulff: &WulffShape,
    opts: &RateOptions,
) -> Result<RateReport> {
    if field.dim() != 2 || u0.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            dim: field.dim(),
            what: "error-rate experiment",
        });
    }
    if opts.cells_per_period < 8 {
        return Err(Error::param(
            "cells_per_period",
            "fewer than 8 cells per micro period",
        ));
    }
    if opts.eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("eps", "must be strictly decreasing"));
    }
    if opts.fit_points < 2 || opts.fit_points > opts.eps.len() {
        return Err(Error::param(
            "fit_points",
            "between 2 and the number of ε values",
        ));
    }
    let mut grid_n = Vec::with_capacity(opts.eps.len());
    for &eps in &opts.eps {
        let periods = opts.torus / eps;
        if !(eps > 0.0) || (periods - periods.round()).abs() > 1e-9 {
            return Err(Error::param(
                "eps",
                format!("the torus does not hold an integer number of periods of {eps}"),
            ));
        }
        grid_n.push(periods.round() as usize * opts.cells_per_period);
    }

    // Cross-check the Hopf–Lax reference before fitting anything.
    let ref_grid = GridSpec::centered_box(2, opts.reference_n, opts.torus, Boundary::Periodic);
    let hl = hopf_lax(u0, opts.t, wulff)?;
    let evolved = evolve_homogenized(&sample_macro(u0, &ref_grid), wulff, opts.t)?;
    let exact = sample_macro(&hl, &ref_grid);
    let reference_gap_full = evolved.sup_distance(&exact);
    let reference_gap = band_distance(&evolved.values, &exact.values, opts.band);
    let reference_tolerance = 3.0 * ref_grid.dx;
    if reference_gap > reference_tolerance {
        return Err(Error::Discretization(format!(
            "Hopf–Lax and homogenized evolution differ by {reference_gap} > {reference_tolerance}"
        )));
    }

    let errors: Vec<(f64, f64)> = opts
        .eps
        .par_iter()
        .zip(&grid_n)
        .map(|(&eps, &n)| -> Result<(f64, f64)> {
            let grid =
                GridSpec::centered_box(2, n, opts.torus, Boundary::Periodic).with_field(field);
            let mut u = sample_macro(u0, &grid);
            let mut ev = Evolver::with_scale(field, &grid, &[0.0, 0.0], 0.0, eps)?;
            ev.enable_tile_skipping();
            ev.advance_to(&mut u, opts.t);
            let exact = sample_macro(&hl, &grid);
            Ok((
                u.sup_distance(&exact),
                band_distance(&u.values, &exact.values, opts.band),
            ))
        })
        .collect::<Result<_>>()?;
    let (errors, band_errors): (Vec<f64>, Vec<f64>) = errors.into_iter().unzip();
    let k = opts.eps.len() - opts.fit_points;
    let (q, c_hat) = fit_power_law(&opts.eps[k..], &errors[k..]);
    Ok(RateReport {
        eps: opts.eps.clone(),
        grid_n,
        errors,
        band_errors,
        q,
        c_hat,
        fit_points: opts.fit_points,
        reference_gap,
        reference_gap_full,
        reference_tolerance,
        t: opts.t,
        torus: opts.torus,
        cells_per_period: opts.cells_per_period,
    })
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// What a run produced.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub experiment: Experiment,
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    /// Whether the experiment's own checks passed.
    pub passed: bool,
    pub summary: serde_json::Value,
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.dir.join(name), text)?;
        self.artifacts.push(name.into());
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        std::fs::write(self.dir.join(name), buf)?;
        self.artifacts.push(name.into());
        Ok(())
    }
}

/// Runs one experiment and writes its artifacts and manifest into `out_dir`.
pub fn run(cfg: &ExperimentConfig, experiment: Experiment, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    if let Some(e) = cfg.experiment {
        if e != experiment {
            return Err(config_err(
                "experiment",
                format!("config names `{e}` but `{experiment}` was requested"),
            ));
        }
    }
    cfg.validate()?;
    let field = cfg.build_field()?;
    let est = cfg.estimator.to_config();
    let c_i = cfg
        .estimator
        .c_i
        .unwrap_or_else(|| default_c_i(field.dim()));
    let diag = diagnostics(field.as_ref(), cfg.estimator.diagnostics_resolution, c_i)?;
    if cfg.strict && !diag.hypothesis_holds() {
        return Err(Error::Hypothesis(format!(
            "small-divergence condition fails: α* = {}",
            diag.alpha_star
        )));
    }
    let mut w = Writer::new(out_dir)?;
    let (passed, summary) = match experiment {
        Experiment::Diagnostics => {
            w.json("diagnostics.json", &diag)?;
            (
                true,
                serde_json::json!({"alpha_star": diag.alpha_star, "hypothesis_holds": diag.hypothesis_holds()}),
            )
        }
        Experiment::HbarTable => {
            let table = build_table_with(field.as_ref(), cfg.table.m, &est, &cfg.table.scaling)?;
            w.csv("hbar_table.csv", |b| table.write_csv(b))?;
            w.json("hbar_table.json", &table)?;
            (table.all_passed(), table_summary(&table))
        }
        Experiment::Enhancement => {
            let directions = match &cfg.enhancement.p {
                Some(p) => vec![p.clone()],
                None => direction_fan(field.dim(), cfg.table.m)?.directions,
            };
            let res = cfg.enhancement.resolution.unwrap_or(2 * cfg.estimator.n);
            let reports = directions
                .par_iter()
                .map(|p| enhancement_test_steady(field.as_ref(), p, &est, res))
                .collect::<Result<Vec<_>>>()?;
            w.json("enhancement.json", &reports)?;
            let consistent = reports.iter().all(|r| r.consistent);
            (
                consistent,
                serde_json::json!({"directions": reports.len(), "consistent": consistent}),
            )
        }
        Experiment::Certificate => {
            let c = &cfg.certificate;
            let zhat = match c.zhat.as_str() {
                "sawtooth" => Zhat::sawtooth(c.samples),
                "zero" => Zhat::zero(c.samples),
                other => {
                    return Err(config_err(
                        "certificate.zhat",
                        format!("unknown profile `{other}`"),
                    ))
                }
            };
            let opts = CertificateOptions {
                degree: c.degree,
                resolution: c.resolution,
                times: c.times,
                seeds: c.seeds,
                seed: cfg.seed,
                flow_time: c.flow_time,
                tolerance: c.tolerance,
            };
            let cert = verify_certificate(field.as_ref(), &c.p, &zhat, &opts)?;
            let report = cert.report_json();
            w.json("certificate.json", &report)?;
            (cert.holds(), report)
        }
        Experiment::Wulff => {
            let table = build_table_with(field.as_ref(), cfg.table.m, &est, &cfg.table.scaling)?;
            let wulff = WulffShape::from_table(&table)?;
            w.csv("hbar_table.csv", |b| table.write_csv(b))?;
            w.csv("wulff_vertices.csv", |b| wulff.write_vertices_csv(b))?;
            w.csv("wulff_support.csv", |b| wulff.write_support_csv(b))?;
            let ok = wulff.inscribed_violation() <= 1e-9;
            (
                ok,
                serde_json::json!({"vertices": wulff.vertices.len(), "area": wulff.area(), "inscribed": ok}),
            )
        }
        Experiment::Front => run_front(cfg, field.as_ref(), &est, &mut w)?,
        Experiment::ErrorRate => {
            let r = &cfg.rate;
            let mut table_cfg = est.clone();
            table_cfg.n = r.cells_per_period;
            let table = build_table_with(field.as_ref(), cfg.table.m, &table_cfg, &[])?;
            let wulff = WulffShape::from_table(&table)?;
            let u0 = BallData {
                center: vec![0.0; 2],
                radius: r.radius,
                clamp: 1.0,
                period: Some(r.torus),
            };
            let opts = RateOptions {
                eps: r.eps.clone(),
                t: r.t,
                torus: r.torus,
                cells_per_period: r.cells_per_period,
                reference_n: r.reference_n,
                fit_points: r.fit_points,
                band: 0.5,
            };
            let report = error_rate(field.as_ref(), &u0, &wulff, &opts)?;
            w.csv("hbar_table.csv", |b| table.write_csv(b))?;
            w.csv("rate.csv", |b| report.write_csv(b))?;
            w.json("rate.json", &report)?;
            let ok = report.q >= 1.0 / 3.0 - 0.05;
            (
                ok,
                serde_json::json!({"q": report.q, "c_hat": report.c_hat, "errors": report.errors}),
            )
        }
        Experiment::SlowTable => {
            let s = cfg.slow.as_ref().ok_or_else(|| {
                config_err("slow", "section required for the slow_table experiment")
            })?;
            if s.axis >= field.dim() {
                return Err(config_err("slow.axis", "out of range"));
            }
            let slow = Arc::new(Modulated {
                base: field.clone(),
                axis: s.axis,
                modulation: s.modulation.clone(),
            });
            let t = slow_table(slow, &s.macro_points, cfg.table.m, &est)?;
            w.json("slow_table.json", &t)?;
            let ok = t
                .bound_ok
                .iter()
                .zip(&t.lower_bound_ok)
                .all(|(a, b)| !a || *b);
            (
                ok,
                serde_json::json!({"points": t.macro_points.len(), "lower_bound_ok": t.lower_bound_ok}),
            )
        }
        Experiment::AreaFraction => {
            let a = &cfg.area_fraction;
            let grid = GridSpec::unit_cell(field.dim(), a.n);
            let (z0, theta) = radial_level_data(&grid, a.rho0);
            let t_star =
                1.0 + field.dim() as f64 / (2f64.powf(1.0 / field.dim() as f64) * diag.alpha_star);
            let t_end = a.t.unwrap_or(t_star + 1.0);
            let tr = area_fraction_trace(field.as_ref(), &z0, theta, t_end, &diag)?;
            w.csv("area_fraction.csv", |b| tr.write_csv(b))?;
            w.json("area_fraction.json", &tr)?;
            let ok = tr.pairwise_ok && tr.nonincreasing && tr.extinct_by(1.0);
            (
                ok,
                serde_json::json!({"t_star": tr.t_star, "extinction": tr.extinction, "pairwise_ok": tr.pairwise_ok}),
            )
        }
    };
    let manifest = serde_json::json!({
        "experiment": experiment,
        "config": cfg,
        "versions": {"gfront_core": env!("CARGO_PKG_VERSION")},
        "threads": rayon::current_num_threads(),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "started_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "artifacts": w.artifacts,
        "passed": passed,
        "summary": summary,
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut artifacts = w.artifacts;
    artifacts.push("manifest.json".into());
    Ok(RunOutcome {
        experiment,
        out_dir: out_dir.to_path_buf(),
        artifacts,
        passed,
        summary,
    })
}

fn table_summary(table: &EffectiveHamiltonian) -> serde_json::Value {
    serde_json::json!({
        "directions": table.len(),
        "holes": table.holes.len(),
        "checks": table.checks.iter().map(|c| (c.name.clone(), c.passed)).collect::<Vec<_>>(),
    })
}

fn run_front(
    cfg: &ExperimentConfig,
    field: &dyn VelocityField,
    est: &EstimatorConfig,
    w: &mut Writer,
) -> Result<(bool, serde_json::Value)> {
    if field.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            dim: field.dim(),
            what: "front experiment",
        });
    }
    let f = &cfg.front;
    let mut table_cfg = est.clone();
    table_cfg.n = f.cells_per_period;
    let table = build_table_with(field, cfg.table.m, &table_cfg, &[])?;
    let wulff = WulffShape::from_table(&table)?;
    let t_max = *f.times.last().unwrap_or(&0.0);
    let side = match f.box_side {
        Some(s) => s,
        None => 2.0 * (0.5 * f.seed_side + (1.0 + field.sup_norm()) * t_max + 1.0).ceil(),
    };
    let n = (side * f.cells_per_period as f64).round() as usize;
    let grid = GridSpec::centered_box(2, n, side, Boundary::Clamped);
    let seed = CellMask::square(&grid, f.seed_side, &[0.0, 0.0]);
    let states = propagate_front(field, &seed, &f.times, &FrontOptions::default())?;
    let report = inclusion_deviation(&states, &wulff, f.slope_tolerance)?;
    w.csv("hbar_table.csv", |b| table.write_csv(b))?;
    w.csv("wulff_vertices.csv", |b| wulff.write_vertices_csv(b))?;
    w.csv("wulff_support.csv", |b| wulff.write_support_csv(b))?;
    w.csv("deviation.csv", |b| report.write_csv(b))?;
    w.json("inclusion.json", &report)?;
    if f.snapshots {
        export_snapshots(&states, &w.dir.join("snapshots"))?;
        w.artifacts.push("snapshots/index.json".into());
    }
    Ok((
        report.bounded,
        serde_json::json!({"box_side": side, "n": n, "slope_out": report.slope_out, "slope_in": report.slope_in}),
    ))
}
