//! Single-direction estimates of the effective Hamiltonian `H̄(P)`.
//!
//! Two estimators are provided: the damped cell problem
//! `v_t + λv = |Dv + P| + ⟨V, Dv + P⟩` on the periodic unit cell, whose
//! solution brackets `H̄(P)` between `λ min v` and `λ max v`, and the long
//! time average `u(·, T)/T` of the undamped equation started from zero.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{default_c_i, diagnostics, FieldDiagnostics, VelocityField};
use crate::hj_kernel::{Evolver, GridField, GridSpec};

pub const DEFAULT_LAMBDAS: [f64; 3] = [0.2, 0.1, 0.05];
pub const DEFAULT_HORIZON: f64 = 20.0;
pub const DEFAULT_TOL_FACTOR: f64 = 1e-8;
/// Slack allowed when comparing brackets across the damping sequence.
pub const NESTING_SLACK: f64 = 1e-3;
/// Relative floating-point allowance added to penalized error bars; covers
/// rounding accumulated over the ~10⁵ steps of a solve.
pub const ROUNDOFF: f64 = 1e-10;

/// Oscillation constant `4(1+‖V‖)(·)` under both readings of its bracket.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscConstant {
    /// `4(1+‖V‖)(2^{1/N} N / α* + 3)`.
    pub reading_a: f64,
    /// `4(1+‖V‖)(N / (2^{1/N} α*) + 3)`.
    pub reading_b: f64,
    /// The larger of the two.
    pub value: f64,
}

impl OscConstant {
    pub fn new(dim: usize, sup_norm: f64, alpha_star: f64) -> Self {
        if !(alpha_star > 0.0) {
            return OscConstant {
                reading_a: f64::INFINITY,
                reading_b: f64::INFINITY,
                value: f64::INFINITY,
            };
        }
        let n = dim as f64;
        let root = 2f64.powf(1.0 / n);
        let pre = 4.0 * (1.0 + sup_norm);
        let reading_a = pre * (root * n / alpha_star + 3.0);
        let reading_b = pre * (n / (root * alpha_star) + 3.0);
        OscConstant {
            reading_a,
            reading_b,
            value: reading_a.max(reading_b),
        }
    }

    pub fn from_diagnostics(dim: usize, diag: &FieldDiagnostics) -> Self {
        Self::new(dim, diag.sup_norm, diag.alpha_star)
    }
}

/// Converged time-periodic solution of the damped cell problem.
#[derive(Clone, Debug)]
pub struct CellSolution {
    pub p: Vec<f64>,
    pub lambda: f64,
    /// `v` at times `k / slices.len()` over one period.
    pub slices: Vec<GridField>,
    /// `min v` and `max v` over every step of the final period.
    pub v_min: f64,
    pub v_max: f64,
    /// `λ (max v − min v)`.
    pub osc: f64,
    /// Midpoint of `[λ min v, λ max v]`.
    pub hbar_estimate: f64,
    /// Sup-norm change over the last period.
    pub residual: f64,
    pub periods: usize,
    pub c_osc: OscConstant,
    /// `C_osc |P| λ`.
    pub osc_bound: f64,
    pub osc_bound_ok: bool,
    /// `‖v‖ ≤ |P|(1+‖V‖)/λ + 2dx`.
    pub sup_bound_ok: bool,
}

impl CellSolution {
    pub fn lower(&self) -> f64 {
        self.lambda * self.v_min
    }

    pub fn upper(&self) -> f64 {
        self.lambda * self.v_max
    }

    /// Writes `stem_slice{k}.txt` per time slice and a JSON sidecar
    /// `stem.json`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (k, s) in self.slices.iter().enumerate() {
            let name = format!("{stem}_slice{k}.txt");
            s.save(&dir.join(&name))?;
            files.push(name);
        }
        let sidecar = serde_json::json!({
            "P": self.p,
            "lambda": self.lambda,
            "osc": self.osc,
            "hbar_estimate": self.hbar_estimate,
            "C_osc": self.c_osc.value,
            "C_osc_readings": [self.c_osc.reading_a, self.c_osc.reading_b],
            "residual": self.residual,
            "periods": self.periods,
            "slices": files,
        });
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

/// Controls for the damped solver.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PenalizedOptions {
    /// Convergence when the period-to-period change drops below
    /// `tol_factor (1+|P|) / λ`.
    pub tol_factor: f64,
    /// Defaults to `⌈20/λ⌉`.
    pub max_periods: Option<usize>,
    /// Time slices stored per period for time-dependent fields.
    pub slices: usize,
    /// Extrapolate the spatially constant mode between periods.
    pub accelerate: bool,
}

impl Default for PenalizedOptions {
    fn default() -> Self {
        PenalizedOptions {
            tol_factor: DEFAULT_TOL_FACTOR,
            max_periods: None,
            slices: 8,
            accelerate: true,
        }
    }
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn field_diagnostics(field: &dyn VelocityField) -> Result<FieldDiagnostics> {
    diagnostics(field, 32, default_c_i(field.dim()))
}

/// Solves the damped cell problem with default options.
pub fn solve_penalized(
    field: &dyn VelocityField,
    p: &[f64],
    lambda: f64,
    grid: &GridSpec,
) -> Result<CellSolution> {
    let diag = field_diagnostics(field)?;
    solve_penalized_with(
        field,
        p,
        lambda,
        grid,
        &PenalizedOptions::default(),
        &diag,
        None,
    )
}

/// Solves the damped cell problem from `warm` (or zero) by marching whole
/// periods until the time-periodic fixed point is reached.
pub fn solve_penalized_with(
    field: &dyn VelocityField,
    p: &[f64],
    lambda: f64,
    grid: &GridSpec,
    opts: &PenalizedOptions,
    diag: &FieldDiagnostics,
    warm: Option<&GridField>,
) -> Result<CellSolution> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::param("lambda", "must be positive"));
    }
    if opts.slices == 0 {
        return Err(Error::param("slices", "need at least one slice"));
    }
    let dim = field.dim();
    let pn = norm(p);
    let c_osc = OscConstant::from_diagnostics(dim, diag);
    let slice_count = if field.is_steady() { 1 } else { opts.slices };
    let mut ev = Evolver::new(field, grid, p, lambda)?;
    if pn == 0.0 {
        let zero = GridField::constant(grid, 0.0);
        return Ok(CellSolution {
            p: p.to_vec(),
            lambda,
            slices: vec![zero; slice_count],
            v_min: 0.0,
            v_max: 0.0,
            osc: 0.0,
            hbar_estimate: 0.0,
            residual: 0.0,
            periods: 0,
            c_osc,
            osc_bound: 0.0,
            osc_bound_ok: true,
            sup_bound_ok: true,
        });
    }
    let steps = ev.steps_per_period();
    let tol = opts.tol_factor * (1.0 + pn) / lambda;
    let max_periods = opts
        .max_periods
        .unwrap_or((20.0 / lambda).ceil() as usize)
        .max(1);
    let q = (-lambda).exp();

    let mut v = match warm {
        Some(w) => {
            if w.grid.n != grid.n || w.grid.dim != grid.dim {
                return Err(Error::param("warm", "grid mismatch"));
            }
            GridField {
                grid: grid.clone(),
                values: w.values.clone(),
                time_stamp: 0.0,
            }
        }
        None => GridField::constant(grid, 0.0),
    };
    let mut prev = v.clone();
    let mut residual = f64::INFINITY;
    let mut periods = 0;
    while periods < max_periods {
        prev.values.copy_from_slice(&v.values);
        ev.advance(&mut v, steps);
        periods += 1;
        v.time_stamp = 0.0;
        let mut sup = 0.0f64;
        let mut sum = 0.0;
        for (a, b) in v.values.iter().zip(&prev.values) {
            let d = a - b;
            sup = sup.max(d.abs());
            sum += d;
        }
        residual = sup;
        if !v.is_finite() {
            return Err(Error::Discretization(
                "non-finite values in the cell problem".into(),
            ));
        }
        if residual < tol {
            break;
        }
        if opts.accelerate {
            // evolve(v + c) = evolve(v) + c e^{-λ}, so the constant mode is
            // extrapolated to its fixed point in one go
            let shift = sum / v.values.len() as f64 * q / (1.0 - q);
            v.values.iter_mut().for_each(|x| *x += shift);
        }
    }
    if residual >= tol {
        return Err(Error::NotConverged { periods, residual });
    }

    // one recorded period from the fixed point
    let mut slices = Vec::with_capacity(slice_count);
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    let marks: Vec<usize> = (0..slice_count).map(|k| k * steps / slice_count).collect();
    for s in 0..steps {
        if marks.contains(&s) {
            let mut snap = v.clone();
            snap.time_stamp = s as f64 / steps as f64;
            slices.push(snap);
        }
        v_min = v_min.min(v.min());
        v_max = v_max.max(v.max());
        ev.step(&mut v);
    }
    let osc = lambda * (v_max - v_min);
    let sup_norm = diag.sup_norm;
    let osc_bound = c_osc.value * pn * lambda;
    let sup_v = v_max.abs().max(v_min.abs());
    Ok(CellSolution {
        p: p.to_vec(),
        lambda,
        slices,
        v_min,
        v_max,
        osc,
        hbar_estimate: 0.5 * lambda * (v_min + v_max),
        residual,
        periods,
        c_osc,
        osc_bound,
        osc_bound_ok: osc <= osc_bound + grid.dx,
        sup_bound_ok: sup_v <= pn * (1.0 + sup_norm) / lambda + 2.0 * grid.dx,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Penalized,
    Longtime,
}

/// Record of one damped solve inside a penalized estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub lambda: f64,
    pub lower: f64,
    pub upper: f64,
    pub osc: f64,
    pub osc_bound: f64,
    pub osc_bound_ok: bool,
    pub sup_bound_ok: bool,
    pub periods: usize,
    /// `λ · residual / (1 − e^{−λ})`, a bound on `λ|v − v*|` at exit.
    pub convergence: f64,
}

/// An estimate of `H̄(P)` with its error bar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HbarEstimate {
    pub p: Vec<f64>,
    pub value: f64,
    /// Half the final bracket width plus the convergence, grid-refinement
    /// and rounding allowances (penalized), or the long-time bound
    /// (longtime).
    pub error_bar: f64,
    pub method: Method,
    pub grid: GridSpec,
    pub lambda: Option<f64>,
    pub horizon: Option<f64>,
    pub brackets: Vec<Bracket>,
    /// Brackets shrink monotonically along the damping sequence.
    pub nested: bool,
    /// Change of the midpoint under halving of the resolution.
    pub refinement: f64,
    /// `C_osc |P| λ` at the smallest `λ`.
    pub osc_bound: f64,
}

impl HbarEstimate {
    pub fn lower(&self) -> f64 {
        self.value - self.error_bar
    }

    pub fn upper(&self) -> f64 {
        self.value + self.error_bar
    }

    fn trivial(p: &[f64], method: Method, grid: &GridSpec) -> Self {
        HbarEstimate {
            p: p.to_vec(),
            value: 0.0,
            error_bar: 0.0,
            method,
            grid: grid.clone(),
            lambda: None,
            horizon: None,
            brackets: Vec::new(),
            nested: true,
            refinement: 0.0,
            osc_bound: 0.0,
        }
    }
}

/// Settings shared by both estimators.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Cells per axis of the unit cell.
    pub n: usize,
    pub cfl: f64,
    pub lambdas: Vec<f64>,
    pub horizon: f64,
    /// Repeat the smallest-`λ` solve at `n/2` to size the discretization
    /// allowance.
    pub refine: bool,
    pub penalized: PenalizedOptions,
    pub c_i: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            method: Method::Penalized,
            n: 128,
            cfl: crate::hj_kernel::DEFAULT_CFL,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            horizon: DEFAULT_HORIZON,
            refine: true,
            penalized: PenalizedOptions::default(),
            c_i: None,
        }
    }
}

impl EstimatorConfig {
    pub fn grid_for(&self, field: &dyn VelocityField, n: usize) -> GridSpec {
        GridSpec::unit_cell(field.dim(), n)
            .with_cfl(self.cfl)
            .with_field(field)
    }

    pub fn diagnostics(&self, field: &dyn VelocityField) -> Result<FieldDiagnostics> {
        diagnostics(
            field,
            32,
            self.c_i.unwrap_or_else(|| default_c_i(field.dim())),
        )
    }

    /// Runs the configured estimator.
    pub fn estimate(
        &self,
        field: &dyn VelocityField,
        p: &[f64],
        diag: &FieldDiagnostics,
    ) -> Result<HbarEstimate> {
        self.estimate_on(field, p, diag, &self.grid_for(field, self.n))
    }

    /// Runs the configured estimator on an explicit grid.
    pub fn estimate_on(
        &self,
        field: &dyn VelocityField,
        p: &[f64],
        diag: &FieldDiagnostics,
        grid: &GridSpec,
    ) -> Result<HbarEstimate> {
        match self.method {
            Method::Penalized => penalized_estimate(field, p, &self.lambdas, grid, self, diag),
            Method::Longtime => estimate_longtime(field, p, self.horizon, grid),
        }
    }
}

/// Bracket estimate along a strictly decreasing damping sequence.
pub fn estimate_penalized(
    field: &dyn VelocityField,
    p: &[f64],
    lambdas: &[f64],
    grid: &GridSpec,
) -> Result<HbarEstimate> {
    let cfg = EstimatorConfig {
        n: grid.n,
        cfl: grid.cfl_factor,
        lambdas: lambdas.to_vec(),
        ..EstimatorConfig::default()
    };
    let diag = cfg.diagnostics(field)?;
    penalized_estimate(field, p, lambdas, grid, &cfg, &diag)
}

fn bracket_sequence(
    field: &dyn VelocityField,
    p: &[f64],
    lambdas: &[f64],
    grid: &GridSpec,
    opts: &PenalizedOptions,
    diag: &FieldDiagnostics,
) -> Result<Vec<Bracket>> {
    let mut out = Vec::with_capacity(lambdas.len());
    let mut warm: Option<GridField> = None;
    let mut last_lambda = 0.0;
    for &lambda in lambdas {
        let start = warm.take().map(|mut w| {
            let s = last_lambda / lambda;
            w.values.iter_mut().for_each(|x| *x *= s);
            w
        });
        let sol = solve_penalized_with(field, p, lambda, grid, opts, diag, start.as_ref())?;
        out.push(Bracket {
            lambda,
            lower: sol.lower(),
            upper: sol.upper(),
            osc: sol.osc,
            osc_bound: sol.osc_bound,
            osc_bound_ok: sol.osc_bound_ok,
            sup_bound_ok: sol.sup_bound_ok,
            periods: sol.periods,
            convergence: lambda * sol.residual / (1.0 - (-lambda).exp()),
        });
        warm = sol.slices.into_iter().next();
        last_lambda = lambda;
    }
    Ok(out)
}

fn penalized_estimate(
    field: &dyn VelocityField,
    p: &[f64],
    lambdas: &[f64],
    grid: &GridSpec,
    cfg: &EstimatorConfig,
    diag: &FieldDiagnostics,
) -> Result<HbarEstimate> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::param("lambdas", "need positive damping values"));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("lambdas", "must be strictly decreasing"));
    }
    if norm(p) == 0.0 {
        let mut est = HbarEstimate::trivial(p, Method::Penalized, grid);
        est.lambda = lambdas.last().copied();
        return Ok(est);
    }
    let brackets = bracket_sequence(field, p, lambdas, grid, &cfg.penalized, diag)?;
    let nested = brackets.windows(2).all(|w| {
        w[1].lower >= w[0].lower - NESTING_SLACK && w[1].upper <= w[0].upper + NESTING_SLACK
    });
    let lo = brackets
        .iter()
        .map(|b| b.lower)
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = brackets
        .iter()
        .map(|b| b.upper)
        .fold(f64::INFINITY, f64::min);
    if lo > hi + NESTING_SLACK {
        return Err(Error::Discretization(format!(
            "damped brackets do not intersect: lower {lo} exceeds upper {hi}"
        )));
    }
    let last = brackets.last().unwrap().clone();
    let value = 0.5 * (last.lower + last.upper);
    let refinement = if cfg.refine && grid.n >= 16 {
        let coarse = GridSpec {
            n: grid.n / 2,
            dx: grid.dx * grid.n as f64 / (grid.n / 2) as f64,
            ..grid.clone()
        };
        let lam = [last.lambda];
        let b = bracket_sequence(field, p, &lam, &coarse, &cfg.penalized, diag)?;
        (0.5 * (b[0].lower + b[0].upper) - value).abs()
    } else {
        0.0
    };
    Ok(HbarEstimate {
        p: p.to_vec(),
        value,
        error_bar: 0.5 * (last.upper - last.lower)
            + last.convergence
            + refinement
            + ROUNDOFF * (1.0 + value.abs()),
        method: Method::Penalized,
        grid: grid.clone(),
        lambda: Some(last.lambda),
        horizon: None,
        osc_bound: last.osc_bound,
        brackets,
        nested,
        refinement,
    })
}

/// `mean_x u(x, T) / T` for `u_t = |Du + P| + ⟨V, Du + P⟩`, `u(·,0) = 0`.
pub fn estimate_longtime(
    field: &dyn VelocityField,
    p: &[f64],
    horizon: f64,
    grid: &GridSpec,
) -> Result<HbarEstimate> {
    if !(horizon.is_finite() && horizon >= 5.0) {
        return Err(Error::param(
            "T",
            "the long-time horizon must be at least 5",
        ));
    }
    if norm(p) == 0.0 {
        let mut est = HbarEstimate::trivial(p, Method::Longtime, grid);
        est.horizon = Some(horizon);
        return Ok(est);
    }
    let mut ev = Evolver::new(field, grid, p, 0.0)?;
    let mut u = GridField::constant(grid, 0.0);
    ev.advance_to(&mut u, horizon);
    if !u.is_finite() {
        return Err(Error::Discretization(
            "non-finite values in the long-time run".into(),
        ));
    }
    let t = u.time_stamp;
    let bound = 2.0 * (1.0 + field.sup_norm()) * norm(p) / t;
    Ok(HbarEstimate {
        p: p.to_vec(),
        value: u.mean() / t,
        error_bar: u.osc() / t + bound,
        method: Method::Longtime,
        grid: grid.clone(),
        lambda: None,
        horizon: Some(t),
        brackets: Vec::new(),
        nested: true,
        refinement: 0.0,
        osc_bound: 0.0,
    })
}

/// Independent estimates for many slopes, run in parallel over a shared
/// read-only field.
pub fn estimate_batch(
    field: &dyn VelocityField,
    slopes: &[Vec<f64>],
    cfg: &EstimatorConfig,
) -> Result<Vec<Result<HbarEstimate>>> {
    let diag = cfg.diagnostics(field)?;
    Ok(slopes
        .par_iter()
        .map(|p| cfg.estimate(field, p, &diag))
        .collect())
}
