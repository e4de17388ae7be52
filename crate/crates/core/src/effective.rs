//! Effective Hamiltonian tables over direction fans, their structural
//! checks, and the enhancement tests.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell_problem::{EstimatorConfig, HbarEstimate, Method};
use crate::error::{Error, Result};
use crate::fields::{
    for_each_cell, midpoints, Drifted, FieldDiagnostics, FrozenSlice, Profile, SlowVelocityField,
    VelocityField,
};

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Direction fans
// ---------------------------------------------------------------------------

/// Unit directions with, in 3D, the triangles of the subdivided icosahedron.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fan {
    pub dim: usize,
    pub directions: Vec<Vec<f64>>,
    pub faces: Vec<[usize; 3]>,
}

/// `m` equally spaced directions in 2D, both directions in 1D, and the
/// first icosahedral subdivision with at least `m` vertices in 3D.
pub fn direction_fan(dim: usize, m: usize) -> Result<Fan> {
    match dim {
        1 => Ok(Fan {
            dim,
            directions: vec![vec![1.0], vec![-1.0]],
            faces: Vec::new(),
        }),
        2 => {
            if m < 3 {
                return Err(Error::param("m", "need at least three directions"));
            }
            let directions = (0..m)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / m as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect();
            Ok(Fan {
                dim,
                directions,
                faces: Vec::new(),
            })
        }
        3 => {
            let (verts, faces) = icosphere(m);
            Ok(Fan {
                dim,
                directions: verts.into_iter().map(|v| v.to_vec()).collect(),
                faces,
            })
        }
        _ => Err(Error::UnsupportedDimension {
            dim,
            what: "direction fan",
        }),
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / r, v[1] / r, v[2] / r]
}

fn icosphere(min_count: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = Vec::new();
    for &a in &[-1.0, 1.0] {
        for &b in &[-phi, phi] {
            verts.push(normalize3([0.0, a, b]));
            verts.push(normalize3([a, b, 0.0]));
            verts.push(normalize3([b, 0.0, a]));
        }
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let edge = (1..12)
        .map(|j| d2(&verts[0], &verts[j]))
        .fold(f64::INFINITY, f64::min);
    let adj = |a: &[f64; 3], b: &[f64; 3]| (d2(a, b) - edge).abs() < 1e-9;
    let mut faces = Vec::new();
    for i in 0..12 {
        for j in i + 1..12 {
            for k in j + 1..12 {
                if adj(&verts[i], &verts[j])
                    && adj(&verts[j], &verts[k])
                    && adj(&verts[i], &verts[k])
                {
                    faces.push([i, j, k]);
                }
            }
        }
    }
    while verts.len() < min_count {
        let mut cache = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(normalize3([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub value: f64,
    pub error_bar: f64,
    pub lower_bound: f64,
}

/// Outcome of one structural check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub applicable: bool,
    pub passed: bool,
    /// Largest violation found (nonpositive when passed).
    pub worst: f64,
    pub detail: String,
}

/// `H̄` sampled on a direction fan, extended to `ℝ^N` by homogeneity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectiveHamiltonian {
    pub dim: usize,
    pub field_name: String,
    pub directions: Vec<Vec<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub entries: Vec<Option<TableEntry>>,
    pub holes: Vec<(usize, String)>,
    pub sup_norm: f64,
    /// `⟨V⟩ + ⟨x div V⟩`.
    pub drift: Vec<f64>,
    /// `∫₀¹ (1 − c_I ‖div V‖) dt`.
    pub laminar_factor: f64,
    pub hypothesis_holds: bool,
    pub method: Option<Method>,
    pub checks: Vec<Check>,
    /// Per-direction pass flag over all checks that involve it.
    pub row_ok: Vec<bool>,
}

impl EffectiveHamiltonian {
    /// A table from a closed-form `H̄` with zero error bars.
    pub fn from_fn(dim: usize, m: usize, sup_norm: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let fan = direction_fan(dim, m)?;
        let entries = fan
            .directions
            .iter()
            .map(|p| {
                Some(TableEntry {
                    value: f(p),
                    error_bar: 0.0,
                    lower_bound: f64::NEG_INFINITY,
                })
            })
            .collect();
        let mut t = EffectiveHamiltonian {
            dim,
            field_name: "closed_form".into(),
            row_ok: vec![true; fan.directions.len()],
            directions: fan.directions,
            faces: fan.faces,
            entries,
            holes: Vec::new(),
            sup_norm,
            drift: vec![0.0; dim],
            laminar_factor: 0.0,
            hypothesis_holds: false,
            method: None,
            checks: Vec::new(),
        };
        t.run_checks();
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Table values, failing on holes.
    pub fn values(&self) -> Result<Vec<f64>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.as_ref().map(|e| e.value).ok_or_else(|| {
                    Error::Discretization(format!("table has a hole at direction {i}"))
                })
            })
            .collect()
    }

    pub fn error_bars(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| e.as_ref().map_or(f64::NAN, |e| e.error_bar))
            .collect()
    }

    /// The positively 1-homogeneous extension, linear on the cones spanned
    /// by neighbouring fan directions.
    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        let r = norm(p);
        if r == 0.0 {
            return Ok(0.0);
        }
        let vals = self.values()?;
        match self.dim {
            1 => Ok(if p[0] > 0.0 {
                p[0] * vals[0]
            } else {
                -p[0] * vals[1]
            }),
            2 => {
                let m = self.directions.len();
                let step = std::f64::consts::TAU / m as f64;
                let ang = p[1].atan2(p[0]).rem_euclid(std::f64::consts::TAU);
                let k = ((ang / step).floor() as usize).min(m - 1);
                let (a, b) = (&self.directions[k], &self.directions[(k + 1) % m]);
                let det = a[0] * b[1] - a[1] * b[0];
                let ca = (p[0] * b[1] - p[1] * b[0]) / det;
                let cb = (a[0] * p[1] - a[1] * p[0]) / det;
                Ok(ca * vals[k] + cb * vals[(k + 1) % m])
            }
            _ => {
                for f in &self.faces {
                    let (a, b, c) = (
                        &self.directions[f[0]],
                        &self.directions[f[1]],
                        &self.directions[f[2]],
                    );
                    let det = triple(a, b, c);
                    let ca = triple(p, b, c) / det;
                    let cb = triple(a, p, c) / det;
                    let cc = triple(a, b, p) / det;
                    if ca >= -1e-12 && cb >= -1e-12 && cc >= -1e-12 {
                        return Ok(ca * vals[f[0]] + cb * vals[f[1]] + cc * vals[f[2]]);
                    }
                }
                Err(Error::Discretization(
                    "direction outside every fan cone".into(),
                ))
            }
        }
    }

    /// Recomputes every structural check.
    pub fn run_checks(&mut self) {
        self.row_ok = self.entries.iter().map(Option::is_some).collect();
        let mut checks = vec![
            self.check_nonnegative(),
            Check {
                name: "homogeneity".into(),
                applicable: true,
                passed: true,
                worst: 0.0,
                detail: "exact by construction of the extension".into(),
            },
            self.check_convexity(),
            self.check_lipschitz(),
            self.check_lower_bound(),
        ];
        checks.extend(
            self.checks
                .drain(..)
                .filter(|c| c.name.starts_with("scaling")),
        );
        self.checks = checks;
    }

    pub fn all_passed(&self) -> bool {
        self.holes.is_empty() && self.checks.iter().all(|c| c.passed || !c.applicable)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn check_nonnegative(&mut self) -> Check {
        let mut worst = f64::NEG_INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(e) = e {
                let v = -(e.value + e.error_bar);
                worst = worst.max(v);
                if v > 0.0 {
                    self.row_ok[i] = false;
                }
            }
        }
        Check {
            name: "nonnegative".into(),
            applicable: true,
            passed: worst <= 0.0,
            worst,
            detail: "H̄ + err ≥ 0".into(),
        }
    }

    /// Midpoint convexity on every pair whose normalized midpoint is itself
    /// a fan direction: `|m| H̄(m/|m|) ≤ (H̄(P_i) + H̄(P_j))/2`.
    pub fn check_convexity(&mut self) -> Check {
        let mut worst = f64::NEG_INFINITY;
        let mut count = 0;
        let n = self.directions.len();
        for i in 0..n {
            for j in i + 1..n {
                let (Some(ei), Some(ej)) = (&self.entries[i], &self.entries[j]) else {
                    continue;
                };
                let mid: Vec<f64> = self.directions[i]
                    .iter()
                    .zip(&self.directions[j])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                let r = norm(&mid);
                if r < 1e-9 {
                    continue;
                }
                let unit: Vec<f64> = mid.iter().map(|x| x / r).collect();
                let Some(k) = (0..n).find(|&k| {
                    self.directions[k]
                        .iter()
                        .zip(&unit)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        < 1e-18
                }) else {
                    continue;
                };
                let Some(ek) = &self.entries[k] else { continue };
                count += 1;
                let slack = r * ek.error_bar + 0.5 * (ei.error_bar + ej.error_bar) + 1e-12;
                let v = r * ek.value - 0.5 * (ei.value + ej.value) - slack;
                worst = worst.max(v);
                if v > 0.0 {
                    self.row_ok[i] = false;
                    self.row_ok[j] = false;
                    self.row_ok[k] = false;
                }
            }
        }
        Check {
            name: "convexity".into(),
            applicable: count > 0,
            passed: worst <= 0.0,
            worst: if count > 0 { worst } else { 0.0 },
            detail: format!("{count} midpoint triples"),
        }
    }

    /// `|H̄(P) − H̄(Q)| ≤ (1 + ‖V‖)|P − Q|` over all pairs.
    pub fn check_lipschitz(&mut self) -> Check {
        let lip = 1.0 + self.sup_norm;
        let mut worst = f64::NEG_INFINITY;
        let n = self.directions.len();
        for i in 0..n {
            for j in i + 1..n {
                let (Some(ei), Some(ej)) = (&self.entries[i], &self.entries[j]) else {
                    continue;
                };
                let d: f64 = self.directions[i]
                    .iter()
                    .zip(&self.directions[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let v = (ei.value - ej.value).abs() - lip * d - ei.error_bar - ej.error_bar - 1e-12;
                worst = worst.max(v);
                if v > 0.0 {
                    self.row_ok[i] = false;
                    self.row_ok[j] = false;
                }
            }
        }
        Check {
            name: "lipschitz".into(),
            applicable: n > 1,
            passed: worst <= 0.0,
            worst,
            detail: format!("constant 1 + ‖V‖ = {lip}"),
        }
    }

    /// `H̄(P) ≥ |P| ∫(1 − c_I‖div V‖) + ⟨⟨V⟩ + ⟨x div V⟩, P⟩ − err`, applied
    /// when the small-divergence hypothesis holds.
    pub fn check_lower_bound(&mut self) -> Check {
        let mut worst = f64::NEG_INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(e) = e {
                let v = e.lower_bound - e.value - e.error_bar;
                worst = worst.max(v);
                if self.hypothesis_holds && v > 1e-12 {
                    self.row_ok[i] = false;
                }
            }
        }
        Check {
            name: "lower_bound".into(),
            applicable: self.hypothesis_holds,
            passed: worst <= 1e-12,
            worst,
            detail: format!("laminar factor {}", self.laminar_factor),
        }
    }

    /// CSV with columns `angle` (2D) or direction components, `hbar`,
    /// `err`, `lower_bound`, `checks_passed`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        if self.dim == 2 {
            write!(w, "angle,")?;
        }
        for k in 0..self.dim {
            write!(w, "p{k},")?;
        }
        writeln!(w, "hbar,err,lower_bound,checks_passed")?;
        for (i, p) in self.directions.iter().enumerate() {
            if self.dim == 2 {
                write!(w, "{},", p[1].atan2(p[0]).rem_euclid(std::f64::consts::TAU))?;
            }
            for x in p {
                write!(w, "{x},")?;
            }
            match &self.entries[i] {
                Some(e) => writeln!(
                    w,
                    "{},{},{},{}",
                    e.value, e.error_bar, e.lower_bound, self.row_ok[i]
                )?,
                None => writeln!(w, "NaN,NaN,NaN,false")?,
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)
    }
}

fn triple(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
}

/// Right-hand side of the strict lower bound:
/// `|P| ∫₀¹ (1 − c_I ‖div V(·,t)‖) dt + ⟨⟨V⟩ + ⟨x div V⟩, P⟩`.
pub fn lower_bound(p: &[f64], diag: &FieldDiagnostics) -> f64 {
    norm(p) * diag.laminar_factor() + dot(&diag.drift_vector(), p)
}

/// Computes `H̄` on an `m`-direction fan, then records the structural
/// checks, including a scaling probe `H̄(sP₀) = sH̄(P₀)` for each `s`.
pub fn build_table_with(
    field: &dyn VelocityField,
    m: usize,
    cfg: &EstimatorConfig,
    scaling: &[f64],
) -> Result<EffectiveHamiltonian> {
    let dim = field.dim();
    if dim == 2 && m < 8 {
        return Err(Error::param(
            "m",
            "at least 8 directions are required in 2D",
        ));
    }
    let fan = direction_fan(dim, m)?;
    let diag = cfg.diagnostics(field)?;
    let results: Vec<Result<HbarEstimate>> = fan
        .directions
        .par_iter()
        .map(|p| cfg.estimate(field, p, &diag))
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut holes = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => entries.push(Some(TableEntry {
                value: e.value,
                error_bar: e.error_bar,
                lower_bound: lower_bound(&fan.directions[i], &diag),
            })),
            Err(err) => {
                holes.push((i, err.to_string()));
                entries.push(None);
            }
        }
    }
    let mut table = EffectiveHamiltonian {
        dim,
        field_name: field.name(),
        row_ok: vec![true; entries.len()],
        directions: fan.directions,
        faces: fan.faces,
        entries,
        holes,
        sup_norm: field.sup_norm(),
        drift: diag.drift_vector(),
        laminar_factor: diag.laminar_factor(),
        hypothesis_holds: diag.hypothesis_holds(),
        method: Some(cfg.method),
        checks: Vec::new(),
    };
    if let Some(Some(base)) = table.entries.first().cloned() {
        for &s in scaling {
            let p: Vec<f64> = table.directions[0].iter().map(|x| s * x).collect();
            let check = match cfg.estimate(field, &p, &diag) {
                Ok(e) => {
                    let v = (e.value - s * base.value).abs() - e.error_bar - s * base.error_bar;
                    Check {
                        name: format!("scaling_{s}"),
                        applicable: true,
                        passed: v <= 1e-12,
                        worst: v,
                        detail: format!("H̄(sP) = {}, s H̄(P) = {}", e.value, s * base.value),
                    }
                }
                Err(err) => Check {
                    name: format!("scaling_{s}"),
                    applicable: true,
                    passed: false,
                    worst: f64::INFINITY,
                    detail: err.to_string(),
                },
            };
            table.checks.push(check);
        }
    }
    table.run_checks();
    Ok(table)
}

/// [`build_table_with`] with a single scaling probe at `s = 2`.
pub fn build_table(
    field: &dyn VelocityField,
    m: usize,
    cfg: &EstimatorConfig,
) -> Result<EffectiveHamiltonian> {
    build_table_with(field, m, cfg, &[2.0])
}

// ---------------------------------------------------------------------------
// Galilean shift
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftReport {
    pub p: Vec<f64>,
    /// `∫₀¹ c(s) ds`.
    pub cbar: Vec<f64>,
    pub base: HbarEstimate,
    pub shifted: HbarEstimate,
    /// `H̄_V(P) − ⟨c̄, P⟩`.
    pub expected: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `H̄` for `V − c(t)` with `H̄_V(P) − ⟨c̄, P⟩`. Both problems are
/// solved on the same grid (dissipation sized for the larger field).
pub fn shift_property_check(
    field: Arc<dyn VelocityField>,
    c: &[Profile],
    p: &[f64],
    cfg: &EstimatorConfig,
) -> Result<ShiftReport> {
    let prepared = ShiftSetup::new(field, c, cfg)?;
    prepared.compare(p, cfg)
}

/// [`shift_property_check`] over every direction of an `m`-fan.
pub fn shift_property_sweep(
    field: Arc<dyn VelocityField>,
    c: &[Profile],
    m: usize,
    cfg: &EstimatorConfig,
) -> Result<Vec<ShiftReport>> {
    let prepared = ShiftSetup::new(field.clone(), c, cfg)?;
    let fan = direction_fan(field.dim(), m)?;
    fan.directions
        .par_iter()
        .map(|p| prepared.compare(p, cfg))
        .collect()
}

struct ShiftSetup {
    base: Arc<dyn VelocityField>,
    shifted: Drifted,
    cbar: Vec<f64>,
    base_diag: FieldDiagnostics,
    shifted_diag: FieldDiagnostics,
}

impl ShiftSetup {
    fn new(field: Arc<dyn VelocityField>, c: &[Profile], cfg: &EstimatorConfig) -> Result<Self> {
        let neg: Vec<Profile> = c.iter().map(|pr| pr.clone().scaled(-1.0)).collect();
        let shifted = Drifted::new(field.clone(), neg)?;
        let cbar = c.iter().map(Profile::mean).collect();
        Ok(ShiftSetup {
            base_diag: cfg.diagnostics(field.as_ref())?,
            shifted_diag: cfg.diagnostics(&shifted)?,
            base: field,
            shifted,
            cbar,
        })
    }

    fn compare(&self, p: &[f64], cfg: &EstimatorConfig) -> Result<ShiftReport> {
        let mut grid = cfg.grid_for(&self.shifted, cfg.n);
        let base_grid = cfg.grid_for(self.base.as_ref(), cfg.n);
        for (d, b) in grid.dissipation.iter_mut().zip(&base_grid.dissipation) {
            *d = d.max(*b);
        }
        let base = cfg.estimate_on(self.base.as_ref(), p, &self.base_diag, &grid)?;
        let shifted = cfg.estimate_on(&self.shifted, p, &self.shifted_diag, &grid)?;
        let expected = base.value - dot(&self.cbar, p);
        let deviation = (shifted.value - expected).abs();
        let tolerance = base.error_bar + shifted.error_bar;
        Ok(ShiftReport {
            p: p.to_vec(),
            cbar: self.cbar.clone(),
            passed: deviation <= tolerance + 1e-12,
            base,
            shifted,
            expected,
            deviation,
            tolerance,
        })
    }
}

// ---------------------------------------------------------------------------
// Steady enhancement
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnhancementReport {
    pub p: Vec<f64>,
    /// `⟨V, P⟩ ≢ 0` on the sample grid.
    pub enhanced: bool,
    /// A maximizer of `|⟨V(x), P⟩|` when enhanced.
    pub witness: Option<Vec<f64>>,
    pub max_advection: f64,
    pub estimate: HbarEstimate,
    /// `H̄(P) > |P| + err`.
    pub numeric_enhanced: bool,
    pub consistent: bool,
}

/// Largest `|⟨V(x), P⟩|` over the midpoints of a `resolution^N` grid, and
/// where it occurs.
pub fn max_advection(
    field: &dyn VelocityField,
    p: &[f64],
    t: f64,
    resolution: usize,
) -> (f64, Vec<f64>) {
    let dim = field.dim();
    let axes: Vec<Vec<f64>> = (0..dim).map(|_| midpoints(resolution)).collect();
    let mut best = (f64::NEG_INFINITY, vec![0.0; dim]);
    let mut x = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    for_each_cell(&axes, |_, idx| {
        for (k, &i) in idx.iter().enumerate() {
            x[k] = axes[k][i];
        }
        field.eval(&x, t, &mut v);
        let a = dot(&v, p).abs();
        if a > best.0 {
            best = (a, x.clone());
        }
    });
    best
}

const HYPOTHESIS_TOL: f64 = 1e-6;

fn require_divergence_free_mean_zero(diag: &FieldDiagnostics, per_time: bool) -> Result<()> {
    let div = diag.div_norm.iter().copied().fold(0.0, f64::max);
    if div > HYPOTHESIS_TOL {
        return Err(Error::Hypothesis(format!(
            "field is not divergence free (‖div V‖ = {div:e})"
        )));
    }
    let mean = norm(&diag.mean_v);
    if mean > HYPOTHESIS_TOL {
        let what = if per_time {
            "spatial mean at some time"
        } else {
            "mean"
        };
        return Err(Error::Hypothesis(format!(
            "field has nonzero {what} (|⟨V⟩| = {mean:e})"
        )));
    }
    Ok(())
}

/// Steady enhancement dichotomy: `H̄(P) = |P|` exactly when `⟨V, P⟩ ≡ 0`.
/// The analytic verdict is compared with the numeric one.
pub fn enhancement_test_steady(
    field: &dyn VelocityField,
    p: &[f64],
    cfg: &EstimatorConfig,
    resolution: usize,
) -> Result<EnhancementReport> {
    if !field.is_steady() {
        return Err(Error::Hypothesis(
            "enhancement test needs a time-independent field".into(),
        ));
    }
    let diag = cfg.diagnostics(field)?;
    require_divergence_free_mean_zero(&diag, false)?;
    let pn = norm(p);
    let (max, at) = max_advection(field, p, 0.0, resolution);
    let tol = 1e-9 * (1.0 + field.sup_norm()) * pn.max(1e-300);
    let enhanced = max > tol;
    let estimate = cfg.estimate(field, p, &diag)?;
    let numeric_enhanced = estimate.value > pn + estimate.error_bar;
    Ok(EnhancementReport {
        p: p.to_vec(),
        enhanced,
        witness: enhanced.then_some(at),
        max_advection: max,
        numeric_enhanced,
        consistent: enhanced == numeric_enhanced,
        estimate,
    })
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

/// A one-dimensional 1-periodic profile sampled at `s_j = (j + 1/2)/m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zhat {
    pub samples: Vec<f64>,
}

/// Sample increments above this are treated as upward jumps.
const JUMP: f64 = 0.1;

impl Zhat {
    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Self {
        Zhat {
            samples: (0..m).map(|j| f((j as f64 + 0.5) / m as f64)).collect(),
        }
    }

    /// `ẑ(s) = [s] − s`.
    pub fn sawtooth(m: usize) -> Self {
        Self::from_fn(m, |s| s.floor() - s)
    }

    pub fn zero(m: usize) -> Self {
        Zhat {
            samples: vec![0.0; m],
        }
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.samples.len() as f64
    }

    fn at(&self, j: isize) -> f64 {
        self.samples[j.rem_euclid(self.samples.len() as isize) as usize]
    }

    /// Smallest increment between consecutive samples (wrapping).
    pub fn min_increment(&self) -> f64 {
        let m = self.samples.len() as isize;
        (0..m)
            .map(|j| self.at(j + 1) - self.at(j))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_constant(&self) -> bool {
        self.samples.iter().all(|&z| z == self.samples[0])
    }

    /// Piecewise-linear reconstruction; an interval holding an upward jump
    /// is filled by one-sided extrapolation from both sides, split at its
    /// midpoint.
    pub fn eval(&self, s: f64) -> f64 {
        let m = self.samples.len();
        let pos = s.rem_euclid(1.0) * m as f64 - 0.5;
        let j = pos.floor() as isize;
        let w = pos - j as f64;
        let (zl, zr) = (self.at(j), self.at(j + 1));
        if zr - zl > JUMP {
            if w < 0.5 {
                zl + (zl - self.at(j - 1)) * w
            } else {
                zr - (self.at(j + 2) - zr) * (1.0 - w)
            }
        } else {
            zl + (zr - zl) * w
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    /// `⟨V, P⟩ ≡ 0` for a steady field; the corrector is zero.
    Orthogonality,
    /// `z(x, t) = ẑ(⟨P, x⟩/|P| + t)`.
    TravelingCorrector,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateOptions {
    /// Highest frequency per axis of the trigonometric test functions.
    pub degree: usize,
    /// Midpoint quadrature cells per axis.
    pub resolution: usize,
    /// Sample times `k / times`.
    pub times: usize,
    pub seeds: usize,
    pub seed: u64,
    /// Length of each characteristic in the frozen-time flow.
    pub flow_time: f64,
    pub tolerance: f64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        CertificateOptions {
            degree: 4,
            resolution: 512,
            times: 8,
            seeds: 100,
            seed: 7,
            flow_time: 1.0,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnhancementCertificate {
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub kind: CertificateKind,
    pub zhat: Zhat,
    pub min_increment: f64,
    pub slope_floor_ok: bool,
    /// `max_ψ |∫ψ⟨P,V⟩ − ∫⟨Dψ, zV⟩|` over the test basis and sample times.
    pub residual: f64,
    /// `max |w(X(s), t) − w(X(0), t)|`, `w = z + ⟨P, x⟩`, along
    /// `X' = V(X, t)` at frozen `t`.
    pub flow_drift: f64,
    pub degree: usize,
    pub tolerance: f64,
}

impl EnhancementCertificate {
    pub fn holds(&self) -> bool {
        self.slope_floor_ok && self.residual <= self.tolerance && self.flow_drift <= self.tolerance
    }

    pub fn report_json(&self) -> serde_json::Value {
        serde_json::json!({
            "P": self.p,
            "kind": self.kind,
            "residual": self.residual,
            "flow_drift": self.flow_drift,
            "slope_floor_ok": self.slope_floor_ok,
            "min_increment": self.min_increment,
            "holds": self.holds(),
        })
    }
}

/// Checks that `z(x,t) = ẑ(⟨P,x⟩/|P| + t)` satisfies
/// `div((z + ⟨P,x⟩) V) = 0` weakly, and that `z + ⟨P,x⟩` is constant along
/// the frozen-time flow of `V`.
pub fn verify_certificate(
    field: &dyn VelocityField,
    p: &[f64],
    zhat: &Zhat,
    opts: &CertificateOptions,
) -> Result<EnhancementCertificate> {
    let dim = field.dim();
    if p.len() != dim {
        return Err(Error::param("P", "dimension differs from the field"));
    }
    let pn = norm(p);
    if pn == 0.0 {
        return Err(Error::param("P", "must be nonzero"));
    }
    if zhat.samples.len() < 4 {
        return Err(Error::param("zhat", "need at least four samples"));
    }
    if opts.resolution < 16 || opts.times == 0 {
        return Err(Error::param(
            "resolution",
            "need at least 16 cells and one time",
        ));
    }
    let unit: Vec<f64> = p.iter().map(|x| x / pn).collect();
    if unit.iter().any(|u| (u - u.round()).abs() > 1e-9) {
        return Err(Error::param(
            "P",
            "P/|P| must be a lattice vector for z to be periodic",
        ));
    }
    let diag = crate::fields::diagnostics(field, 32, crate::fields::default_c_i(dim))?;
    require_divergence_free_mean_zero(&diag, true)?;
    let min_increment = zhat.min_increment();
    let slope_floor_ok = min_increment >= -pn * zhat.spacing() - 1e-12;
    if !slope_floor_ok {
        return Err(Error::Hypothesis(format!(
            "zhat violates the slope floor: increment {min_increment} < -|P| ds"
        )));
    }
    let kind = if field.is_steady() && zhat.is_constant() {
        CertificateKind::Orthogonality
    } else {
        CertificateKind::TravelingCorrector
    };
    let z = |x: &[f64], t: f64| zhat.eval(dot(&unit, x) + t);

    let res = opts.resolution;
    let axes: Vec<Vec<f64>> = (0..dim).map(|_| midpoints(res)).collect();
    let deg = opts.degree as isize;
    let freqs: Vec<isize> = (-deg..=deg).collect();
    let nf = freqs.len();
    // per-axis phase tables e^{2πi k x}
    let phase: Vec<Vec<(f64, f64)>> = freqs
        .iter()
        .map(|&k| {
            axes[0]
                .iter()
                .map(|&x| {
                    let a = std::f64::consts::TAU * k as f64 * x;
                    (a.cos(), a.sin())
                })
                .collect()
        })
        .collect();
    let modes = nf.pow(dim as u32);
    let cell = 1.0 / (res as f64).powi(dim as i32);
    let mut residual = 0.0f64;
    let mut x = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    for step in 0..opts.times {
        let t = step as f64 / opts.times as f64;
        // coefficients ∫ e^{2πik·x} g(x) for g = z V_j and ⟨P, V⟩
        let mut zv = vec![vec![(0.0, 0.0); modes]; dim];
        let mut pv = vec![(0.0, 0.0); modes];
        for_each_cell(&axes, |_, idx| {
            for (k, &i) in idx.iter().enumerate() {
                x[k] = axes[k][i];
            }
            field.eval(&x, t, &mut v);
            let zz = z(&x, t);
            let adv = dot(p, &v);
            for mode in 0..modes {
                let (mut re, mut im) = (1.0, 0.0);
                let mut r = mode;
                for a in (0..dim).rev() {
                    let (c, s) = phase[r % nf][idx[a]];
                    r /= nf;
                    (re, im) = (re * c - im * s, re * s + im * c);
                }
                for j in 0..dim {
                    zv[j][mode].0 += re * zz * v[j] * cell;
                    zv[j][mode].1 += im * zz * v[j] * cell;
                }
                pv[mode].0 += re * adv * cell;
                pv[mode].1 += im * adv * cell;
            }
        });
        for mode in 0..modes {
            let mut ks = vec![0isize; dim];
            let mut r = mode;
            for a in (0..dim).rev() {
                ks[a] = freqs[r % nf];
                r /= nf;
            }
            // ψ = e^{2πik·x}:  ∫ψ⟨P,V⟩ − ∫ Dψ · zV,  Dψ = 2πi k ψ
            let (mut re, mut im) = pv[mode];
            for j in 0..dim {
                let w = std::f64::consts::TAU * ks[j] as f64;
                let (a, b) = zv[j][mode];
                re += w * b;
                im -= w * a;
            }
            residual = residual.max(re.abs()).max(im.abs());
        }
    }

    // frozen-time characteristics
    let sup = field.sup_norm();
    let dt = (1.0 / res as f64) / (2.0 * sup + 1.0);
    let steps = (opts.flow_time / dt).ceil() as usize;
    let h = opts.flow_time / steps as f64;
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let seeds: Vec<Vec<f64>> = (0..opts.seeds)
        .map(|_| (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let w = |x: &[f64], t: f64| z(x, t) + dot(p, x);
    let drift = seeds
        .par_iter()
        .map(|x0| {
            let mut worst = 0.0f64;
            let mut k1 = vec![0.0; dim];
            let mut k2 = vec![0.0; dim];
            let mut k3 = vec![0.0; dim];
            let mut k4 = vec![0.0; dim];
            let mut tmp = vec![0.0; dim];
            for step in 0..opts.times {
                let t = step as f64 / opts.times as f64;
                let mut x = x0.clone();
                let w0 = w(&x, t);
                for _ in 0..steps {
                    field.eval(&x, t, &mut k1);
                    for k in 0..dim {
                        tmp[k] = x[k] + 0.5 * h * k1[k];
                    }
                    field.eval(&tmp, t, &mut k2);
                    for k in 0..dim {
                        tmp[k] = x[k] + 0.5 * h * k2[k];
                    }
                    field.eval(&tmp, t, &mut k3);
                    for k in 0..dim {
                        tmp[k] = x[k] + h * k3[k];
                    }
                    field.eval(&tmp, t, &mut k4);
                    for k in 0..dim {
                        x[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
                    }
                    worst = worst.max((w(&x, t) - w0).abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max);

    Ok(EnhancementCertificate {
        p: p.to_vec(),
        kind,
        zhat: zhat.clone(),
        min_increment,
        slope_floor_ok,
        residual,
        flow_drift: drift,
        degree: opts.degree,
        tolerance: opts.tolerance,
    })
}

// ---------------------------------------------------------------------------
// Slowly varying fields
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuitySample {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    /// `max_P |H̄(x_i, P) − H̄(x_j, P)|` over the fan.
    pub difference: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlowHbarTable {
    pub macro_points: Vec<Vec<f64>>,
    pub directions: Vec<Vec<f64>>,
    /// `values[j][i] = H̄(x_j, P_i)`; `NaN` marks a hole.
    pub values: Vec<Vec<f64>>,
    pub errors: Vec<Vec<f64>>,
    /// `∫∫ V(x_j, y, s) dy ds`.
    pub means: Vec<Vec<f64>>,
    /// `|∫∫ V(x_j, ·, ·)| < 1` at each point.
    pub bound_ok: Vec<bool>,
    /// `H̄(x_j, P) ≥ |P| + ⟨∫∫V, P⟩ − err` over the fan.
    pub lower_bound_ok: Vec<bool>,
    pub continuity: Vec<ContinuitySample>,
}

impl SlowHbarTable {
    /// Largest difference observed at distance at most `r`.
    pub fn modulus(&self, r: f64) -> f64 {
        self.continuity
            .iter()
            .filter(|c| c.distance <= r + 1e-12)
            .map(|c| c.difference)
            .fold(0.0, f64::max)
    }
}

/// `H̄(x_j, ·)` on an `m`-fan for each frozen macro point `x_j`.
pub fn slow_table(
    field: Arc<dyn SlowVelocityField>,
    macro_points: &[Vec<f64>],
    m: usize,
    cfg: &EstimatorConfig,
) -> Result<SlowHbarTable> {
    let dim = field.dim();
    if macro_points.iter().any(|x| x.len() != dim) {
        return Err(Error::param(
            "macro_points",
            "dimension differs from the field",
        ));
    }
    let fan = direction_fan(dim, m)?;
    let mut values = Vec::new();
    let mut errors = Vec::new();
    let mut means = Vec::new();
    let mut bound_ok = Vec::new();
    let mut lower_bound_ok = Vec::new();
    for x in macro_points {
        let slice = FrozenSlice::new(field.clone(), x.clone());
        let diag = cfg.diagnostics(&slice)?;
        let mean = diag.mean_v.clone();
        let ok = norm(&mean) < 1.0;
        let table = build_table_with(&slice, m, cfg, &[])?;
        let row: Vec<f64> = table
            .entries
            .iter()
            .map(|e| e.as_ref().map_or(f64::NAN, |e| e.value))
            .collect();
        let err = table.error_bars();
        let lb_ok = fan
            .directions
            .iter()
            .zip(row.iter().zip(&err))
            .all(|(p, (v, e))| v.is_nan() || *v + *e >= norm(p) + dot(&mean, p) - 1e-12);
        values.push(row);
        errors.push(err);
        means.push(mean);
        bound_ok.push(ok);
        lower_bound_ok.push(lb_ok);
    }
    let mut continuity = Vec::new();
    for i in 0..macro_points.len() {
        for j in i + 1..macro_points.len() {
            let distance = macro_points[i]
                .iter()
                .zip(&macro_points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let difference = values[i]
                .iter()
                .zip(&values[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            continuity.push(ContinuitySample {
                i,
                j,
                distance,
                difference,
            });
        }
    }
    Ok(SlowHbarTable {
        macro_points: macro_points.to_vec(),
        directions: fan.directions,
        values,
        errors,
        means,
        bound_ok,
        lower_bound_ok,
        continuity,
    })
}
