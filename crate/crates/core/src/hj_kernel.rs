//! Monotone finite-difference solver for
//! `u_t = |Du + P| + ⟨V(x/ε, t/ε), Du + P⟩ − λu` on uniform grids.
//!
//! Values are cell centered. The affine part `⟨P, x⟩` is never stored: the
//! grid holds the periodic remainder and `P` is threaded through the flux.
//! Time stepping is explicit on the global Lax–Friedrichs flux with the
//! damping integrated exactly, `u ← e^{−λdt}u + (1 − e^{−λdt})/λ · H_num`,
//! so that constants `H/λ` are fixed points of the discrete map.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{for_each_cell, VelocityField};

pub const DEFAULT_CFL: f64 = 0.5;

const TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Wraparound indexing.
    Periodic,
    /// Zero-gradient ghost cells (macro boxes whose boundary is never reached).
    Clamped,
}

/// Uniform grid of `n^dim` cells on `[origin, origin + n·dx)^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub n: usize,
    pub dx: f64,
    pub origin: f64,
    pub cfl_factor: f64,
    /// Per-axis numerical viscosity; must dominate `1 + max|V_i|`.
    pub dissipation: Vec<f64>,
    pub boundary: Boundary,
}

impl GridSpec {
    /// The periodic unit cell `[-1/2, 1/2)^dim` with `n` cells per axis.
    pub fn unit_cell(dim: usize, n: usize) -> Self {
        GridSpec {
            dim,
            n,
            dx: 1.0 / n as f64,
            origin: -0.5,
            cfl_factor: DEFAULT_CFL,
            dissipation: vec![1.0; dim],
            boundary: Boundary::Periodic,
        }
    }

    /// A box `[-side/2, side/2)^dim` with `n` cells per axis.
    pub fn centered_box(dim: usize, n: usize, side: f64, boundary: Boundary) -> Self {
        GridSpec {
            dim,
            n,
            dx: side / n as f64,
            origin: -side / 2.0,
            cfl_factor: DEFAULT_CFL,
            dissipation: vec![1.0; dim],
            boundary,
        }
    }

    pub fn with_cfl(mut self, cfl: f64) -> Self {
        self.cfl_factor = cfl;
        self
    }

    /// Sets `dissipation[i] = 1 + max|V_i|`, the monotonicity threshold.
    pub fn with_field(mut self, field: &dyn VelocityField) -> Self {
        self.dissipation = field.component_bounds().iter().map(|b| 1.0 + b).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::UnsupportedDimension {
                dim: self.dim,
                what: "grid",
            });
        }
        if self.n < 2 {
            return Err(Error::param("n", "need at least two cells per axis"));
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 1.0) {
            return Err(Error::param("cfl_factor", "must lie in (0, 1]"));
        }
        if self.dissipation.len() != self.dim
            || self
                .dissipation
                .iter()
                .any(|d| !(d.is_finite() && *d >= 0.0))
        {
            return Err(Error::param(
                "dissipation",
                "one nonnegative value per axis",
            ));
        }
        if !(self.dx.is_finite() && self.dx > 0.0) {
            return Err(Error::param("dx", "must be positive"));
        }
        Ok(())
    }

    /// Checks the monotonicity condition against a field.
    pub fn check_field(&self, field: &dyn VelocityField) -> Result<()> {
        if field.dim() != self.dim {
            return Err(Error::param("field", "dimension differs from the grid"));
        }
        for (i, (d, b)) in self
            .dissipation
            .iter()
            .zip(field.component_bounds())
            .enumerate()
        {
            if *d < 1.0 + b - 1e-12 {
                return Err(Error::Discretization(format!(
                    "dissipation[{i}] = {d} is below 1 + max|V_{i}| = {}",
                    1.0 + b
                )));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn side(&self) -> f64 {
        self.n as f64 * self.dx
    }

    /// Step from the CFL factor: `cfl · dx / Σ dissipation`.
    pub fn dt(&self) -> f64 {
        self.cfl_factor * self.dx / self.dissipation.iter().sum::<f64>()
    }

    /// Largest step preserving monotonicity with damping `λ`.
    pub fn admissible_dt(&self, lambda: f64) -> f64 {
        let base = self.dx / self.dissipation.iter().sum::<f64>();
        base * (-lambda.max(0.0) * base).exp()
    }

    /// A step dividing `unit` into an integer number of substeps.
    pub fn aligned_dt(&self, unit: f64) -> f64 {
        unit / (unit / self.dt()).ceil()
    }

    pub fn center(&self, i: usize) -> f64 {
        self.origin + (i as f64 + 0.5) * self.dx
    }

    pub fn axes(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|_| (0..self.n).map(|i| self.center(i)).collect())
            .collect()
    }

    /// Row-major multi-index of a flat cell index.
    pub fn index(&self, c: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim];
        let mut r = c;
        for a in (0..self.dim).rev() {
            idx[a] = r % self.n;
            r /= self.n;
        }
        idx
    }

    pub fn position(&self, c: usize) -> Vec<f64> {
        self.index(c).into_iter().map(|i| self.center(i)).collect()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.n + i)
    }
}

/// Cell-centered scalar values on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub time_stamp: f64,
}

impl GridField {
    pub fn constant(grid: &GridSpec, value: f64) -> Self {
        GridField {
            values: vec![value; grid.cells()],
            grid: grid.clone(),
            time_stamp: 0.0,
        }
    }

    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let axes = grid.axes();
        let mut values = vec![0.0; grid.cells()];
        let mut x = vec![0.0; grid.dim];
        for_each_cell(&axes, |c, idx| {
            for (k, &i) in idx.iter().enumerate() {
                x[k] = axes[k][i];
            }
            values[c] = f(&x);
        });
        GridField {
            grid: grid.clone(),
            values,
            time_stamp: 0.0,
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn osc(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sup_distance(&self, other: &GridField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Value at a cell multi-index, wrapping periodically.
    pub fn at(&self, idx: &[isize]) -> f64 {
        let n = self.grid.n as isize;
        let flat = idx.iter().fold(0usize, |acc, &i| {
            acc * self.grid.n + i.rem_euclid(n) as usize
        });
        self.values[flat]
    }

    /// Text format: header line
    /// `# gridfield dim=D n=N time_stamp=T origin=O dx=H`, then one value per
    /// line in row-major order.
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "# gridfield dim={} n={} time_stamp={:e} origin={:e} dx={:e}",
            self.grid.dim, self.grid.n, self.time_stamp, self.grid.origin, self.grid.dx
        )?;
        for v in &self.values {
            writeln!(w, "{v:e}")?;
        }
        Ok(())
    }

    pub fn read_text(r: &mut impl BufRead) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        if !header.starts_with("# gridfield") {
            return Err(Error::Config("missing `# gridfield` header".into()));
        }
        let mut dim = 0usize;
        let mut n = 0usize;
        let mut time_stamp = 0.0;
        let mut origin = None;
        let mut dx = None;
        for tok in header.split_whitespace().filter(|t| t.contains('=')) {
            let (k, v) = tok.split_once('=').unwrap();
            let bad = || Error::Config(format!("bad gridfield header value `{tok}`"));
            match k {
                "dim" => dim = v.parse().map_err(|_| bad())?,
                "n" => n = v.parse().map_err(|_| bad())?,
                "time_stamp" => time_stamp = v.parse().map_err(|_| bad())?,
                "origin" => origin = Some(v.parse().map_err(|_| bad())?),
                "dx" => dx = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(Error::Config(format!("unknown gridfield header key `{k}`"))),
            }
        }
        let mut grid = GridSpec::unit_cell(dim, n);
        if let Some(o) = origin {
            grid.origin = o;
        }
        if let Some(h) = dx {
            grid.dx = h;
        }
        grid.validate()?;
        let mut body = String::new();
        r.read_to_string(&mut body)?;
        let values = body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Config(format!("not a number: `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != grid.cells() {
            return Err(Error::Config(format!(
                "expected {} values, found {}",
                grid.cells(),
                values.len()
            )));
        }
        Ok(GridField {
            grid,
            values,
            time_stamp,
        })
    }

    /// Binary format: magic `GFLD`, `u32` dim, `u32` n, `f64` time stamp,
    /// `f64` origin, `f64` dx, then the values; all little endian.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"GFLD")?;
        w.write_all(&(self.grid.dim as u32).to_le_bytes())?;
        w.write_all(&(self.grid.n as u32).to_le_bytes())?;
        w.write_all(&self.time_stamp.to_le_bytes())?;
        w.write_all(&self.grid.origin.to_le_bytes())?;
        w.write_all(&self.grid.dx.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GFLD" {
            return Err(Error::Config("not a binary gridfield".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let time_stamp = read_f64(r)?;
        let origin = read_f64(r)?;
        let dx = read_f64(r)?;
        let mut grid = GridSpec::unit_cell(dim, n);
        grid.origin = origin;
        grid.dx = dx;
        grid.validate()?;
        let mut values = Vec::with_capacity(grid.cells());
        for _ in 0..grid.cells() {
            values.push(read_f64(r)?);
        }
        Ok(GridField {
            grid,
            values,
            time_stamp,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(&mut w)
        } else {
            self.write_text(&mut w)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(&mut r)
        } else {
            Self::read_text(&mut r)
        }
    }
}

/// Global Lax–Friedrichs numerical Hamiltonian for `H(p) = |p| + ⟨V, p⟩`
/// shifted by `P`:
/// `H((p⁻ + p⁺)/2 + P) + ½ Σ dissipation_i (p⁺_i − p⁻_i)`.
///
/// The viscous term carries a plus sign because the equation is written
/// `u_t = H`; it is nondecreasing in the neighbours and nonincreasing in the
/// centre value whenever `dissipation_i ≥ 1 + |V_i|`.
pub fn numerical_hamiltonian(
    p_minus: &[f64],
    p_plus: &[f64],
    v: &[f64],
    p: &[f64],
    dissipation: &[f64],
) -> f64 {
    let mut norm2 = 0.0;
    let mut adv = 0.0;
    let mut visc = 0.0;
    for i in 0..p.len() {
        let q = 0.5 * (p_minus[i] + p_plus[i]) + p[i];
        norm2 += q * q;
        adv += v[i] * q;
        visc += dissipation[i] * (p_plus[i] - p_minus[i]);
    }
    norm2.sqrt() + adv + 0.5 * visc
}

/// Time integrator for one field, background slope `P`, scale `ε` and
/// damping `λ`.
pub struct Evolver<'a> {
    field: &'a dyn VelocityField,
    grid: GridSpec,
    slope: Vec<f64>,
    scale: f64,
    lambda: f64,
    dt: f64,
    axes: Vec<Vec<f64>>,
    vel: Vec<Vec<f64>>,
    vel_time: Option<f64>,
    scratch: Vec<f64>,
    tiles: Option<TileState>,
}

struct TileState {
    per_axis: usize,
    active: Vec<bool>,
    changed: Vec<bool>,
}

impl<'a> Evolver<'a> {
    /// Uses the grid's CFL step aligned to the field period (`scale`).
    pub fn new(
        field: &'a dyn VelocityField,
        grid: &GridSpec,
        slope: &[f64],
        lambda: f64,
    ) -> Result<Self> {
        Self::with_scale(field, grid, slope, lambda, 1.0)
    }

    /// The field is evaluated at `(x/scale, t/scale)`.
    pub fn with_scale(
        field: &'a dyn VelocityField,
        grid: &GridSpec,
        slope: &[f64],
        lambda: f64,
        scale: f64,
    ) -> Result<Self> {
        grid.validate()?;
        grid.check_field(field)?;
        if slope.len() != grid.dim || slope.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("P", "one finite component per axis"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::param("lambda", "must be nonnegative"));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::param("scale", "must be positive"));
        }
        let axes: Vec<Vec<f64>> = grid
            .axes()
            .into_iter()
            .map(|a| a.into_iter().map(|x| x / scale).collect())
            .collect();
        let mut ev = Evolver {
            field,
            grid: grid.clone(),
            slope: slope.to_vec(),
            scale,
            lambda,
            dt: 0.0,
            axes,
            vel: vec![vec![0.0; grid.cells()]; grid.dim],
            vel_time: None,
            scratch: vec![0.0; grid.cells()],
            tiles: None,
        };
        ev.dt = grid.aligned_dt(scale);
        ev.check_dt(ev.dt)?;
        Ok(ev)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Overrides the step (checked against the monotonicity limit).
    pub fn set_dt(&mut self, dt: f64) -> Result<()> {
        self.check_dt(dt)?;
        self.dt = dt;
        Ok(())
    }

    /// Substeps per field period.
    pub fn steps_per_period(&self) -> usize {
        (self.scale / self.dt).round() as usize
    }

    fn check_dt(&self, dt: f64) -> Result<()> {
        let admissible = self.grid.admissible_dt(self.lambda);
        if !(dt > 0.0) || dt > admissible * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, admissible });
        }
        Ok(())
    }

    /// Enables skipping of frozen 2D tiles (only exact when `P = 0`, `λ = 0`).
    pub fn enable_tile_skipping(&mut self) {
        if self.grid.dim == 2 && self.lambda == 0.0 && self.slope.iter().all(|p| *p == 0.0) {
            let per_axis = self.grid.n.div_ceil(TILE);
            self.tiles = Some(TileState {
                per_axis,
                active: vec![true; per_axis * per_axis],
                changed: vec![true; per_axis * per_axis],
            });
        }
    }

    fn refresh_velocity(&mut self, t: f64) {
        let steady = self.field.is_steady();
        if steady && self.vel_time.is_some() {
            return;
        }
        if self.vel_time == Some(t) {
            return;
        }
        self.field
            .sample_axes(&self.axes, t / self.scale, &mut self.vel);
        self.vel_time = Some(t);
    }

    /// One explicit step of length `dt()` from `u` (time stamp advanced).
    pub fn step(&mut self, u: &mut GridField) {
        let t = u.time_stamp;
        self.refresh_velocity(t);
        let dt = self.dt;
        let decay = (-self.lambda * dt).exp();
        let gain = if self.lambda > 0.0 {
            -(-self.lambda * dt).exp_m1() / self.lambda
        } else {
            dt
        };
        let mut out = std::mem::take(&mut self.scratch);
        match self.grid.dim {
            1 => sweep::<1>(
                &self.grid,
                &u.values,
                &mut out,
                &self.vel,
                &self.slope,
                decay,
                gain,
            ),
            2 => {
                if let Some(tiles) = self.tiles.as_mut() {
                    sweep2_tiles(
                        &self.grid,
                        &u.values,
                        &mut out,
                        &self.vel,
                        decay,
                        gain,
                        tiles,
                        self.field.is_steady(),
                    );
                } else {
                    let n = self.grid.n;
                    sweep2_region(
                        &self.grid,
                        &u.values,
                        &mut out,
                        &self.vel,
                        &self.slope,
                        decay,
                        gain,
                        0,
                        n,
                        0,
                        n,
                    );
                }
            }
            _ => sweep::<3>(
                &self.grid,
                &u.values,
                &mut out,
                &self.vel,
                &self.slope,
                decay,
                gain,
            ),
        }
        std::mem::swap(&mut u.values, &mut out);
        self.scratch = out;
        u.time_stamp = t + dt;
    }

    /// Advances `u` by `steps` steps.
    pub fn advance(&mut self, u: &mut GridField, steps: usize) {
        for _ in 0..steps {
            self.step(u);
        }
    }

    /// Advances to `t_end` (to within half a step).
    pub fn advance_to(&mut self, u: &mut GridField, t_end: f64) {
        let steps = ((t_end - u.time_stamp) / self.dt).round().max(0.0) as usize;
        self.advance(u, steps);
    }
}

#[inline(always)]
fn flux<const D: usize>(
    pm: &[f64; D],
    pp: &[f64; D],
    v: &[f64; D],
    p: &[f64; D],
    d: &[f64; D],
) -> f64 {
    let mut norm2 = 0.0;
    let mut adv = 0.0;
    let mut visc = 0.0;
    for i in 0..D {
        let q = 0.5 * (pm[i] + pp[i]) + p[i];
        norm2 += q * q;
        adv += v[i] * q;
        visc += d[i] * (pp[i] - pm[i]);
    }
    norm2.sqrt() + adv + 0.5 * visc
}

fn sweep<const D: usize>(
    grid: &GridSpec,
    u: &[f64],
    out: &mut [f64],
    vel: &[Vec<f64>],
    slope: &[f64],
    decay: f64,
    dt: f64,
) {
    let n = grid.n;
    let inv = 1.0 / grid.dx;
    let mut strides = [0usize; D];
    for (a, s) in strides.iter_mut().enumerate() {
        *s = n.pow((D - 1 - a) as u32);
    }
    let mut p = [0.0; D];
    let mut d = [0.0; D];
    p.copy_from_slice(slope);
    d.copy_from_slice(&grid.dissipation);
    let periodic = grid.boundary == Boundary::Periodic;
    let mut idx = [0usize; D];
    let (mut pm, mut pp, mut v) = ([0.0; D], [0.0; D], [0.0; D]);
    for c in 0..u.len() {
        let uc = u[c];
        for a in 0..D {
            let s = strides[a];
            let lo = if idx[a] > 0 {
                u[c - s]
            } else if periodic {
                u[c + (n - 1) * s]
            } else {
                uc
            };
            let hi = if idx[a] + 1 < n {
                u[c + s]
            } else if periodic {
                u[c - (n - 1) * s]
            } else {
                uc
            };
            pm[a] = (uc - lo) * inv;
            pp[a] = (hi - uc) * inv;
            v[a] = vel[a][c];
        }
        out[c] = decay * uc + dt * flux(&pm, &pp, &v, &p, &d);
        for a in (0..D).rev() {
            idx[a] += 1;
            if idx[a] < n {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// 2D update of rows `i0..i1`, columns `j0..j1`; returns the largest change.
#[allow(clippy::too_many_arguments)]
fn sweep2_region(
    grid: &GridSpec,
    u: &[f64],
    out: &mut [f64],
    vel: &[Vec<f64>],
    slope: &[f64],
    decay: f64,
    gain: f64,
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
) -> f64 {
    let n = grid.n;
    let k = Coef {
        half_inv: 0.5 / grid.dx,
        p0: slope[0],
        p1: slope[1],
        d0: grid.dissipation[0],
        d1: grid.dissipation[1],
        decay,
        gain,
    };
    let periodic = grid.boundary == Boundary::Periodic;
    let mut change = 0.0f64;
    for i in i0..i1 {
        let row = i * n;
        let cur = &u[row..row + n];
        let up = if i > 0 {
            &u[row - n..row]
        } else if periodic {
            &u[(n - 1) * n..]
        } else {
            cur
        };
        let dn = if i + 1 < n {
            &u[row + n..row + 2 * n]
        } else if periodic {
            &u[..n]
        } else {
            cur
        };
        let (v0, v1) = (&vel[0][row..row + n], &vel[1][row..row + n]);
        let dst = &mut out[row..row + n];
        let lo = j0.max(1);
        let hi = j1.min(n - 1);
        if lo < hi {
            let it = cur[lo - 1..hi + 1]
                .windows(3)
                .zip(&up[lo..hi])
                .zip(&dn[lo..hi])
                .zip(&v0[lo..hi])
                .zip(&v1[lo..hi])
                .zip(&mut dst[lo..hi]);
            for (((((w, &a), &b), &va), &vb), o) in it {
                let new = k.update(w[1], a, b, w[0], w[2], va, vb);
                change = change.max((new - w[1]).abs());
                *o = new;
            }
        }
        for j in [0, n - 1] {
            if j < j0 || j >= j1 || (j >= lo && j < hi) {
                continue;
            }
            let uc = cur[j];
            let left = if j > 0 {
                cur[j - 1]
            } else if periodic {
                cur[n - 1]
            } else {
                uc
            };
            let right = if j + 1 < n {
                cur[j + 1]
            } else if periodic {
                cur[0]
            } else {
                uc
            };
            let new = k.update(uc, up[j], dn[j], left, right, v0[j], v1[j]);
            change = change.max((new - uc).abs());
            dst[j] = new;
        }
    }
    change
}

struct Coef {
    half_inv: f64,
    p0: f64,
    p1: f64,
    d0: f64,
    d1: f64,
    decay: f64,
    gain: f64,
}

impl Coef {
    /// The Lax–Friedrichs update with the central and viscous parts written
    /// in terms of neighbour sums and differences.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn update(&self, uc: f64, lo0: f64, hi0: f64, lo1: f64, hi1: f64, v0: f64, v1: f64) -> f64 {
        let q0 = (hi0 - lo0) * self.half_inv + self.p0;
        let q1 = (hi1 - lo1) * self.half_inv + self.p1;
        let visc =
            (self.d0 * (hi0 + lo0 - 2.0 * uc) + self.d1 * (hi1 + lo1 - 2.0 * uc)) * self.half_inv;
        self.decay * uc + self.gain * ((q0 * q0 + q1 * q1).sqrt() + v0 * q0 + v1 * q1 + visc)
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep2_tiles(
    grid: &GridSpec,
    u: &[f64],
    out: &mut [f64],
    vel: &[Vec<f64>],
    decay: f64,
    dt: f64,
    tiles: &mut TileState,
    steady: bool,
) {
    let n = grid.n;
    let m = tiles.per_axis;
    let zero = [0.0, 0.0];
    for ti in 0..m {
        for tj in 0..m {
            let t = ti * m + tj;
            if !tiles.active[t] {
                tiles.changed[t] = false;
                continue;
            }
            let (i0, i1) = (ti * TILE, ((ti + 1) * TILE).min(n));
            let (j0, j1) = (tj * TILE, ((tj + 1) * TILE).min(n));
            let ch = sweep2_region(grid, u, out, vel, &zero, decay, dt, i0, i1, j0, j1);
            let mut moved = ch > 0.0;
            if !moved && !steady {
                moved = !tile_uniform(grid, u, i0, i1, j0, j1);
            }
            tiles.changed[t] = moved;
        }
    }
    let periodic = grid.boundary == Boundary::Periodic;
    for ti in 0..m {
        for tj in 0..m {
            let mut act = false;
            'nb: for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (a, b) = (ti as isize + di, tj as isize + dj);
                    let (a, b) = if periodic {
                        (a.rem_euclid(m as isize), b.rem_euclid(m as isize))
                    } else if a < 0 || b < 0 || a >= m as isize || b >= m as isize {
                        continue;
                    } else {
                        (a, b)
                    };
                    if tiles.changed[a as usize * m + b as usize] {
                        act = true;
                        break 'nb;
                    }
                }
            }
            tiles.active[ti * m + tj] = act;
        }
    }
}

fn tile_uniform(grid: &GridSpec, u: &[f64], i0: usize, i1: usize, j0: usize, j1: usize) -> bool {
    let n = grid.n;
    let periodic = grid.boundary == Boundary::Periodic;
    let wrap = |k: isize| -> Option<usize> {
        if k >= 0 && (k as usize) < n {
            Some(k as usize)
        } else if periodic {
            Some(k.rem_euclid(n as isize) as usize)
        } else {
            None
        }
    };
    let first = u[i0 * n + j0];
    for i in (i0 as isize - 1)..=(i1 as isize) {
        let Some(ii) = wrap(i) else { continue };
        for j in (j0 as isize - 1)..=(j1 as isize) {
            let Some(jj) = wrap(j) else { continue };
            if u[ii * n + jj] != first {
                return false;
            }
        }
    }
    true
}

/// One explicit step of length `dt` (checked against the admissible step).
pub fn step(
    u: &GridField,
    field: &dyn VelocityField,
    slope: &[f64],
    dt: f64,
    lambda: f64,
) -> Result<GridField> {
    let mut ev = Evolver::new(field, &u.grid, slope, lambda)?;
    ev.set_dt(dt)?;
    let mut next = u.clone();
    ev.step(&mut next);
    Ok(next)
}

/// Evolves `u0` over `[u0.time_stamp, u0.time_stamp + duration]` with steps
/// aligned to the field's unit period.
pub fn evolve(
    u0: &GridField,
    field: &dyn VelocityField,
    slope: &[f64],
    duration: f64,
    lambda: f64,
) -> Result<GridField> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::param("T", "must be nonnegative"));
    }
    let mut ev = Evolver::new(field, &u0.grid, slope, lambda)?;
    let mut u = u0.clone();
    let target = u0.time_stamp + duration;
    ev.advance_to(&mut u, target);
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::BuiltinField;

    fn grid_for(field: &dyn VelocityField, n: usize) -> GridSpec {
        GridSpec::unit_cell(field.dim(), n).with_field(field)
    }

    #[test]
    fn flux_is_consistent() {
        let v = [0.3, -0.7];
        let p = [0.2, 0.9];
        let q = [-0.4, 1.1];
        let h = numerical_hamiltonian(&q, &q, &v, &p, &[2.0, 2.0]);
        let qp = [q[0] + p[0], q[1] + p[1]];
        let exact = (qp[0] * qp[0] + qp[1] * qp[1]).sqrt() + v[0] * qp[0] + v[1] * qp[1];
        assert!((h - exact).abs() < 1e-14);
    }

    #[test]
    fn flux_examples() {
        assert_eq!(
            numerical_hamiltonian(
                &[0.0, 0.0],
                &[0.0, 0.0],
                &[0.0, 0.0],
                &[1.0, 0.0],
                &[1.0, 1.0]
            ),
            1.0
        );
        let c = [0.3, -0.2];
        let p = [0.6, 0.8];
        let h = numerical_hamiltonian(&[0.0; 2], &[0.0; 2], &c, &p, &[2.0, 2.0]);
        assert!((h - (1.0 + 0.3 * 0.6 - 0.2 * 0.8)).abs() < 1e-15);
        // a kink that is a local minimum is raised by the viscous term
        let (a, d) = (0.7, 1.5);
        let h = numerical_hamiltonian(&[-a, 0.0], &[a, 0.0], &[0.0; 2], &[0.0; 2], &[d, d]);
        assert!((h - d * a).abs() < 1e-15);
    }

    #[test]
    fn constant_data_is_stationary() {
        let f = BuiltinField::cellular(1.0);
        let g = grid_for(&f, 16);
        let u = GridField::constant(&g, 2.5);
        let out = evolve(&u, &f, &[0.0, 0.0], 0.7, 0.0).unwrap();
        assert!(out.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn one_step_source_terms() {
        let z = BuiltinField::zero(2);
        let g = grid_for(&z, 8);
        let u = GridField::constant(&g, 0.0);
        let dt = g.dt();
        let next = step(&u, &z, &[1.0, 0.0], dt, 0.0).unwrap();
        assert!(next.values.iter().all(|&v| (v - dt).abs() < 1e-16));

        let c = BuiltinField::constant(&[0.4, -0.1]).unwrap();
        let g = grid_for(&c, 8);
        let u = GridField::constant(&g, 0.0);
        let p = [0.3, 0.5];
        let dt = g.dt();
        let next = step(&u, &c, &p, dt, 0.0).unwrap();
        let h = (0.3f64.hypot(0.5)) + 0.4 * 0.3 - 0.1 * 0.5;
        assert!(next.values.iter().all(|&v| (v - dt * h).abs() < 1e-16));
    }

    #[test]
    fn cfl_violation_reports_admissible_step() {
        let z = BuiltinField::zero(2);
        let g = grid_for(&z, 8);
        let u = GridField::constant(&g, 0.0);
        match step(&u, &z, &[1.0, 0.0], 10.0 * g.dt(), 0.0) {
            Err(Error::Cfl { admissible, .. }) => assert!((admissible - g.dx / 2.0).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn insufficient_dissipation_rejected() {
        let f = BuiltinField::cellular(2.0);
        let g = GridSpec::unit_cell(2, 8);
        assert!(Evolver::new(&f, &g, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn exact_linear_growth() {
        let z = BuiltinField::zero(2);
        let g = grid_for(&z, 16);
        let u = evolve(&GridField::constant(&g, 0.0), &z, &[1.0, 0.0], 1.0, 0.0).unwrap();
        assert!((u.time_stamp - 1.0).abs() < 1e-12);
        assert!(u.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let c = BuiltinField::constant(&[0.25, 0.5]).unwrap();
        let g = grid_for(&c, 16);
        let p = [0.0, -2.0];
        let u = evolve(&GridField::constant(&g, 0.0), &c, &p, 0.75, 0.0).unwrap();
        let exact = (2.0 - 1.0) * 0.75;
        assert!(u.values.iter().all(|&v| (v - exact).abs() < 1e-12));
    }

    #[test]
    fn damped_translation_equivariance() {
        let f = BuiltinField::cellular(1.5);
        let g = grid_for(&f, 16);
        let u0 = GridField::from_fn(&g, |x| (6.0 * x[0]).sin() * x[1].cos());
        let shift = 0.8;
        let mut u1 = u0.clone();
        u1.values.iter_mut().for_each(|v| *v += shift);
        let (lambda, t) = (0.3, 0.5);
        let a = evolve(&u0, &f, &[1.0, 0.5], t, lambda).unwrap();
        let b = evolve(&u1, &f, &[1.0, 0.5], t, lambda).unwrap();
        let factor = (-lambda * a.time_stamp).exp();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((y - x - shift * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn dimensions_one_and_three() {
        let z1 = BuiltinField::zero(1);
        let g = grid_for(&z1, 32);
        let u = evolve(&GridField::constant(&g, 0.0), &z1, &[2.0], 0.5, 0.0).unwrap();
        assert!(u.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let c3 = BuiltinField::constant(&[0.1, 0.2, 0.3]).unwrap();
        let g = grid_for(&c3, 6);
        let u = evolve(
            &GridField::constant(&g, 0.0),
            &c3,
            &[0.0, 0.0, 1.0],
            0.5,
            0.0,
        )
        .unwrap();
        assert!(u.values.iter().all(|&v| (v - 0.65).abs() < 1e-12));
    }

    #[test]
    fn generic_and_specialised_2d_sweeps_agree() {
        let f = BuiltinField::traveling_sin(1.3);
        let g = grid_for(&f, 12);
        let u = GridField::from_fn(&g, |x| (5.0 * x[0] + 2.0 * x[1]).sin());
        let mut vel = vec![vec![0.0; g.cells()]; 2];
        f.sample_axes(&g.axes(), 0.2, &mut vel);
        let mut a = vec![0.0; g.cells()];
        let mut b = vec![0.0; g.cells()];
        let p = [0.3, -0.4];
        sweep::<2>(&g, &u.values, &mut a, &vel, &p, 0.9, g.dt());
        sweep2_region(&g, &u.values, &mut b, &vel, &p, 0.9, g.dt(), 0, 12, 0, 12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tile_skipping_is_exact() {
        let f = BuiltinField::cellular(1.0);
        let g = GridSpec::centered_box(2, 96, 6.0, Boundary::Clamped).with_field(&f);
        let u0 = GridField::from_fn(&g, |x| {
            (0.5 - (x[0] * x[0] + x[1] * x[1]).sqrt()).clamp(-1.0, 1.0)
        });
        let mut a = u0.clone();
        let mut b = u0.clone();
        let mut e1 = Evolver::new(&f, &g, &[0.0, 0.0], 0.0).unwrap();
        let mut e2 = Evolver::new(&f, &g, &[0.0, 0.0], 0.0).unwrap();
        e2.enable_tile_skipping();
        e1.advance(&mut a, 150);
        e2.advance(&mut b, 150);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn text_and_binary_roundtrip() {
        let g = GridSpec::unit_cell(2, 5);
        let u = GridField {
            time_stamp: 0.125,
            ..GridField::from_fn(&g, |x| x[0] * 3.0 - x[1])
        };
        let mut buf = Vec::new();
        u.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GFLD");
        assert_eq!(buf.len(), 4 + 8 + 24 + 8 * 25);
        let back = GridField::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.values, u.values);
        assert_eq!(back.time_stamp, 0.125);

        let mut txt = Vec::new();
        u.write_text(&mut txt).unwrap();
        let back = GridField::read_text(&mut txt.as_slice()).unwrap();
        assert_eq!(back.values, u.values);
        assert_eq!(back.grid.n, 5);
    }
}
