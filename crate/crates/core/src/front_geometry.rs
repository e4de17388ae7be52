//! Wulff shapes of effective Hamiltonians, the Hopf–Lax solution of the
//! homogenized equation, and microscopic front propagation at `ε = 1`.
//!
//! Fronts are carried as the super-level set `K(t) = {u ≥ 0}` of a clamped
//! signed distance. Inclusion deviations are measured with the gauge of the
//! Wulff polygon.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective::EffectiveHamiltonian;
use crate::error::{Error, Result};
use crate::fields::{FieldDiagnostics, VelocityField};
use crate::hj_kernel::{Boundary, Evolver, GridField, GridSpec};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

// ---------------------------------------------------------------------------
// Wulff shape
// ---------------------------------------------------------------------------

/// `W = {y : ⟨P_i, y⟩ + H̄(P_i) ≥ 0}` over the fan directions of a table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WulffShape {
    /// `(P_i, H̄(P_i))` with `P_i` unit.
    pub halfspaces: Vec<(Vec<f64>, f64)>,
    /// Counter-clockwise vertices of the polygon.
    pub vertices: Vec<[f64; 2]>,
    /// Indices of the half-planes that contribute an edge.
    pub active: Vec<usize>,
}

impl WulffShape {
    /// Builds the polygon from a 2D table.
    pub fn from_table(table: &EffectiveHamiltonian) -> Result<Self> {
        if table.dim != 2 {
            return Err(Error::UnsupportedDimension {
                dim: table.dim,
                what: "Wulff polygon",
            });
        }
        let values = table.values()?;
        Self::from_halfspaces(table.directions.iter().cloned().zip(values).collect())
    }

    /// Builds the polygon from unit normals and offsets.
    pub fn from_halfspaces(halfspaces: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if halfspaces.len() < 3 {
            return Err(Error::param("halfspaces", "need at least three directions"));
        }
        for (p, h) in &halfspaces {
            if p.len() != 2 || (norm(p) - 1.0).abs() > 1e-9 {
                return Err(Error::param(
                    "halfspaces",
                    "directions must be planar unit vectors",
                ));
            }
            if !(h.is_finite() && *h > 0.0) {
                return Err(Error::param(
                    "hbar",
                    format!("H̄ = {h} in direction ({:.4}, {:.4}) is not positive; the front does not expand", p[0], p[1]),
                ));
            }
        }
        // Half-plane i reads ⟨−P_i, y⟩ ≤ h_i. Its dual point is −P_i / h_i and
        // the non-redundant half-planes are the vertices of the dual hull.
        let dual: Vec<[f64; 2]> = halfspaces
            .iter()
            .map(|(p, h)| [-p[0] / h, -p[1] / h])
            .collect();
        let active = convex_hull(&dual);
        if active.len() < 3 {
            return Err(Error::Discretization("degenerate Wulff polygon".into()));
        }
        let k = active.len();
        let mut vertices = Vec::with_capacity(k);
        for j in 0..k {
            let (a, b) = (active[j], active[(j + 1) % k]);
            let (na, ha) = (&halfspaces[a].0, halfspaces[a].1);
            let (nb, hb) = (&halfspaces[b].0, halfspaces[b].1);
            let (n1, n2) = ([-na[0], -na[1]], [-nb[0], -nb[1]]);
            let det = cross(n1, n2);
            if det.abs() < 1e-14 {
                return Err(Error::Discretization(
                    "parallel consecutive Wulff edges".into(),
                ));
            }
            vertices.push([
                (ha * n2[1] - hb * n1[1]) / det,
                (n1[0] * hb - n2[0] * ha) / det,
            ]);
        }
        Ok(WulffShape {
            halfspaces,
            vertices,
            active,
        })
    }

    /// `h_W(q) = max_k ⟨q, v_k⟩`.
    pub fn support(&self, q: &[f64]) -> f64 {
        self.vertices
            .iter()
            .map(|v| q[0] * v[0] + q[1] * v[1])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The homogenized Hamiltonian of the polygon, `H̄_W(p) = h_W(−p)`.
    pub fn hamiltonian(&self, p: &[f64]) -> f64 {
        self.support(&[-p[0], -p[1]])
    }

    /// Gauge `min{s ≥ 0 : y ∈ sW}`.
    pub fn gauge(&self, y: &[f64]) -> f64 {
        self.halfspaces
            .iter()
            .map(|(p, h)| -(p[0] * y[0] + p[1] * y[1]) / h)
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        self.gauge(y) <= 1.0 + 1e-12
    }

    /// Per half-space, `h_W(−P_i)`; equals `H̄(P_i)` on active half-planes.
    pub fn support_at_fan(&self) -> Vec<f64> {
        self.halfspaces
            .iter()
            .map(|(p, _)| self.support(&[-p[0], -p[1]]))
            .collect()
    }

    /// Largest `h_W(−P_i) − H̄(P_i)`; nonpositive for a valid polygon.
    pub fn inscribed_violation(&self) -> f64 {
        self.halfspaces
            .iter()
            .map(|(p, h)| self.support(&[-p[0], -p[1]]) - h)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Euclidean distance from `z` to `tW`.
    pub fn distance(&self, z: &[f64], t: f64) -> f64 {
        if t <= 0.0 {
            return norm(z);
        }
        if self.gauge(z) <= t {
            return 0.0;
        }
        let k = self.vertices.len();
        (0..k)
            .map(|j| {
                let a = self.vertices[j];
                let b = self.vertices[(j + 1) % k];
                segment_distance(z, [t * a[0], t * a[1]], [t * b[0], t * b[1]])
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn area(&self) -> f64 {
        let k = self.vertices.len();
        0.5 * (0..k)
            .map(|j| cross(self.vertices[j], self.vertices[(j + 1) % k]))
            .sum::<f64>()
    }

    /// Largest `|v_k|`, the propagation speed bound of the polygon.
    pub fn radius(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// CSV `x,y` of the vertices.
    pub fn write_vertices_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "x,y")?;
        for v in &self.vertices {
            writeln!(w, "{},{}", v[0], v[1])?;
        }
        Ok(())
    }

    /// CSV `angle,support` over the fan directions `q = P_i`.
    pub fn write_support_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "angle,support")?;
        for (p, _) in &self.halfspaces {
            writeln!(w, "{},{}", p[1].atan2(p[0]), self.support(p))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("{stem}_vertices.csv")),
        )?);
        self.write_vertices_csv(&mut f)?;
        let mut g = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("{stem}_support.csv")),
        )?);
        self.write_support_csv(&mut g)?;
        Ok(())
    }
}

fn segment_distance(z: &[f64], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let az = [z[0] - a[0], z[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 {
        ((az[0] * ab[0] + az[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (az[0] - s * ab[0]).hypot(az[1] - s * ab[1])
}

/// Indices of the hull vertices in counter-clockwise order (monotone chain).
fn convex_hull(pts: &[[f64; 2]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        pts[a]
            .partial_cmp(&pts[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let turn = |o: usize, a: usize, b: usize| {
        cross(
            [pts[a][0] - pts[o][0], pts[a][1] - pts[o][1]],
            [pts[b][0] - pts[o][0], pts[b][1] - pts[o][1]],
        )
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let seq: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        for &i in seq {
            while hull.len() >= start + 2
                && turn(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 1e-15
            {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    hull
}

// ---------------------------------------------------------------------------
// Hopf–Lax
// ---------------------------------------------------------------------------

/// Initial data of the homogenized problem.
pub trait MacroFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
    fn lipschitz(&self) -> f64;

    /// `sup_{y∈W} u0(x − ty)`, by default sampled on the polygon, its edges
    /// and scaled copies toward the origin.
    fn hopf_lax_at(&self, w: &WulffShape, x: &[f64], t: f64) -> f64 {
        if t <= 0.0 {
            return self.eval(x);
        }
        const RINGS: usize = 16;
        const EDGE: usize = 16;
        let k = w.vertices.len();
        let mut best = self.eval(x);
        let mut z = [0.0; 2];
        for r in 1..=RINGS {
            let s = t * r as f64 / RINGS as f64;
            for j in 0..k {
                let a = w.vertices[j];
                let b = w.vertices[(j + 1) % k];
                for e in 0..EDGE {
                    let f = e as f64 / EDGE as f64;
                    z[0] = x[0] - s * (a[0] + f * (b[0] - a[0]));
                    z[1] = x[1] - s * (a[1] + f * (b[1] - a[1]));
                    best = best.max(self.eval(&z));
                }
            }
        }
        best
    }
}

/// `clamp(⟨P, x⟩ + b)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffineData {
    pub p: Vec<f64>,
    pub offset: f64,
    pub clamp: f64,
}

impl MacroFunction for AffineData {
    fn dim(&self) -> usize {
        self.p.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (dot(&self.p, x) + self.offset).clamp(-self.clamp, self.clamp)
    }

    fn lipschitz(&self) -> f64 {
        norm(&self.p)
    }

    fn hopf_lax_at(&self, w: &WulffShape, x: &[f64], t: f64) -> f64 {
        (dot(&self.p, x) + self.offset + t.max(0.0) * w.hamiltonian(&self.p))
            .clamp(-self.clamp, self.clamp)
    }
}

/// `clamp(R − |x − c|)` with `R = ∞` clamp giving the cone; optionally
/// periodic with period `period` per axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallData {
    pub center: Vec<f64>,
    pub radius: f64,
    pub clamp: f64,
    pub period: Option<f64>,
}

impl BallData {
    fn translates(&self) -> Vec<[f64; 2]> {
        match self.period {
            None => vec![[0.0, 0.0]],
            Some(l) => {
                let mut v = Vec::with_capacity(9);
                for a in -1..=1 {
                    for b in -1..=1 {
                        v.push([a as f64 * l, b as f64 * l]);
                    }
                }
                v
            }
        }
    }

    fn wrap(&self, x: &[f64]) -> [f64; 2] {
        let mut z = [x[0] - self.center[0], x[1] - self.center[1]];
        if let Some(l) = self.period {
            for c in &mut z {
                *c -= l * (*c / l).round();
            }
        }
        z
    }
}

impl MacroFunction for BallData {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let z = self.wrap(x);
        (self.radius - z[0].hypot(z[1])).clamp(-self.clamp, self.clamp)
    }

    fn lipschitz(&self) -> f64 {
        1.0
    }

    fn hopf_lax_at(&self, w: &WulffShape, x: &[f64], t: f64) -> f64 {
        let z = self.wrap(x);
        let d = self
            .translates()
            .iter()
            .map(|s| w.distance(&[z[0] + s[0], z[1] + s[1]], t))
            .fold(f64::INFINITY, f64::min);
        (self.radius - d).clamp(-self.clamp, self.clamp)
    }
}

/// Arbitrary Lipschitz data given by a closure.
pub struct FnData<F: Fn(&[f64]) -> f64 + Send + Sync> {
    pub dim: usize,
    pub lipschitz: f64,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> MacroFunction for FnData<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// `ū(·, t) = sup_{y∈W} u0(· − ty)`.
pub struct HopfLax<'a> {
    pub u0: &'a dyn MacroFunction,
    pub wulff: &'a WulffShape,
    pub t: f64,
}

impl MacroFunction for HopfLax<'_> {
    fn dim(&self) -> usize {
        self.u0.dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.u0.hopf_lax_at(self.wulff, x, self.t)
    }

    fn lipschitz(&self) -> f64 {
        self.u0.lipschitz()
    }
}

pub fn hopf_lax<'a>(
    u0: &'a dyn MacroFunction,
    t: f64,
    wulff: &'a WulffShape,
) -> Result<HopfLax<'a>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::param("t", "must be nonnegative"));
    }
    if u0.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            dim: u0.dim(),
            what: "Hopf–Lax formula",
        });
    }
    Ok(HopfLax { u0, wulff, t })
}

/// Samples a macro function at the cell centers of a grid.
pub fn sample_macro(f: &dyn MacroFunction, grid: &GridSpec) -> GridField {
    let values: Vec<f64> = (0..grid.cells())
        .into_par_iter()
        .map(|c| f.eval(&grid.position(c)))
        .collect();
    GridField {
        grid: grid.clone(),
        values,
        time_stamp: 0.0,
    }
}

/// Evolves `ū_t = H̄_W(Dū)` with the Lax–Friedrichs scheme on a 2D grid.
pub fn evolve_homogenized(u0: &GridField, wulff: &WulffShape, duration: f64) -> Result<GridField> {
    let grid = &u0.grid;
    if grid.dim != 2 {
        return Err(Error::UnsupportedDimension {
            dim: grid.dim,
            what: "homogenized evolution",
        });
    }
    grid.validate()?;
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::param("T", "must be nonnegative"));
    }
    let d = [
        wulff
            .vertices
            .iter()
            .map(|v| v[0].abs())
            .fold(0.0, f64::max),
        wulff
            .vertices
            .iter()
            .map(|v| v[1].abs())
            .fold(0.0, f64::max),
    ];
    let n = grid.n;
    let dt_max = grid.cfl_factor * grid.dx / (d[0] + d[1]);
    let steps = (duration / dt_max).ceil() as usize;
    let dt = if steps > 0 {
        duration / steps as f64
    } else {
        0.0
    };
    let inv = 1.0 / grid.dx;
    let periodic = grid.boundary == Boundary::Periodic;
    let nb = |i: usize, up: bool| -> usize {
        match (up, periodic) {
            (true, true) => (i + 1) % n,
            (true, false) => (i + 1).min(n - 1),
            (false, true) => (i + n - 1) % n,
            (false, false) => i.saturating_sub(1),
        }
    };
    let mut u = u0.values.clone();
    let mut next = vec![0.0; u.len()];
    for _ in 0..steps {
        next.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let (im, ip) = (nb(i, false), nb(i, true));
            for (j, out) in row.iter_mut().enumerate() {
                let (jm, jp) = (nb(j, false), nb(j, true));
                let c = u[i * n + j];
                let (a0, b0) = ((c - u[im * n + j]) * inv, (u[ip * n + j] - c) * inv);
                let (a1, b1) = ((c - u[i * n + jm]) * inv, (u[i * n + jp] - c) * inv);
                let p = [0.5 * (a0 + b0), 0.5 * (a1 + b1)];
                let h = wulff.hamiltonian(&p) + 0.5 * (d[0] * (b0 - a0) + d[1] * (b1 - a1));
                *out = c + dt * h;
            }
        });
        std::mem::swap(&mut u, &mut next);
    }
    Ok(GridField {
        grid: grid.clone(),
        values: u,
        time_stamp: u0.time_stamp + duration,
    })
}

// ---------------------------------------------------------------------------
// Cell masks and level-set seeds
// ---------------------------------------------------------------------------

/// A set of cells of a grid, stored as a bitset.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMask {
    pub grid: GridSpec,
    bits: Vec<u64>,
}

impl CellMask {
    pub fn empty(grid: &GridSpec) -> Self {
        CellMask {
            grid: grid.clone(),
            bits: vec![0; grid.cells().div_ceil(64)],
        }
    }

    /// Cells whose centers satisfy `f`.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64]) -> bool) -> Self {
        let mut m = Self::empty(grid);
        for c in 0..grid.cells() {
            if f(&grid.position(c)) {
                m.set(c, true);
            }
        }
        m
    }

    /// `{u ≥ 0}`.
    pub fn superlevel(u: &GridField) -> Self {
        let mut m = Self::empty(&u.grid);
        for (c, &v) in u.values.iter().enumerate() {
            if v >= 0.0 {
                m.bits[c / 64] |= 1 << (c % 64);
            }
        }
        m
    }

    /// Axis-aligned square of side `side` centered at `center`.
    pub fn square(grid: &GridSpec, side: f64, center: &[f64]) -> Self {
        Self::from_fn(grid, |x| {
            x.iter()
                .zip(center)
                .all(|(a, b)| (a - b).abs() <= side / 2.0)
        })
    }

    pub fn ball(grid: &GridSpec, radius: f64, center: &[f64]) -> Self {
        Self::from_fn(grid, |x| {
            x.iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                <= radius * radius
        })
    }

    /// The single cell containing `x`.
    pub fn point(grid: &GridSpec, x: &[f64]) -> Self {
        let mut m = Self::empty(grid);
        let idx: Vec<usize> = x
            .iter()
            .map(|&v| (((v - grid.origin) / grid.dx).floor().max(0.0) as usize).min(grid.n - 1))
            .collect();
        m.set(grid.flat(&idx), true);
        m
    }

    pub fn get(&self, c: usize) -> bool {
        self.bits[c / 64] >> (c % 64) & 1 == 1
    }

    pub fn set(&mut self, c: usize, v: bool) {
        if v {
            self.bits[c / 64] |= 1 << (c % 64);
        } else {
            self.bits[c / 64] &= !(1 << (c % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn area(&self) -> f64 {
        self.count() as f64 * self.grid.dx.powi(self.grid.dim as i32)
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.grid.cells()).filter(|&c| self.get(c))
    }

    pub fn union(&self, other: &CellMask) -> CellMask {
        CellMask {
            grid: self.grid.clone(),
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| a | b)
                .collect(),
        }
    }

    pub fn is_subset(&self, other: &CellMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    /// Chebyshev dilation by `k` cells.
    pub fn dilate(&self, k: usize) -> CellMask {
        let n = self.grid.n;
        let mut cur: Vec<bool> = (0..self.grid.cells()).map(|c| self.get(c)).collect();
        for axis in 0..self.grid.dim {
            let stride = n.pow((self.grid.dim - 1 - axis) as u32);
            let mut out = vec![false; cur.len()];
            for c in 0..cur.len() {
                if !cur[c] {
                    continue;
                }
                let i = (c / stride) % n;
                let lo = i.saturating_sub(k);
                let hi = (i + k).min(n - 1);
                for j in lo..=hi {
                    out[c + j * stride - i * stride] = true;
                }
            }
            cur = out;
        }
        let mut m = CellMask::empty(&self.grid);
        for (c, v) in cur.into_iter().enumerate() {
            if v {
                m.set(c, true);
            }
        }
        m
    }

    /// Each mask lies inside the `k`-cell dilation of the other.
    pub fn within_cells(&self, other: &CellMask, k: usize) -> bool {
        self.is_subset(&other.dilate(k)) && other.is_subset(&self.dilate(k))
    }

    /// Binary PBM; image rows run along axis 1 from top (largest) to bottom,
    /// columns along axis 0.
    pub fn write_pbm(&self, w: &mut impl Write) -> Result<()> {
        if self.grid.dim != 2 {
            return Err(Error::UnsupportedDimension {
                dim: self.grid.dim,
                what: "PBM export",
            });
        }
        let n = self.grid.n;
        writeln!(w, "P4\n{n} {n}")?;
        let row_bytes = n.div_ceil(8);
        let mut row = vec![0u8; row_bytes];
        for r in 0..n {
            let j = n - 1 - r;
            row.iter_mut().for_each(|b| *b = 0);
            for i in 0..n {
                if self.get(i * n + j) {
                    row[i / 8] |= 0x80 >> (i % 8);
                }
            }
            w.write_all(&row)?;
        }
        Ok(())
    }
}

/// Squared Euclidean distance transform of a 1D sampled function.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = f.iter().position(|x| x.is_finite());
    match first.take() {
        None => {
            d.iter_mut().for_each(|x| *x = f64::INFINITY);
            return;
        }
        Some(q0) => v[0] = q0,
    }
    for q in v[0] + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}

/// Squared distance, in cells, from every cell to the nearest cell with
/// `feature == true` (separable exact transform).
fn squared_distance_cells(grid: &GridSpec, feature: impl Fn(usize) -> bool) -> Vec<f64> {
    let n = grid.n;
    let mut g: Vec<f64> = (0..grid.cells())
        .map(|c| if feature(c) { 0.0 } else { f64::INFINITY })
        .collect();
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for axis in 0..grid.dim {
        let stride = n.pow((grid.dim - 1 - axis) as u32);
        for start in 0..grid.cells() {
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = g[start + i * stride];
            }
            edt_1d(&f, &mut d, &mut v, &mut z);
            for i in 0..n {
                g[start + i * stride] = d[i];
            }
        }
    }
    g
}

/// Signed distance to the mask boundary, positive inside, clamped at `±clamp`.
/// Every cell of the mask gets a value `≥ dx/2` and every other cell `≤ −dx/2`.
pub fn clamped_signed_distance(mask: &CellMask, clamp: f64) -> Result<GridField> {
    if mask.count() == 0 {
        return Err(Error::param("K0", "seed mask is empty"));
    }
    let grid = &mask.grid;
    let to_inside = squared_distance_cells(grid, |c| mask.get(c));
    let to_outside = squared_distance_cells(grid, |c| !mask.get(c));
    let h = grid.dx;
    let values = (0..grid.cells())
        .map(|c| {
            let s = if mask.get(c) {
                to_outside[c].sqrt() * h - 0.5 * h
            } else {
                -(to_inside[c].sqrt() * h - 0.5 * h)
            };
            s.clamp(-clamp, clamp)
        })
        .collect();
    Ok(GridField {
        grid: grid.clone(),
        values,
        time_stamp: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Front propagation
// ---------------------------------------------------------------------------

/// `K(t) = {u(·, t) ≥ 0}` at one time.
#[derive(Clone, Debug)]
pub struct FrontState {
    pub t: f64,
    pub mask: CellMask,
    /// The level-set function, kept only on request.
    pub u: Option<GridField>,
}

#[derive(Clone, Debug)]
pub struct FrontOptions {
    /// Level-set clamp, reduced to the seed's largest signed distance.
    /// Seeds that both reach the clamp start from ordered data, so nested
    /// seeds give exactly nested fronts.
    pub clamp: f64,
    pub keep_fields: bool,
    pub tile_skipping: bool,
}

impl Default for FrontOptions {
    fn default() -> Self {
        FrontOptions {
            clamp: 1.0,
            keep_fields: false,
            tile_skipping: true,
        }
    }
}

/// Distance from the mask to the box boundary, and the mask's extent from
/// the box center.
fn mask_margin(mask: &CellMask) -> (f64, f64) {
    let g = &mask.grid;
    let mid = g.origin + 0.5 * g.side();
    let mut extent: f64 = 0.0;
    for c in mask.cells() {
        for x in g.position(c) {
            extent = extent.max((x - mid).abs() + 0.5 * g.dx);
        }
    }
    (0.5 * g.side() - extent, extent)
}

/// Propagates `K0` with the G-equation at `ε = 1` and returns `K(t)` at the
/// requested times.
pub fn propagate_front(
    field: &dyn VelocityField,
    k0: &CellMask,
    times: &[f64],
    opts: &FrontOptions,
) -> Result<Vec<FrontState>> {
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0])
    {
        return Err(Error::param(
            "times",
            "must be nonnegative and nondecreasing",
        ));
    }
    let t_max = times.last().copied().unwrap_or(0.0);
    let required = (1.0 + field.sup_norm()) * t_max;
    let (margin, extent) = mask_margin(k0);
    if margin < required {
        return Err(Error::Margin {
            margin,
            required,
            required_side: 2.0 * (extent + required),
        });
    }
    let mut grid = k0.grid.clone().with_field(field);
    grid.boundary = Boundary::Clamped;
    // The clamp never exceeds the seed's peak so that the profile is
    // symmetric about the zero level; otherwise the diffusive rounding of the
    // upper plateau edge drags the front of thin seeds.
    let peak = clamped_signed_distance(k0, f64::INFINITY)?.max();
    let mut u = clamped_signed_distance(k0, opts.clamp.min(peak))?;
    u.grid = grid.clone();
    let zero = vec![0.0; grid.dim];
    let mut ev = Evolver::new(field, &grid, &zero, 0.0)?;
    if opts.tile_skipping {
        ev.enable_tile_skipping();
    }
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        ev.advance_to(&mut u, t);
        let mut mask = CellMask::superlevel(&u);
        mask.grid = k0.grid.clone();
        out.push(FrontState {
            t,
            mask,
            u: opts.keep_fields.then(|| u.clone()),
        });
    }
    Ok(out)
}

/// Writes one PBM per snapshot and `index.json` with `{times, box, n}`.
pub fn export_snapshots(states: &[FrontState], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let name = format!("front_{k:04}.pbm");
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
        s.mask.write_pbm(&mut f)?;
        files.push(name);
    }
    let (origin, side, n) = states
        .first()
        .map(|s| (s.mask.grid.origin, s.mask.grid.side(), s.mask.grid.n))
        .unwrap_or((0.0, 0.0, 0));
    let index = serde_json::json!({
        "times": states.iter().map(|s| s.t).collect::<Vec<_>>(),
        "box": [origin, origin + side],
        "n": n,
        "files": files,
    });
    std::fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Inclusion deviations
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InclusionRow {
    pub t: f64,
    /// `min{C : K(t) ⊆ (t + C)W}`.
    pub c_out: f64,
    /// `min{C : (t − C t^{2/3})W ⊆ K(t)}`.
    pub c_in: f64,
    /// Largest `s` with `sW` inside `K(t)`.
    pub inner_scale: f64,
    /// Smallest `s` with `K(t)` inside `sW`.
    pub outer_scale: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InclusionReport {
    pub rows: Vec<InclusionRow>,
    pub slope_out: f64,
    pub slope_in: f64,
    pub slope_tolerance: f64,
    pub bounded: bool,
}

impl InclusionReport {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "t,C_out,C_in")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.t, r.c_out, r.c_in)?;
        }
        Ok(())
    }
}

/// Least-squares slope of `y` against `x`.
pub fn trend_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Outer and inner deficiencies of each snapshot against `W`, with the
/// least-squares trend of both over the sampled times.
pub fn inclusion_deviation(
    states: &[FrontState],
    wulff: &WulffShape,
    slope_tolerance: f64,
) -> Result<InclusionReport> {
    if states.iter().any(|s| s.mask.grid.dim != 2) {
        return Err(Error::UnsupportedDimension {
            dim: states[0].mask.grid.dim,
            what: "inclusion deviation",
        });
    }
    if states.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::param("states", "times must increase"));
    }
    let rows: Vec<InclusionRow> = states
        .par_iter()
        .map(|s| {
            let g = &s.mask.grid;
            let mut outer: f64 = 0.0;
            let mut inner = f64::INFINITY;
            for c in 0..g.cells() {
                let gauge = wulff.gauge(&g.position(c));
                if s.mask.get(c) {
                    outer = outer.max(gauge);
                } else {
                    inner = inner.min(gauge);
                }
            }
            let c_in = if s.t > 0.0 {
                (s.t - inner) / s.t.powf(2.0 / 3.0)
            } else {
                f64::NAN
            };
            InclusionRow {
                t: s.t,
                c_out: outer - s.t,
                c_in,
                inner_scale: inner,
                outer_scale: outer,
            }
        })
        .collect();
    let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let slope_out = trend_slope(&t, &rows.iter().map(|r| r.c_out).collect::<Vec<_>>());
    let slope_in = trend_slope(&t, &rows.iter().map(|r| r.c_in).collect::<Vec<_>>());
    Ok(InclusionReport {
        bounded: slope_out <= slope_tolerance
            && slope_in <= slope_tolerance
            && rows.iter().all(|r| r.c_out.is_finite()),
        rows,
        slope_out,
        slope_in,
        slope_tolerance,
    })
}

// ---------------------------------------------------------------------------
// Area fraction
// ---------------------------------------------------------------------------

/// `ρ(t) = |{z(·, t) < θ} ∩ Q_1|` along the evolution `z_t = |Dz| + ⟨V, Dz⟩`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AreaFractionTrace {
    pub theta: f64,
    pub times: Vec<f64>,
    pub rho: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `1 + N/(2^{1/N} α*)`.
    pub t_star: f64,
    /// First sampled time with `ρ = 0`.
    pub extinction: Option<f64>,
    /// Area slack for the pairwise inequality (`3dx`).
    pub slack: f64,
    /// Largest `ρ(t₂) − ρ(t₁) + ∫α ρ^{(N−1)/N}` over sampled pairs.
    pub worst_violation: f64,
    /// Trapezoid error allowance of the integral.
    pub quadrature_tolerance: f64,
    pub pairwise_ok: bool,
    pub nonincreasing: bool,
}

impl AreaFractionTrace {
    /// `ρ` vanishes by `t* + extra`.
    pub fn extinct_by(&self, extra: f64) -> bool {
        self.extinction.is_some_and(|t| t <= self.t_star + extra)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "t,rho,alpha")?;
        for ((t, r), a) in self.times.iter().zip(&self.rho).zip(&self.alpha) {
            writeln!(w, "{t},{r},{a}")?;
        }
        Ok(())
    }
}

/// Initial data `z0 = |x|` on the unit cell with the level giving `ρ(0) = ρ0`.
pub fn radial_level_data(grid: &GridSpec, rho0: f64) -> (GridField, f64) {
    let z0 = GridField::from_fn(grid, |x| norm(x));
    let theta = (rho0 / std::f64::consts::PI).sqrt();
    (z0, theta)
}

pub fn area_fraction_trace(
    field: &dyn VelocityField,
    z0: &GridField,
    theta: f64,
    t_end: f64,
    diag: &FieldDiagnostics,
) -> Result<AreaFractionTrace> {
    let g = &z0.grid;
    if g.boundary != Boundary::Periodic || (g.side() - 1.0).abs() > 1e-12 {
        return Err(Error::param("z0", "must live on the periodic unit cell"));
    }
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::param("T", "must be positive"));
    }
    if diag.alpha.iter().any(|&a| a < -1e-12) {
        return Err(Error::Hypothesis(format!(
            "α(t) takes negative values (α* = {})",
            diag.alpha_star
        )));
    }
    let fraction = |u: &GridField| {
        u.values.iter().filter(|&&v| v < theta).count() as f64 / u.values.len() as f64
    };
    let rho0 = fraction(z0);
    if rho0 >= 0.5 {
        return Err(Error::param(
            "z0",
            format!("ρ(0) = {rho0} must be below 1/2"),
        ));
    }
    let dim = g.dim;
    let grid = g.clone().with_field(field);
    let zero = vec![0.0; dim];
    let mut ev = Evolver::new(field, &grid, &zero, 0.0)?;
    let mut z = z0.clone();
    z.grid = grid.clone();
    let sample_steps = ((0.5 * g.dx / ev.dt()).round() as usize).max(1);
    let mut times = vec![z.time_stamp];
    let mut rho = vec![rho0];
    while z.time_stamp < t_end - 1e-12 {
        ev.advance(&mut z, sample_steps);
        times.push(z.time_stamp);
        rho.push(fraction(&z));
    }
    let expo = (dim as f64 - 1.0) / dim as f64;
    let alpha: Vec<f64> = times.iter().map(|&t| diag.alpha_at(t)).collect();
    let f: Vec<f64> = rho
        .iter()
        .zip(&alpha)
        .map(|(r, a)| a * r.powf(expo))
        .collect();
    let mut integral = vec![0.0; times.len()];
    let mut quad = 0.0;
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        integral[k] = integral[k - 1] + 0.5 * h * (f[k] + f[k - 1]);
        quad += 0.5 * h * (f[k] - f[k - 1]).abs();
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            worst = worst.max(rho[j] - rho[i] + (integral[j] - integral[i]));
        }
    }
    let slack = 3.0 * g.dx;
    let nonincreasing = rho.windows(2).all(|w| w[1] <= w[0] + slack);
    let extinction = times
        .iter()
        .zip(&rho)
        .find(|(_, r)| **r == 0.0)
        .map(|(t, _)| *t);
    let n = dim as f64;
    let t_star = if diag.alpha_star > 0.0 {
        1.0 + n / (2f64.powf(1.0 / n) * diag.alpha_star)
    } else {
        f64::INFINITY
    };
    Ok(AreaFractionTrace {
        theta,
        times,
        rho,
        alpha,
        t_star,
        extinction,
        slack,
        worst_violation: worst,
        quadrature_tolerance: quad,
        pairwise_ok: worst <= slack + quad,
        nonincreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{default_c_i, diagnostics, BuiltinField};

    fn unit_table(m: usize, c: [f64; 2]) -> EffectiveHamiltonian {
        EffectiveHamiltonian::from_fn(2, m, norm(&c), |p| norm(p) + p[0] * c[0] + p[1] * c[1])
            .unwrap()
    }

    #[test]
    fn zero_field_polygon_is_circumscribed() {
        let w = WulffShape::from_table(&unit_table(16, [0.0, 0.0])).unwrap();
        assert_eq!(w.vertices.len(), 16);
        for s in w.support_at_fan() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let r = 1.0 / (std::f64::consts::PI / 16.0).cos();
        for v in &w.vertices {
            assert!((v[0].hypot(v[1]) - r).abs() < 1e-12);
        }
        assert!(w.inscribed_violation() < 1e-12);
    }

    #[test]
    fn shifted_polygon_is_centered_at_minus_c() {
        let c = [0.3, -0.4];
        let w = WulffShape::from_table(&unit_table(16, c)).unwrap();
        for (p, _) in &w.halfspaces {
            let expected = 1.0 - (p[0] * c[0] + p[1] * c[1]);
            assert!((w.support(p) - expected).abs() < 1e-12);
        }
        assert!(w.contains(&[-c[0], -c[1]]));
        assert!((w.gauge(&[-c[0] + 1.0, -c[1]]) - 1.0).abs() < 0.02);
    }

    #[test]
    fn redundant_halfplanes_are_pruned() {
        let mut hs: Vec<(Vec<f64>, f64)> = (0..4)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64;
                (vec![a.cos(), a.sin()], 1.0)
            })
            .collect();
        let a = std::f64::consts::FRAC_PI_4;
        hs.push((vec![a.cos(), a.sin()], 5.0));
        let w = WulffShape::from_halfspaces(hs).unwrap();
        assert_eq!(w.vertices.len(), 4);
        assert!((w.area() - 4.0).abs() < 1e-12);
        assert!(!w.active.contains(&4));
    }

    #[test]
    fn nonpositive_hbar_rejected() {
        let t = EffectiveHamiltonian::from_fn(2, 8, 2.0, |p| p[0] + 0.5 * norm(p)).unwrap();
        assert!(matches!(
            WulffShape::from_table(&t),
            Err(Error::InvalidParameter { name: "hbar", .. })
        ));
    }

    #[test]
    fn hopf_lax_zero_time_and_affine() {
        let w = WulffShape::from_table(&unit_table(16, [0.2, 0.1])).unwrap();
        let a = std::f64::consts::TAU * 5.0 / 16.0;
        let u0 = AffineData {
            p: vec![2.0 * a.cos(), 2.0 * a.sin()],
            offset: 0.1,
            clamp: f64::INFINITY,
        };
        let h0 = hopf_lax(&u0, 0.0, &w).unwrap();
        assert_eq!(h0.eval(&[0.3, 0.7]), u0.eval(&[0.3, 0.7]));
        let t = 1.5;
        let h = hopf_lax(&u0, t, &w).unwrap();
        let hbar = norm(&u0.p) + u0.p[0] * 0.2 + u0.p[1] * 0.1;
        for x in [[0.0, 0.0], [1.0, -2.0]] {
            let expected = u0.eval(&x) + t * hbar;
            assert!(
                (h.eval(&x) - expected).abs() < 1e-12,
                "{} {}",
                h.eval(&x),
                expected
            );
        }
        // The sampled default agrees with the closed form.
        let generic = FnData {
            dim: 2,
            lipschitz: 1.0,
            f: |x: &[f64]| u0.p[0] * x[0] + u0.p[1] * x[1] + 0.1,
        };
        let a = generic.hopf_lax_at(&w, &[0.4, 0.2], t);
        let b = u0.hopf_lax_at(&w, &[0.4, 0.2], t);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn hopf_lax_distance_cone() {
        let w = WulffShape::from_table(&unit_table(256, [0.0, 0.0])).unwrap();
        let cone = BallData {
            center: vec![0.0, 0.0],
            radius: 0.0,
            clamp: f64::INFINITY,
            period: None,
        };
        let t = 0.8;
        for x in [[0.0, 0.0], [0.5, 0.1], [2.0, -1.0], [-3.0, 0.0]] {
            let expected = -(norm(&x) - t).max(0.0);
            let got = hopf_lax(&cone, t, &w).unwrap().eval(&x);
            assert!((got - expected).abs() < 1e-3, "{x:?} {got} {expected}");
            let sampled = FnData {
                dim: 2,
                lipschitz: 1.0,
                f: |y: &[f64]| -norm(y),
            }
            .hopf_lax_at(&w, &x, t);
            assert!((sampled - got).abs() < t / 16.0 + 1e-3);
        }
    }

    #[test]
    fn periodic_ball_uses_nearest_image() {
        let w = WulffShape::from_table(&unit_table(32, [0.0, 0.0])).unwrap();
        let b = BallData {
            center: vec![0.0, 0.0],
            radius: 0.5,
            clamp: 1.0,
            period: Some(4.0),
        };
        assert!((b.eval(&[3.9, 0.0]) - 0.4).abs() < 1e-12);
        assert!((b.hopf_lax_at(&w, &[3.0, 0.0], 0.25) - (0.5 - 0.75)).abs() < 1e-3);
    }

    #[test]
    fn homogenized_evolution_matches_hopf_lax() {
        let w = WulffShape::from_table(&unit_table(32, [0.3, 0.0])).unwrap();
        let grid = GridSpec::centered_box(2, 128, 4.0, Boundary::Periodic);
        let u0 = BallData {
            center: vec![0.0, 0.0],
            radius: 0.6,
            clamp: 1.0,
            period: Some(4.0),
        };
        let t = 0.5;
        let num = evolve_homogenized(&sample_macro(&u0, &grid), &w, t).unwrap();
        let exact = sample_macro(&hopf_lax(&u0, t, &w).unwrap(), &grid);
        assert!(
            num.sup_distance(&exact) < 3.0 * grid.dx,
            "{}",
            num.sup_distance(&exact)
        );
    }

    fn brute_sq_distance(grid: &GridSpec, feature: &[bool]) -> Vec<f64> {
        (0..grid.cells())
            .map(|c| {
                let a = grid.index(c);
                (0..grid.cells())
                    .filter(|&d| feature[d])
                    .map(|d| {
                        let b = grid.index(d);
                        a.iter()
                            .zip(&b)
                            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for dim in [1, 2, 3] {
            let n = if dim == 3 { 7 } else { 13 };
            let grid = GridSpec::centered_box(dim, n, 1.0, Boundary::Clamped);
            let feature: Vec<bool> = (0..grid.cells()).map(|_| rng.gen_bool(0.08)).collect();
            let fast = squared_distance_cells(&grid, |c| feature[c]);
            let slow = brute_sq_distance(&grid, &feature);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn signed_distance_preserves_mask() {
        let grid = GridSpec::centered_box(2, 40, 4.0, Boundary::Clamped);
        let k0 = CellMask::ball(&grid, 0.9, &[0.2, -0.1]);
        let u = clamped_signed_distance(&k0, 1.0).unwrap();
        assert_eq!(CellMask::superlevel(&u), k0);
        assert!(u.max() <= 1.0 && u.min() >= -1.0);
    }

    #[test]
    fn zero_field_point_seed_grows_a_ball() {
        let grid = GridSpec::centered_box(2, 200, 5.0, Boundary::Clamped);
        let field = BuiltinField::zero(2);
        // A single cell is below the resolution of the scheme; the smallest
        // seed is a disk of two cells.
        let r0 = 2.0 * grid.dx;
        let k0 = CellMask::ball(&grid, r0, &[0.0, 0.0]);
        let t = 1.5;
        let states = propagate_front(&field, &k0, &[0.5, t], &FrontOptions::default()).unwrap();
        let k = &states[1].mask;
        let tol = 3.0 * grid.dx;
        for c in 0..grid.cells() {
            let x = grid.position(c);
            let r = x[0].hypot(x[1]);
            if r < t + r0 - tol {
                assert!(k.get(c), "missing at r = {r}");
            }
            if r > t + r0 + tol {
                assert!(!k.get(c), "extra at r = {r}");
            }
        }
        assert!(states[0].mask.is_subset(k));
    }

    #[test]
    fn constant_field_translates_the_front() {
        let grid = GridSpec::centered_box(2, 160, 6.0, Boundary::Clamped);
        let c = [0.4, 0.0];
        let field = BuiltinField::constant(&c).unwrap();
        let k0 = CellMask::ball(&grid, 0.5, &[0.0, 0.0]);
        let t = 1.0;
        let states = propagate_front(&field, &k0, &[t], &FrontOptions::default()).unwrap();
        let tol = 3.0 * grid.dx;
        for c_ in 0..grid.cells() {
            let x = grid.position(c_);
            let r = (x[0] + c[0] * t).hypot(x[1]);
            if r < 0.5 + t - tol {
                assert!(states[0].mask.get(c_));
            }
            if r > 0.5 + t + tol {
                assert!(!states[0].mask.get(c_));
            }
        }
    }

    #[test]
    fn margin_violation_reports_required_side() {
        let grid = GridSpec::centered_box(2, 32, 2.0, Boundary::Clamped);
        let field = BuiltinField::zero(2);
        let k0 = CellMask::square(&grid, 0.5, &[0.0, 0.0]);
        match propagate_front(&field, &k0, &[1.0], &FrontOptions::default()) {
            Err(Error::Margin {
                required,
                required_side,
                ..
            }) => {
                assert!((required - 1.0).abs() < 1e-12);
                assert!(required_side >= 2.5);
            }
            other => panic!("expected a margin error, got {other:?}"),
        }
    }

    #[test]
    fn zero_field_inclusion_deviation_is_small() {
        let grid = GridSpec::centered_box(2, 256, 12.0, Boundary::Clamped);
        let field = BuiltinField::zero(2);
        let w = WulffShape::from_table(&unit_table(32, [0.0, 0.0])).unwrap();
        let k0 = CellMask::ball(&grid, 1.0, &[0.0, 0.0]);
        let times = [1.0, 2.0, 3.0, 4.0];
        let states = propagate_front(&field, &k0, &times, &FrontOptions::default()).unwrap();
        let rep = inclusion_deviation(&states, &w, 0.05).unwrap();
        // K(t) is the ball of radius t + 1: C_out → 1 and C_in = −t^{−2/3}.
        for r in &rep.rows {
            assert!((r.c_out - 1.0).abs() <= 3.0 * grid.dx, "{r:?}");
            assert!(
                (r.c_in + r.t.powf(-2.0 / 3.0)).abs() <= 3.0 * grid.dx / r.t.powf(2.0 / 3.0),
                "{r:?}"
            );
        }
        assert!(rep.slope_out.abs() < 0.05);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("t,C_out,C_in\n"));
    }

    #[test]
    fn inclusion_and_superposition_on_zero_field() {
        let grid = GridSpec::centered_box(2, 96, 6.0, Boundary::Clamped);
        let field = BuiltinField::zero(2);
        let a = CellMask::square(&grid, 0.6, &[-0.8, 0.0]);
        let b = CellMask::ball(&grid, 0.4, &[0.9, 0.3]);
        let big = a.union(&CellMask::square(&grid, 1.0, &[-0.8, 0.0]));
        let opts = FrontOptions::default();
        let t = [0.7];
        let ka = propagate_front(&field, &a, &t, &opts).unwrap();
        let kb = propagate_front(&field, &b, &t, &opts).unwrap();
        let kab = propagate_front(&field, &a.union(&b), &t, &opts).unwrap();
        let kbig = propagate_front(&field, &big, &t, &opts).unwrap();
        assert!(ka[0].mask.is_subset(&kbig[0].mask));
        assert!(kab[0].mask.within_cells(&ka[0].mask.union(&kb[0].mask), 1));
    }

    #[test]
    fn pbm_and_index_export() {
        let grid = GridSpec::centered_box(2, 10, 4.0, Boundary::Clamped);
        let k0 = CellMask::square(&grid, 0.8, &[0.0, 0.0]);
        let states = propagate_front(
            &BuiltinField::zero(2),
            &k0,
            &[0.0, 0.5],
            &FrontOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_snapshots(&states, dir.path()).unwrap();
        let pbm = std::fs::read(dir.path().join("front_0000.pbm")).unwrap();
        assert!(pbm.starts_with(b"P4\n10 10\n"));
        assert_eq!(pbm.len(), b"P4\n10 10\n".len() + 10 * 2);
        let index: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("index.json")).unwrap()).unwrap();
        assert_eq!(index["n"], 10);
        assert_eq!(index["times"][1], 0.5);
    }

    #[test]
    fn area_fraction_zero_field() {
        let grid = GridSpec::unit_cell(2, 128);
        let field = BuiltinField::zero(2);
        let diag = diagnostics(&field, 32, default_c_i(2)).unwrap();
        let (z0, theta) = radial_level_data(&grid, 0.25);
        let tr = area_fraction_trace(&field, &z0, theta, 2.5, &diag).unwrap();
        assert!((tr.t_star - 2.0).abs() < 1e-12);
        assert!((tr.rho[0] - 0.25).abs() < 0.01);
        assert!(tr.rho.windows(2).all(|w| w[1] <= w[0]));
        assert!(tr.pairwise_ok, "{}", tr.worst_violation);
        let ext = tr.extinction.unwrap();
        assert!(ext <= theta + 3.0 * grid.dx, "{ext}");
        assert!(tr.extinct_by(0.0));
    }

    #[test]
    fn area_fraction_rejects_large_initial_set() {
        let grid = GridSpec::unit_cell(2, 32);
        let field = BuiltinField::zero(2);
        let diag = diagnostics(&field, 32, default_c_i(2)).unwrap();
        let z0 = GridField::constant(&grid, -1.0);
        assert!(matches!(
            area_fraction_trace(&field, &z0, 0.0, 1.0, &diag),
            Err(Error::InvalidParameter { name: "z0", .. })
        ));
    }
}
