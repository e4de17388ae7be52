//! Periodic velocity fields and their divergence diagnostics.
//!
//! Every field is `Z^{N+1}`-periodic: period one in each space direction and
//! in time. Fields with another period are loaded after rescaling space and
//! time by the same factor, which leaves the G-equation (and therefore the
//! effective Hamiltonian) unchanged.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default isoperimetric constant of the unit square, `(1/2)^{1/2}`.
pub const DEFAULT_C_I_2D: f64 = std::f64::consts::FRAC_1_SQRT_2;

const FD_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Periodic profiles
// ---------------------------------------------------------------------------

/// One harmonic `cos·cos(2πks) + sin·sin(2πks)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub freq: f64,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// A 1-periodic trigonometric polynomial `offset + Σ terms`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl Profile {
    pub fn constant(c: f64) -> Self {
        Profile {
            offset: c,
            terms: Vec::new(),
        }
    }

    pub fn sin(freq: f64) -> Self {
        Profile {
            offset: 0.0,
            terms: vec![TrigTerm {
                freq,
                cos: 0.0,
                sin: 1.0,
            }],
        }
    }

    pub fn cos(freq: f64) -> Self {
        Profile {
            offset: 0.0,
            terms: vec![TrigTerm {
                freq,
                cos: 1.0,
                sin: 0.0,
            }],
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.offset *= s;
        for t in &mut self.terms {
            t.cos *= s;
            t.sin *= s;
        }
        self
    }

    pub fn plus_constant(mut self, c: f64) -> Self {
        self.offset += c;
        self
    }

    /// Rejects non-integer frequencies (the profile would not be 1-periodic).
    pub fn validate(&self) -> Result<()> {
        if !self.offset.is_finite() {
            return Err(Error::param("profile", "offset is not finite"));
        }
        for t in &self.terms {
            if !(t.freq.is_finite() && t.cos.is_finite() && t.sin.is_finite()) {
                return Err(Error::param("profile", "non-finite coefficient"));
            }
            if t.freq < 0.0 || (t.freq - t.freq.round()).abs() > 1e-12 {
                return Err(Error::param(
                    "profile",
                    format!(
                        "frequency {} is not a nonnegative integer; profile is not periodic",
                        t.freq
                    ),
                ));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn value(&self, s: f64) -> f64 {
        let mut v = self.offset;
        for t in &self.terms {
            let (sn, cs) = (TAU * t.freq * s).sin_cos();
            v += t.cos * cs + t.sin * sn;
        }
        v
    }

    #[inline]
    pub fn derivative(&self, s: f64) -> f64 {
        let mut v = 0.0;
        for t in &self.terms {
            let w = TAU * t.freq;
            let (sn, cs) = (w * s).sin_cos();
            v += w * (t.sin * cs - t.cos * sn);
        }
        v
    }

    /// Average over one period.
    pub fn mean(&self) -> f64 {
        self.offset
            + self
                .terms
                .iter()
                .filter(|t| t.freq == 0.0)
                .map(|t| t.cos)
                .sum::<f64>()
    }

    /// Upper bound of `|value|` by the triangle inequality.
    pub fn sup_bound(&self) -> f64 {
        self.offset.abs()
            + self
                .terms
                .iter()
                .map(|t| t.cos.abs() + t.sin.abs())
                .sum::<f64>()
    }

    /// Upper bound of `|derivative|`.
    pub fn derivative_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| TAU * t.freq * (t.cos.abs() + t.sin.abs()))
            .sum()
    }

    pub fn is_constant(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.freq == 0.0 || (t.cos == 0.0 && t.sin == 0.0))
    }
}

// ---------------------------------------------------------------------------
// The field trait
// ---------------------------------------------------------------------------

/// A `Z^{N+1}`-periodic vector field `V(x, t)`.
pub trait VelocityField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);

    fn name(&self) -> String;

    /// `div_x V(x, t)`; central differences unless the field knows better.
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let n = self.dim();
        let mut xp = x.to_vec();
        let mut vp = vec![0.0; n];
        let mut vm = vec![0.0; n];
        let mut div = 0.0;
        for k in 0..n {
            xp[k] = x[k] + FD_STEP;
            self.eval(&xp, t, &mut vp);
            xp[k] = x[k] - FD_STEP;
            self.eval(&xp, t, &mut vm);
            xp[k] = x[k];
            div += (vp[k] - vm[k]) / (2.0 * FD_STEP);
        }
        div
    }

    fn is_steady(&self) -> bool {
        false
    }

    /// True when the field is divergence free by construction.
    fn is_divergence_free(&self) -> bool {
        false
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }

    /// Per-component upper bounds of `|V_i|` over space and time.
    fn component_bounds(&self) -> Vec<f64> {
        sampled_bounds(self).0
    }

    /// Upper bound (or sampled estimate) of `sup |V|`.
    fn sup_norm(&self) -> f64 {
        sampled_bounds(self).1
    }

    /// Samples the field on a tensor grid given by per-axis coordinates,
    /// writing component `k` of the row-major cell `c` to `out[k][c]`.
    fn sample_axes(&self, axes: &[Vec<f64>], t: f64, out: &mut [Vec<f64>]) {
        let n = self.dim();
        let mut x = vec![0.0; n];
        let mut v = vec![0.0; n];
        for_each_cell(axes, |c, idx| {
            for (k, &i) in idx.iter().enumerate() {
                x[k] = axes[k][i];
            }
            self.eval(&x, t, &mut v);
            for k in 0..n {
                out[k][c] = v[k];
            }
        });
    }
}

/// Convenience evaluation into a fresh vector.
pub fn value(field: &dyn VelocityField, x: &[f64], t: f64) -> Vec<f64> {
    let mut v = vec![0.0; field.dim()];
    field.eval(x, t, &mut v);
    v
}

fn sampled_bounds<F: VelocityField + ?Sized>(field: &F) -> (Vec<f64>, f64) {
    let n = field.dim();
    let res = match n {
        1 => 512,
        2 => 96,
        _ => 24,
    };
    let slices = if field.is_steady() { 1 } else { 24 };
    let axes: Vec<Vec<f64>> = (0..n).map(|_| midpoints(res)).collect();
    let mut comps = vec![0.0f64; n];
    let mut sup = 0.0f64;
    let mut v = vec![0.0; n];
    let mut x = vec![0.0; n];
    for s in 0..slices {
        let t = s as f64 / slices as f64;
        for_each_cell(&axes, |_, idx| {
            for (k, &i) in idx.iter().enumerate() {
                x[k] = axes[k][i];
            }
            field.eval(&x, t, &mut v);
            let mut norm2 = 0.0;
            for k in 0..n {
                comps[k] = comps[k].max(v[k].abs());
                norm2 += v[k] * v[k];
            }
            sup = sup.max(norm2.sqrt());
        });
    }
    (comps, sup)
}

/// Midpoints of `n` equal cells of `[-1/2, 1/2)`.
pub fn midpoints(n: usize) -> Vec<f64> {
    (0..n).map(|i| -0.5 + (i as f64 + 0.5) / n as f64).collect()
}

/// Visits the cells of a tensor grid in row-major order (last axis fastest).
pub fn for_each_cell(axes: &[Vec<f64>], mut f: impl FnMut(usize, &[usize])) {
    let dims: Vec<usize> = axes.iter().map(Vec::len).collect();
    let total: usize = dims.iter().product();
    let mut idx = vec![0usize; dims.len()];
    for c in 0..total {
        f(c, &idx);
        for a in (0..dims.len()).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Built-in families
// ---------------------------------------------------------------------------

/// Built-in field families, as written in field definition files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Zero {
        dim: usize,
    },
    Constant {
        c: Vec<f64>,
    },
    /// `V = amplitude · f(x_profile_axis) · e_flow_axis`.
    Shear {
        dim: usize,
        flow_axis: usize,
        profile_axis: Option<usize>,
        amplitude: f64,
        profile: Profile,
    },
    /// `V = ∇^⊥ E` with `E = (A/2π) sin(2πx₁) sin(2πx₂)`.
    Cellular {
        amplitude: f64,
    },
    /// `V = ∇^⊥ E` with `E = E₁(x₁ + t) E₂(x₂)`.
    TravelingProduct {
        e1: Profile,
        e2: Profile,
    },
    /// Compressible one-axis field `V = amplitude · f(x_axis) · e_axis`.
    Compression {
        dim: usize,
        axis: usize,
        amplitude: f64,
        profile: Profile,
    },
}

#[derive(Clone, Debug)]
enum Kind {
    Zero,
    Constant(Vec<f64>),
    Shear {
        flow: usize,
        across: usize,
        amp: f64,
        profile: Profile,
    },
    Cellular(f64),
    Traveling(Profile, Profile),
    Compression {
        axis: usize,
        amp: f64,
        profile: Profile,
    },
}

/// A validated built-in field.
#[derive(Clone, Debug)]
pub struct BuiltinField {
    dim: usize,
    kind: Kind,
    family: Family,
}

/// Validates a family description and builds the field.
pub fn make_builtin(family: Family) -> Result<BuiltinField> {
    let finite = |x: f64, name: &'static str| {
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::param(name, "must be finite"))
        }
    };
    let (dim, kind) = match &family {
        Family::Zero { dim } => {
            check_dim(*dim, "zero field")?;
            (*dim, Kind::Zero)
        }
        Family::Constant { c } => {
            check_dim(c.len(), "constant field")?;
            for &ci in c {
                finite(ci, "c")?;
            }
            (c.len(), Kind::Constant(c.clone()))
        }
        Family::Shear {
            dim,
            flow_axis,
            profile_axis,
            amplitude,
            profile,
        } => {
            check_dim(*dim, "shear field")?;
            if *dim < 2 {
                return Err(Error::UnsupportedDimension {
                    dim: *dim,
                    what: "shear field",
                });
            }
            finite(*amplitude, "amplitude")?;
            profile.validate()?;
            let across = match profile_axis {
                Some(a) => *a,
                None if *dim == 2 => 1 - flow_axis.min(&1),
                None => return Err(Error::param("profile_axis", "required for dim > 2")),
            };
            if *flow_axis >= *dim || across >= *dim || across == *flow_axis {
                return Err(Error::param(
                    "flow_axis",
                    "flow and profile axes must be distinct axes of the field",
                ));
            }
            (
                *dim,
                Kind::Shear {
                    flow: *flow_axis,
                    across,
                    amp: *amplitude,
                    profile: profile.clone(),
                },
            )
        }
        Family::Cellular { amplitude } => {
            finite(*amplitude, "amplitude")?;
            (2, Kind::Cellular(*amplitude))
        }
        Family::TravelingProduct { e1, e2 } => {
            e1.validate()?;
            e2.validate()?;
            (2, Kind::Traveling(e1.clone(), e2.clone()))
        }
        Family::Compression {
            dim,
            axis,
            amplitude,
            profile,
        } => {
            check_dim(*dim, "compression field")?;
            finite(*amplitude, "amplitude")?;
            profile.validate()?;
            if *axis >= *dim {
                return Err(Error::param("axis", "out of range"));
            }
            (
                *dim,
                Kind::Compression {
                    axis: *axis,
                    amp: *amplitude,
                    profile: profile.clone(),
                },
            )
        }
    };
    Ok(BuiltinField { dim, kind, family })
}

fn check_dim(dim: usize, what: &'static str) -> Result<()> {
    if (1..=3).contains(&dim) {
        Ok(())
    } else {
        Err(Error::UnsupportedDimension { dim, what })
    }
}

impl BuiltinField {
    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn zero(dim: usize) -> Self {
        make_builtin(Family::Zero { dim }).expect("valid zero field")
    }

    pub fn constant(c: &[f64]) -> Result<Self> {
        make_builtin(Family::Constant { c: c.to_vec() })
    }

    /// `V = (A sin(2πx₂), 0)`.
    pub fn shear_sin(amplitude: f64) -> Self {
        make_builtin(Family::Shear {
            dim: 2,
            flow_axis: 0,
            profile_axis: Some(1),
            amplitude,
            profile: Profile::sin(1.0),
        })
        .expect("valid shear field")
    }

    pub fn cellular(amplitude: f64) -> Self {
        make_builtin(Family::Cellular { amplitude }).expect("valid cellular field")
    }

    /// Traveling product with `E₁(s) = sin(2πs)/(2π)` and
    /// `E₂(x₂) = amplitude·sin(2πx₂)/(2π)`; `E₁(0) = 0`.
    pub fn traveling_sin(amplitude: f64) -> Self {
        make_builtin(Family::TravelingProduct {
            e1: Profile::sin(1.0).scaled(1.0 / TAU),
            e2: Profile::sin(1.0).scaled(amplitude / TAU),
        })
        .expect("valid traveling field")
    }
}

impl VelocityField for BuiltinField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        match &self.kind {
            Kind::Zero => "zero".into(),
            Kind::Constant(c) => format!("constant{c:?}"),
            Kind::Shear { amp, .. } => format!("shear(A={amp})"),
            Kind::Cellular(a) => format!("cellular(A={a})"),
            Kind::Traveling(..) => "traveling_product".into(),
            Kind::Compression { amp, .. } => format!("compression(A={amp})"),
        }
    }

    #[inline]
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match &self.kind {
            Kind::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Kind::Constant(c) => out.copy_from_slice(c),
            Kind::Shear {
                flow,
                across,
                amp,
                profile,
            } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                out[*flow] = amp * profile.value(x[*across]);
            }
            Kind::Cellular(a) => {
                let (s1, c1) = (TAU * x[0]).sin_cos();
                let (s2, c2) = (TAU * x[1]).sin_cos();
                out[0] = -a * s1 * c2;
                out[1] = a * c1 * s2;
            }
            Kind::Traveling(e1, e2) => {
                let s = x[0] + t;
                out[0] = -e1.value(s) * e2.derivative(x[1]);
                out[1] = e1.derivative(s) * e2.value(x[1]);
            }
            Kind::Compression { axis, amp, profile } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                out[*axis] = amp * profile.value(x[*axis]);
            }
        }
    }

    fn divergence(&self, x: &[f64], _t: f64) -> f64 {
        match &self.kind {
            Kind::Compression { axis, amp, profile } => amp * profile.derivative(x[*axis]),
            _ => 0.0,
        }
    }

    fn is_steady(&self) -> bool {
        !matches!(self.kind, Kind::Traveling(..))
    }

    fn is_divergence_free(&self) -> bool {
        match &self.kind {
            Kind::Compression { amp, profile, .. } => *amp == 0.0 || profile.is_constant(),
            _ => true,
        }
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(match &self.kind {
            Kind::Zero | Kind::Constant(_) => 0.0,
            Kind::Shear { amp, profile, .. } | Kind::Compression { amp, profile, .. } => {
                amp.abs() * profile.derivative_bound()
            }
            Kind::Cellular(a) => TAU * a.abs() * 2f64.sqrt(),
            Kind::Traveling(e1, e2) => {
                let d1 = e1.derivative_bound();
                let d2 = e2.derivative_bound();
                let dd1 = e1
                    .terms
                    .iter()
                    .map(|t| (TAU * t.freq).powi(2) * (t.cos.abs() + t.sin.abs()))
                    .sum::<f64>();
                let dd2 = e2
                    .terms
                    .iter()
                    .map(|t| (TAU * t.freq).powi(2) * (t.cos.abs() + t.sin.abs()))
                    .sum::<f64>();
                2.0 * (d1 * d2 + e1.sup_bound() * dd2 + dd1 * e2.sup_bound())
            }
        })
    }

    fn component_bounds(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        match &self.kind {
            Kind::Zero => {}
            Kind::Constant(c) => {
                for (bi, ci) in b.iter_mut().zip(c) {
                    *bi = ci.abs();
                }
            }
            Kind::Shear {
                flow, amp, profile, ..
            } => b[*flow] = amp.abs() * profile.sup_bound(),
            Kind::Cellular(a) => {
                b[0] = a.abs();
                b[1] = a.abs();
            }
            Kind::Traveling(e1, e2) => {
                b[0] = e1.sup_bound() * e2.derivative_bound();
                b[1] = e1.derivative_bound() * e2.sup_bound();
            }
            Kind::Compression { axis, amp, profile } => b[*axis] = amp.abs() * profile.sup_bound(),
        }
        b
    }

    fn sup_norm(&self) -> f64 {
        match &self.kind {
            Kind::Cellular(a) => a.abs(),
            _ => self
                .component_bounds()
                .iter()
                .map(|b| b * b)
                .sum::<f64>()
                .sqrt(),
        }
    }

    fn sample_axes(&self, axes: &[Vec<f64>], t: f64, out: &mut [Vec<f64>]) {
        match &self.kind {
            Kind::Cellular(a) => {
                let (s1, c1): (Vec<f64>, Vec<f64>) =
                    axes[0].iter().map(|&x| (TAU * x).sin_cos()).unzip();
                let (s2, c2): (Vec<f64>, Vec<f64>) =
                    axes[1].iter().map(|&x| (TAU * x).sin_cos()).unzip();
                let ny = axes[1].len();
                let (o0, o1) = out.split_at_mut(1);
                for i in 0..axes[0].len() {
                    let r0 = &mut o0[0][i * ny..(i + 1) * ny];
                    let r1 = &mut o1[0][i * ny..(i + 1) * ny];
                    for j in 0..ny {
                        r0[j] = -a * s1[i] * c2[j];
                        r1[j] = a * c1[i] * s2[j];
                    }
                }
            }
            Kind::Traveling(e1, e2) => {
                let f1: Vec<f64> = axes[0].iter().map(|&x| e1.value(x + t)).collect();
                let g1: Vec<f64> = axes[0].iter().map(|&x| e1.derivative(x + t)).collect();
                let f2: Vec<f64> = axes[1].iter().map(|&x| e2.value(x)).collect();
                let g2: Vec<f64> = axes[1].iter().map(|&x| e2.derivative(x)).collect();
                let ny = axes[1].len();
                let (o0, o1) = out.split_at_mut(1);
                for i in 0..axes[0].len() {
                    let r0 = &mut o0[0][i * ny..(i + 1) * ny];
                    let r1 = &mut o1[0][i * ny..(i + 1) * ny];
                    for j in 0..ny {
                        r0[j] = -f1[i] * g2[j];
                        r1[j] = g1[i] * f2[j];
                    }
                }
            }
            _ => {
                // one-axis families: evaluate the profile per axis coordinate
                let n = self.dim;
                for o in out.iter_mut() {
                    o.iter_mut().for_each(|v| *v = 0.0);
                }
                let (comp, axis, amp, profile, constant) = match &self.kind {
                    Kind::Zero => return,
                    Kind::Constant(c) => {
                        for k in 0..n {
                            out[k].iter_mut().for_each(|v| *v = c[k]);
                        }
                        return;
                    }
                    Kind::Shear {
                        flow,
                        across,
                        amp,
                        profile,
                    } => (*flow, *across, *amp, profile, 0.0),
                    Kind::Compression { axis, amp, profile } => (*axis, *axis, *amp, profile, 0.0),
                    _ => unreachable!(),
                };
                let vals: Vec<f64> = axes[axis]
                    .iter()
                    .map(|&x| constant + amp * profile.value(x))
                    .collect();
                let target = &mut out[comp];
                for_each_cell(axes, |c, idx| target[c] = vals[idx[axis]]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Closure-backed fields
// ---------------------------------------------------------------------------

type EvalFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;

/// A user-supplied analytic field. Divergence by central differences.
#[derive(Clone)]
pub struct FnField {
    dim: usize,
    name: String,
    steady: bool,
    divergence_free: bool,
    f: Arc<EvalFn>,
}

impl FnField {
    pub fn new(
        dim: usize,
        name: impl Into<String>,
        f: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        FnField {
            dim,
            name: name.into(),
            steady: false,
            divergence_free: false,
            f: Arc::new(f),
        }
    }

    pub fn steady(mut self) -> Self {
        self.steady = true;
        self
    }

    pub fn divergence_free(mut self) -> Self {
        self.divergence_free = true;
        self
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField")
            .field("dim", &self.dim)
            .field("name", &self.name)
            .finish()
    }
}

impl VelocityField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.f)(x, t, out)
    }
    fn name(&self) -> String {
        self.name.clone()
    }
    fn is_steady(&self) -> bool {
        self.steady
    }
    fn is_divergence_free(&self) -> bool {
        self.divergence_free
    }
}

/// `V(x,t) + c(t)` for a periodic drift `c`.
#[derive(Clone, Debug)]
pub struct Drifted {
    base: Arc<dyn VelocityField>,
    drift: Vec<Profile>,
}

impl Drifted {
    pub fn new(base: Arc<dyn VelocityField>, drift: Vec<Profile>) -> Result<Self> {
        if drift.len() != base.dim() {
            return Err(Error::param(
                "drift",
                "one profile per component is required",
            ));
        }
        for p in &drift {
            p.validate()?;
        }
        Ok(Drifted { base, drift })
    }

    /// `∫₀¹ c(s) ds`.
    pub fn mean_drift(&self) -> Vec<f64> {
        self.drift.iter().map(Profile::mean).collect()
    }
}

impl VelocityField for Drifted {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.base.eval(x, t, out);
        for (o, c) in out.iter_mut().zip(&self.drift) {
            *o += c.value(t);
        }
    }
    fn name(&self) -> String {
        format!("{}+drift", self.base.name())
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        self.base.divergence(x, t)
    }
    fn is_steady(&self) -> bool {
        self.base.is_steady() && self.drift.iter().all(Profile::is_constant)
    }
    fn is_divergence_free(&self) -> bool {
        self.base.is_divergence_free()
    }
    fn lipschitz_bound(&self) -> Option<f64> {
        self.base.lipschitz_bound()
    }
    fn component_bounds(&self) -> Vec<f64> {
        self.base
            .component_bounds()
            .iter()
            .zip(&self.drift)
            .map(|(b, c)| b + c.sup_bound())
            .collect()
    }
    fn sup_norm(&self) -> f64 {
        self.base.sup_norm()
            + self
                .drift
                .iter()
                .map(|c| c.sup_bound().powi(2))
                .sum::<f64>()
                .sqrt()
    }
    fn sample_axes(&self, axes: &[Vec<f64>], t: f64, out: &mut [Vec<f64>]) {
        self.base.sample_axes(axes, t, out);
        for (o, c) in out.iter_mut().zip(&self.drift) {
            let ct = c.value(t);
            o.iter_mut().for_each(|v| *v += ct);
        }
    }
}

// ---------------------------------------------------------------------------
// Sampled fields
// ---------------------------------------------------------------------------

/// A field given by node values on a periodic grid (`n` nodes per axis at
/// `x = i/n`, `slices` time levels at `t = k/slices`), interpolated
/// multilinearly in space and linearly in time.
#[derive(Clone, Debug)]
pub struct SampledField {
    dim: usize,
    n: usize,
    slices: usize,
    /// `[slice][node][component]`
    values: Vec<f64>,
    /// `[slice][node]`, central differences with periodic wraparound.
    div: Vec<f64>,
    bounds: Vec<f64>,
    sup: f64,
    name: String,
}

impl SampledField {
    pub fn new(dim: usize, n: usize, slices: usize, values: Vec<f64>) -> Result<Self> {
        check_dim(dim, "sampled field")?;
        if n < 2 || slices == 0 {
            return Err(Error::param(
                "resolution",
                "need at least 2 nodes and 1 slice",
            ));
        }
        let nodes = n.pow(dim as u32);
        if values.len() != nodes * slices * dim {
            return Err(Error::param(
                "values",
                format!(
                    "expected {} numbers, found {}",
                    nodes * slices * dim,
                    values.len()
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("values", "non-finite sample"));
        }
        let mut div = vec![0.0; nodes * slices];
        let strides: Vec<usize> = (0..dim).map(|a| n.pow((dim - 1 - a) as u32)).collect();
        let h = 1.0 / n as f64;
        for s in 0..slices {
            for node in 0..nodes {
                let mut d = 0.0;
                for a in 0..dim {
                    let i = (node / strides[a]) % n;
                    let up = node - i * strides[a] + ((i + 1) % n) * strides[a];
                    let dn = node - i * strides[a] + ((i + n - 1) % n) * strides[a];
                    let base = s * nodes * dim;
                    d += (values[base + up * dim + a] - values[base + dn * dim + a]) / (2.0 * h);
                }
                div[s * nodes + node] = d;
            }
        }
        let mut bounds = vec![0.0f64; dim];
        let mut sup = 0.0f64;
        for chunk in values.chunks(dim) {
            let mut n2 = 0.0;
            for (k, v) in chunk.iter().enumerate() {
                bounds[k] = bounds[k].max(v.abs());
                n2 += v * v;
            }
            sup = sup.max(n2.sqrt());
        }
        Ok(SampledField {
            dim,
            n,
            slices,
            values,
            div,
            bounds,
            sup,
            name: "sampled".into(),
        })
    }

    /// Reads the text format: a header line
    /// `# sampled-field dim=D resolution=N period=P [slices=S]` followed by
    /// whitespace-separated numbers ordered `[slice][node][component]` with
    /// nodes row-major. A period other than one is absorbed by rescaling
    /// space and time together.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| {
            Error::Config(format!("{}: empty sampled-field file", path.display()))
        })?;
        let mut dim = None;
        let mut res = None;
        let mut period = 1.0;
        let mut slices = 1;
        for tok in header.split_whitespace().filter(|t| t.contains('=')) {
            let (k, v) = tok.split_once('=').unwrap();
            let bad = || Error::Config(format!("{}: bad header value `{tok}`", path.display()));
            match k {
                "dim" => dim = Some(v.parse::<usize>().map_err(|_| bad())?),
                "resolution" => res = Some(v.parse::<usize>().map_err(|_| bad())?),
                "period" => period = v.parse::<f64>().map_err(|_| bad())?,
                "slices" => slices = v.parse::<usize>().map_err(|_| bad())?,
                _ => {
                    return Err(Error::Config(format!(
                        "{}: unknown header key `{k}`",
                        path.display()
                    )))
                }
            }
        }
        let dim = dim
            .ok_or_else(|| Error::Config(format!("{}: header is missing `dim`", path.display())))?;
        let res = res.ok_or_else(|| {
            Error::Config(format!(
                "{}: header is missing `resolution`",
                path.display()
            ))
        })?;
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Config(format!(
                "{}: period must be positive",
                path.display()
            )));
        }
        let mut values = Vec::new();
        for (ln, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: not a number: `{tok}`",
                        path.display(),
                        ln + 2
                    ))
                })?);
            }
        }
        let mut f = SampledField::new(dim, res, slices, values)?;
        f.name = format!("sampled({})", path.display());
        Ok(f)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "# sampled-field dim={} resolution={} period=1 slices={}",
            self.dim, self.n, self.slices
        )?;
        for chunk in self.values.chunks(self.dim) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Samples an arbitrary field at the node positions.
    pub fn from_field(field: &dyn VelocityField, n: usize, slices: usize) -> Result<Self> {
        let dim = field.dim();
        let axes: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..n).map(|i| i as f64 / n as f64).collect())
            .collect();
        let nodes = n.pow(dim as u32);
        let mut values = vec![0.0; nodes * slices * dim];
        let mut v = vec![0.0; dim];
        let mut x = vec![0.0; dim];
        for s in 0..slices {
            let t = s as f64 / slices as f64;
            for_each_cell(&axes, |c, idx| {
                for (k, &i) in idx.iter().enumerate() {
                    x[k] = axes[k][i];
                }
                field.eval(&x, t, &mut v);
                let base = (s * nodes + c) * dim;
                values[base..base + dim].copy_from_slice(&v);
            });
        }
        SampledField::new(dim, n, slices, values)
    }

    /// Multilinear interpolation weights: `(node, weight)` pairs.
    fn stencil(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let n = self.n;
        let mut out = vec![(0usize, 1.0f64)];
        for &xa in x.iter().take(self.dim) {
            let s = xa.rem_euclid(1.0) * n as f64;
            let i0 = (s.floor() as usize) % n;
            let w = s - s.floor();
            let i1 = (i0 + 1) % n;
            let mut next = Vec::with_capacity(out.len() * 2);
            for &(node, wt) in &out {
                next.push((node * n + i0, wt * (1.0 - w)));
                next.push((node * n + i1, wt * w));
            }
            out = next;
        }
        out
    }

    fn time_weights(&self, t: f64) -> [(usize, f64); 2] {
        let s = t.rem_euclid(1.0) * self.slices as f64;
        let k0 = (s.floor() as usize) % self.slices;
        let w = s - s.floor();
        [(k0, 1.0 - w), ((k0 + 1) % self.slices, w)]
    }
}

impl VelocityField for SampledField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> String {
        self.name.clone()
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let nodes = self.n.pow(self.dim as u32);
        let st = self.stencil(x);
        for (k, wt) in self.time_weights(t) {
            if wt == 0.0 {
                continue;
            }
            for &(node, w) in &st {
                let base = (k * nodes + node) * self.dim;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += wt * w * self.values[base + c];
                }
            }
        }
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let nodes = self.n.pow(self.dim as u32);
        let st = self.stencil(x);
        let mut d = 0.0;
        for (k, wt) in self.time_weights(t) {
            for &(node, w) in &st {
                d += wt * w * self.div[k * nodes + node];
            }
        }
        d
    }
    fn is_steady(&self) -> bool {
        self.slices == 1
    }
    fn component_bounds(&self) -> Vec<f64> {
        self.bounds.clone()
    }
    fn sup_norm(&self) -> f64 {
        self.sup
    }
}

// ---------------------------------------------------------------------------
// Fields with a slow macroscopic variable
// ---------------------------------------------------------------------------

/// `V(x, y, s)`: periodic in the fast variables `(y, s)`.
pub trait SlowVelocityField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], y: &[f64], s: f64, out: &mut [f64]);
    fn name(&self) -> String;
    fn divergence_free_in_y(&self) -> bool {
        false
    }
    fn steady_in_s(&self) -> bool {
        false
    }
    /// Per-component bounds of the frozen slice at `x`, when known.
    fn component_bounds_at(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// `V(x, y, s) = a(x_axis) · base(y, s)`.
#[derive(Clone, Debug)]
pub struct Modulated {
    pub base: Arc<dyn VelocityField>,
    pub axis: usize,
    pub modulation: Profile,
}

impl SlowVelocityField for Modulated {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn eval(&self, x: &[f64], y: &[f64], s: f64, out: &mut [f64]) {
        self.base.eval(y, s, out);
        let a = self.modulation.value(x[self.axis]);
        out.iter_mut().for_each(|o| *o *= a);
    }
    fn name(&self) -> String {
        format!("modulated({})", self.base.name())
    }
    fn divergence_free_in_y(&self) -> bool {
        self.base.is_divergence_free()
    }
    fn steady_in_s(&self) -> bool {
        self.base.is_steady()
    }
    fn component_bounds_at(&self, x: &[f64]) -> Option<Vec<f64>> {
        let a = self.modulation.value(x[self.axis]).abs();
        Some(
            self.base
                .component_bounds()
                .into_iter()
                .map(|b| a * b)
                .collect(),
        )
    }
}

/// The periodic field `(y, s) ↦ V(x, y, s)` at a frozen macro point.
#[derive(Clone, Debug)]
pub struct FrozenSlice {
    slow: Arc<dyn SlowVelocityField>,
    x: Vec<f64>,
}

impl FrozenSlice {
    pub fn new(slow: Arc<dyn SlowVelocityField>, x: Vec<f64>) -> Self {
        FrozenSlice { slow, x }
    }
}

impl VelocityField for FrozenSlice {
    fn dim(&self) -> usize {
        self.slow.dim()
    }
    fn eval(&self, y: &[f64], s: f64, out: &mut [f64]) {
        self.slow.eval(&self.x, y, s, out)
    }
    fn name(&self) -> String {
        format!("{}@{:?}", self.slow.name(), self.x)
    }
    fn is_divergence_free(&self) -> bool {
        self.slow.divergence_free_in_y()
    }
    fn is_steady(&self) -> bool {
        self.slow.steady_in_s()
    }
    fn component_bounds(&self) -> Vec<f64> {
        self.slow
            .component_bounds_at(&self.x)
            .unwrap_or_else(|| sampled_bounds(self).0)
    }
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Divergence diagnostics of a field over one space-time period.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldDiagnostics {
    pub c_i: f64,
    pub resolution: usize,
    /// Midpoint times of the time quadrature.
    pub times: Vec<f64>,
    /// `‖div_x V(·,t)‖_{L^N(Q_1)}` at `times`.
    pub div_norm: Vec<f64>,
    /// `α(t) = 1/c_I − div_norm(t)`.
    pub alpha: Vec<f64>,
    pub alpha_star: f64,
    #[serde(rename = "mean_V")]
    pub mean_v: Vec<f64>,
    pub x_div_mean: Vec<f64>,
    pub sup_norm: f64,
    pub warnings: Vec<String>,
}

impl FieldDiagnostics {
    /// `α` at time `t` (piecewise constant on the quadrature slices).
    pub fn alpha_at(&self, t: f64) -> f64 {
        let m = self.alpha.len();
        let k = ((t.rem_euclid(1.0) * m as f64).floor() as usize).min(m - 1);
        self.alpha[k]
    }

    /// `∫₀ᵗ α(s) ds`.
    pub fn alpha_integral(&self, t: f64) -> f64 {
        let m = self.alpha.len() as f64;
        let whole = t.floor();
        let mut acc = whole * self.alpha_star;
        let frac = t - whole;
        let full = (frac * m).floor() as usize;
        for k in 0..full {
            acc += self.alpha[k] / m;
        }
        if full < self.alpha.len() {
            acc += self.alpha[full] * (frac - full as f64 / m);
        }
        acc
    }

    /// The small-divergence hypothesis: `α ≥ 0` everywhere and `α* > 0`.
    pub fn hypothesis_holds(&self) -> bool {
        self.alpha_star > 0.0 && self.alpha.iter().all(|&a| a >= -1e-12)
    }

    /// `⟨V⟩ + ⟨x div V⟩`.
    pub fn drift_vector(&self) -> Vec<f64> {
        self.mean_v
            .iter()
            .zip(&self.x_div_mean)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// `∫₀¹ (1 − c_I‖div V(·,t)‖) dt = c_I α*`.
    pub fn laminar_factor(&self) -> f64 {
        self.c_i * self.alpha_star
    }
}

/// `‖div_x V(·,t)‖_{L^N(Q_1)}` by the tensor midpoint rule.
pub fn divergence_norm(field: &dyn VelocityField, t: f64, resolution: usize) -> Result<f64> {
    if resolution < 16 {
        return Err(Error::param("resolution", "must be at least 16"));
    }
    let dim = field.dim();
    let axes: Vec<Vec<f64>> = (0..dim).map(|_| midpoints(resolution)).collect();
    let mut acc = 0.0;
    let mut x = vec![0.0; dim];
    for_each_cell(&axes, |_, idx| {
        for (k, &i) in idx.iter().enumerate() {
            x[k] = axes[k][i];
        }
        acc += field.divergence(&x, t).abs().powi(dim as i32);
    });
    let cells = (resolution as f64).powi(dim as i32);
    Ok((acc / cells).powf(1.0 / dim as f64))
}

/// Computes `α(t)`, `α*`, `⟨V⟩` and `⟨x div V⟩` with the midpoint rule on
/// `Q_1^+ = [-1/2, 1/2)^N × [0, 1)`.
pub fn diagnostics(
    field: &dyn VelocityField,
    resolution: usize,
    c_i: f64,
) -> Result<FieldDiagnostics> {
    if !(c_i.is_finite() && c_i > 0.0) {
        return Err(Error::param("c_i", "must be positive"));
    }
    if resolution < 16 {
        return Err(Error::param("resolution", "must be at least 16"));
    }
    let dim = field.dim();
    let slices = if field.is_steady() { 1 } else { resolution };
    let times: Vec<f64> = (0..slices)
        .map(|k| (k as f64 + 0.5) / slices as f64)
        .collect();
    let axes: Vec<Vec<f64>> = (0..dim).map(|_| midpoints(resolution)).collect();
    let cells = (resolution as f64).powi(dim as i32);
    let w = 1.0 / (cells * slices as f64);

    let mut div_norm = Vec::with_capacity(slices);
    let mut mean_v = vec![0.0; dim];
    let mut x_div_mean = vec![0.0; dim];
    let mut x = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    for &t in &times {
        let mut acc = 0.0;
        for_each_cell(&axes, |_, idx| {
            for (k, &i) in idx.iter().enumerate() {
                x[k] = axes[k][i];
            }
            let d = field.divergence(&x, t);
            acc += d.abs().powi(dim as i32);
            field.eval(&x, t, &mut v);
            for k in 0..dim {
                mean_v[k] += w * v[k];
                x_div_mean[k] += w * x[k] * d;
            }
        });
        div_norm.push((acc / cells).powf(1.0 / dim as f64));
    }
    let alpha: Vec<f64> = div_norm.iter().map(|d| 1.0 / c_i - d).collect();
    let alpha_star = alpha.iter().sum::<f64>() / slices as f64;
    let mut warnings = Vec::new();
    if alpha_star <= 0.0 {
        warnings.push(format!(
            "alpha_star = {alpha_star} <= 0: homogenization hypothesis violated"
        ));
    } else if alpha.iter().any(|&a| a < 0.0) {
        warnings.push("alpha(t) < 0 at some sampled time".into());
    }
    Ok(FieldDiagnostics {
        c_i,
        resolution,
        times,
        div_norm,
        alpha,
        alpha_star,
        mean_v,
        x_div_mean,
        sup_norm: field.sup_norm(),
        warnings,
    })
}

/// Brute-force sweep of `(|E| ∧ |Q₁∖E|)^{(N−1)/N} / Per(E, Q₁)` over
/// straight cuts and corner balls of the unit cube; returns the largest
/// ratio found, a lower bound for the isoperimetric constant.
pub fn isoperimetric_sweep(dim: usize) -> Result<f64> {
    check_dim(dim, "isoperimetric sweep")?;
    if dim == 1 {
        return Ok(1.0);
    }
    let nf = dim as f64;
    let expo = (nf - 1.0) / nf;
    let mut best = 0.0f64;
    let steps = 2000;
    for k in 1..steps {
        // straight cut: a slab of volume a has relative perimeter one
        let a = k as f64 / steps as f64;
        best = best.max(a.min(1.0 - a).powf(expo));
        // corner ball of radius r ≤ 1: a 2^{-N} fraction of the ball
        let r = a;
        let (vol, per) = if dim == 2 {
            (PI * r * r / 4.0, PI * r / 2.0)
        } else {
            (PI * r.powi(3) / 6.0, PI * r * r / 2.0)
        };
        if vol < 1.0 {
            best = best.max(vol.min(1.0 - vol).powf(expo) / per);
        }
    }
    Ok(best)
}

/// Default isoperimetric constant for dimension `dim`.
pub fn default_c_i(dim: usize) -> f64 {
    match dim {
        1 => 1.0,
        2 => DEFAULT_C_I_2D,
        _ => 0.5f64.powf(2.0 / 3.0),
    }
}
