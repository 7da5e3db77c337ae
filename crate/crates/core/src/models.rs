//! Coefficient sets of the slow-fast system.
//!
//! An [`AbstractModel`] carries the drift `F(t, x)`, the diffusion
//! `sigma(t, x): H_M -> H_d` (with an optional analytic space derivative)
//! and the symmetric quadratic coupling `beta: H_M x H_M -> H_d` of
//!
//! ```text
//! dX = F(t, X) dt + sigma(t, X) Y dt + eps beta(Y, Y) dt
//! ```
//!
//! A [`ClimateModel`] is the operator/tensor family of the coupled resolved /
//! unresolved climate system. [`lower_climate`] maps it onto the abstract
//! form once the skew-symmetry conditions hold.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::spectral::{dot, norm, Bilinear, LinearMap, SpaceSpec};

/// Number of random probes used by the structural validators.
pub const VALIDATION_PROBES: usize = 200;
/// Relative tolerance of the probe-based skew-symmetry checks.
pub const STRUCTURE_TOL: f64 = 1e-10;
/// Relative tolerance of the zero-mean condition.
pub const ZERO_MEAN_TOL: f64 = 1e-12;
const PROBE_SEED: u64 = 0x5eed_c0ef;

/// Time-dependent deterministic drift `F(t, x)`.
pub trait Drift: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// Diffusion coefficient `sigma(t, x)` as a `d x M` matrix.
pub trait Diffusion: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], out: &mut LinearMap);

    /// Analytic space derivative `D_j sigma^{i,m}` stored as `[i][j][m]`.
    fn derivative(&self, _t: f64, _x: &[f64]) -> Option<Bilinear> {
        None
    }

    /// True when `sigma` does not depend on `x`.
    fn is_constant(&self) -> bool {
        false
    }
}

/// Deterministic external forcing `t -> F^1_t`.
#[derive(Clone)]
pub enum Forcing {
    Constant(Vec<f64>),
    /// Piecewise-linear interpolation, constant outside the table.
    Table { times: Vec<f64>, values: Vec<Vec<f64>> },
    Func(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for Forcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Forcing::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Forcing::Table { times, values } => f
                .debug_struct("Table")
                .field("times", times)
                .field("values", values)
                .finish(),
            Forcing::Func(_) => f.write_str("Func(..)"),
        }
    }
}

impl Forcing {
    pub fn zero(d: usize) -> Self {
        Forcing::Constant(vec![0.0; d])
    }

    pub fn table(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(shape_err("forcing table", "matching nonempty times/values", format!("{}/{}", times.len(), values.len())));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParam {
                name: "forcing.times",
                reason: "must be strictly increasing".into(),
            });
        }
        let d = values[0].len();
        if values.iter().any(|v| v.len() != d) {
            return Err(shape_err("forcing table values", d, "ragged rows"));
        }
        Ok(Forcing::Table { times, values })
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Forcing::Constant(v) => Some(v.len()),
            Forcing::Table { values, .. } => values.first().map(Vec::len),
            Forcing::Func(_) => None,
        }
    }

    pub fn add_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Forcing::Constant(v) => {
                for (o, c) in out.iter_mut().zip(v) {
                    *o += c;
                }
            }
            Forcing::Table { times, values } => {
                let k = times.partition_point(|s| *s <= t);
                if k == 0 {
                    add(out, &values[0], 1.0);
                } else if k == times.len() {
                    add(out, &values[k - 1], 1.0);
                } else {
                    let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
                    add(out, &values[k - 1], 1.0 - w);
                    add(out, &values[k], w);
                }
            }
            Forcing::Func(f) => add(out, &f(t), 1.0),
        }
    }

    pub fn eval(&self, t: f64, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        self.add_into(t, &mut out);
        out
    }
}

#[inline]
fn add(out: &mut [f64], v: &[f64], w: f64) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += w * x;
    }
}

/// `F(t, x) = f(t) + L x + B(x, x)`.
#[derive(Clone, Debug)]
pub struct PolynomialDrift {
    pub forcing: Forcing,
    pub linear: Option<LinearMap>,
    pub quadratic: Option<Bilinear>,
}

impl Drift for PolynomialDrift {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.forcing.add_into(t, out);
        let mut tmp = vec![0.0; out.len()];
        if let Some(l) = &self.linear {
            l.apply_unchecked(x, &mut tmp);
            add(out, &tmp, 1.0);
        }
        if let Some(b) = &self.quadratic {
            b.apply_unchecked(x, x, &mut tmp);
            add(out, &tmp, 1.0);
        }
    }
}

/// `sigma(x) = S_0 + S_1(x, .)` with `S_1[i][j][m]`.
#[derive(Clone, Debug)]
pub struct AffineDiffusion {
    pub constant: LinearMap,
    pub linear: Option<Bilinear>,
}

impl Diffusion for AffineDiffusion {
    fn eval(&self, _t: f64, x: &[f64], out: &mut LinearMap) {
        out.data_mut().copy_from_slice(self.constant.data());
        if let Some(b) = &self.linear {
            b.add_partial_left(x, out);
        }
    }

    fn derivative(&self, _t: f64, _x: &[f64]) -> Option<Bilinear> {
        Some(
            self.linear
                .clone()
                .unwrap_or_else(|| Bilinear::zeros(self.constant.rows(), self.constant.rows(), self.constant.cols())),
        )
    }

    fn is_constant(&self) -> bool {
        self.linear.as_ref().is_none_or(Bilinear::is_zero)
    }
}

type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type SigmaFn = dyn Fn(f64, &[f64], &mut LinearMap) + Send + Sync;
type DSigmaFn = dyn Fn(f64, &[f64]) -> Bilinear + Send + Sync;

/// Drift given by a closure.
pub struct FnDrift(pub Arc<DriftFn>);

impl Drift for FnDrift {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.0)(t, x, out)
    }
}

/// Diffusion given by closures, with an optional analytic derivative.
pub struct FnDiffusion {
    pub sigma: Arc<SigmaFn>,
    pub derivative: Option<Arc<DSigmaFn>>,
}

impl Diffusion for FnDiffusion {
    fn eval(&self, t: f64, x: &[f64], out: &mut LinearMap) {
        (self.sigma)(t, x, out)
    }

    fn derivative(&self, t: f64, x: &[f64]) -> Option<Bilinear> {
        self.derivative.as_ref().map(|f| f(t, x))
    }
}

/// Coefficients `(F, sigma, beta)` of the abstract slow-fast equation.
#[derive(Clone)]
pub struct AbstractModel {
    space: SpaceSpec,
    drift: Arc<dyn Drift>,
    sigma: Arc<dyn Diffusion>,
    beta: Bilinear,
}

impl fmt::Debug for AbstractModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AbstractModel")
            .field("space", &self.space)
            .field("beta", &self.beta)
            .finish_non_exhaustive()
    }
}

impl AbstractModel {
    /// `beta` is symmetrized in its two arguments.
    pub fn new(
        space: SpaceSpec,
        drift: Arc<dyn Drift>,
        sigma: Arc<dyn Diffusion>,
        beta: Bilinear,
    ) -> Result<Self> {
        let (d, m) = (space.d(), space.m());
        if beta.shape() != (d, m, m) {
            return Err(shape_err("beta", format!("({d}, {m}, {m})"), format!("{:?}", beta.shape())));
        }
        let beta = beta.symmetrize_in_last_two()?;
        Ok(AbstractModel {
            space,
            drift,
            sigma,
            beta,
        })
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn d(&self) -> usize {
        self.space.d()
    }

    pub fn m(&self) -> usize {
        self.space.m()
    }

    pub fn beta(&self) -> &Bilinear {
        &self.beta
    }

    pub fn drift(&self) -> &dyn Drift {
        self.drift.as_ref()
    }

    pub fn diffusion(&self) -> &dyn Diffusion {
        self.sigma.as_ref()
    }

    pub fn has_constant_sigma(&self) -> bool {
        self.sigma.is_constant()
    }

    pub fn eval_drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        self.drift.eval(t, x, &mut out);
        out
    }

    pub fn eval_sigma(&self, t: f64, x: &[f64]) -> LinearMap {
        let mut out = LinearMap::zeros(self.d(), self.m());
        self.sigma.eval(t, x, &mut out);
        out
    }

    /// `D_j sigma^{i,m}(t, x)` as `[i][j][m]`: analytic when supplied,
    /// otherwise central differences with step `1e-5 (1 + |x|)`.
    pub fn dsigma(&self, t: f64, x: &[f64]) -> Bilinear {
        self.sigma
            .derivative(t, x)
            .unwrap_or_else(|| self.dsigma_finite_difference(t, x))
    }

    pub fn dsigma_finite_difference(&self, t: f64, x: &[f64]) -> Bilinear {
        let (d, m) = (self.d(), self.m());
        let step = 1e-5 * (1.0 + norm(x));
        let mut out = Bilinear::zeros(d, d, m);
        let mut xp = x.to_vec();
        let mut plus = LinearMap::zeros(d, m);
        let mut minus = LinearMap::zeros(d, m);
        for j in 0..d {
            xp[j] = x[j] + step;
            self.sigma.eval(t, &xp, &mut plus);
            xp[j] = x[j] - step;
            self.sigma.eval(t, &xp, &mut minus);
            xp[j] = x[j];
            for i in 0..d {
                for k in 0..m {
                    out.set(i, j, k, (plus.get(i, k) - minus.get(i, k)) / (2.0 * step));
                }
            }
        }
        out
    }

    /// Largest relative mismatch between the analytic derivative and
    /// finite differences over random probes, or `None` without an analytic
    /// derivative.
    pub fn check_dsigma(&self, probes: usize, radius: f64) -> Option<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let x: Vec<f64> = (0..self.d()).map(|_| rng.random_range(-radius..radius)).collect();
            let t = rng.random_range(0.0..1.0);
            let analytic = self.sigma.derivative(t, &x)?;
            let fd = self.dsigma_finite_difference(t, &x);
            let scale = analytic.max_abs().max(fd.max_abs()).max(1e-12);
            let diff = analytic
                .data()
                .iter()
                .zip(fd.data())
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            worst = worst.max(diff / scale);
        }
        Some(worst)
    }
}

/// Result of the zero-mean check `sum_l beta[i][l][l] q_l = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroMeanCheck {
    pub residual: Vec<f64>,
    pub max_abs: f64,
    pub scale: f64,
    pub pass: bool,
}

pub fn validate_zero_mean(beta: &Bilinear, q: &[f64]) -> Result<ZeroMeanCheck> {
    let (d, a, b) = beta.shape();
    if a != q.len() || b != q.len() {
        return Err(shape_err("zero-mean check", format!("({d}, {}, {})", q.len(), q.len()), format!("{:?}", beta.shape())));
    }
    let mut residual = vec![0.0; d];
    let mut scale = 1.0f64;
    for (i, r) in residual.iter_mut().enumerate() {
        let mut abs = 0.0;
        for (l, ql) in q.iter().enumerate() {
            *r += beta.get(i, l, l) * ql;
            abs += (beta.get(i, l, l) * ql).abs();
        }
        scale = scale.max(abs);
    }
    let max_abs = crate::spectral::max_abs(&residual);
    Ok(ZeroMeanCheck {
        pass: max_abs <= ZERO_MEAN_TOL * scale,
        residual,
        max_abs,
        scale,
    })
}

/// Operator/tensor family of the coupled climate system
///
/// ```text
/// dX/dt = F1_t + A11 X + A12 Y + B111(X, X) + B112(X, Y) + eps B122(Y, Y)
/// dY/dt = eps^-2 (A21 X + B211(X, X) - Y) + eps^-2 dW/dt
/// ```
#[derive(Clone, Debug)]
pub struct ClimateModel {
    pub space: SpaceSpec,
    pub f1: Forcing,
    pub a11: LinearMap,
    pub a12: LinearMap,
    pub a21: LinearMap,
    pub b111: Bilinear,
    pub b112: Bilinear,
    pub b122: Bilinear,
    pub b211: Bilinear,
}

impl ClimateModel {
    /// Checks shapes and symmetrizes `B122`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: SpaceSpec,
        f1: Forcing,
        a11: LinearMap,
        a12: LinearMap,
        a21: LinearMap,
        b111: Bilinear,
        b112: Bilinear,
        b122: Bilinear,
        b211: Bilinear,
    ) -> Result<Self> {
        let (d, m) = (space.d(), space.m());
        let lin = |name: &'static str, l: &LinearMap, r: usize, c: usize| {
            if (l.rows(), l.cols()) != (r, c) {
                Err(shape_err(name, format!("{r}x{c}"), format!("{}x{}", l.rows(), l.cols())))
            } else {
                Ok(())
            }
        };
        let bil = |name: &'static str, b: &Bilinear, s: (usize, usize, usize)| {
            if b.shape() != s {
                Err(shape_err(name, format!("{s:?}"), format!("{:?}", b.shape())))
            } else {
                Ok(())
            }
        };
        lin("A11", &a11, d, d)?;
        lin("A12", &a12, d, m)?;
        lin("A21", &a21, m, d)?;
        bil("B111", &b111, (d, d, d))?;
        bil("B112", &b112, (d, d, m))?;
        bil("B122", &b122, (d, m, m))?;
        bil("B211", &b211, (m, d, d))?;
        if let Some(fd) = f1.dim() {
            if fd != d {
                return Err(shape_err("F1", d, fd));
            }
        }
        let b122 = b122.symmetrize_in_last_two()?;
        Ok(ClimateModel {
            space,
            f1,
            a11,
            a12,
            a21,
            b111,
            b112,
            b122,
            b211,
        })
    }

    pub fn d(&self) -> usize {
        self.space.d()
    }

    pub fn m(&self) -> usize {
        self.space.m()
    }

    /// `A21 x + B211(x, x)`, the slaved part of the fast variable.
    pub fn slaved(&self, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; self.m()];
        self.a21.apply_unchecked(x, out);
        self.b211.apply_unchecked(x, x, &mut tmp);
        add(out, &tmp, 1.0);
    }
}

/// Per-condition outcome of [`validate_climate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimateValidation {
    /// `max |A21 - A12^T|` relative to the largest entry.
    pub c1: f64,
    /// `<B111(x', x), x>` relative to its absolute contraction.
    pub c2: f64,
    /// `<B112(x', y), x> + <B211(x', x), y>` relative to its absolute contraction.
    pub c3: f64,
    pub c4: ZeroMeanCheck,
    pub pass: bool,
}

impl ClimateValidation {
    /// Skew-symmetry conditions only (the zero-mean condition is separate).
    pub fn structure_pass(&self) -> bool {
        self.c1 <= STRUCTURE_TOL && self.c2 <= STRUCTURE_TOL && self.c3 <= STRUCTURE_TOL
    }

    pub fn residuals(&self) -> Vec<f64> {
        vec![self.c1, self.c2, self.c3, self.c4.max_abs]
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `sum |T[i][a][b] w_i u_a v_b|`, the rounding scale of `<T(u, v), w>`.
fn abs_contraction(t: &Bilinear, w: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let (o, a, b) = t.shape();
    let mut s = 0.0;
    for i in 0..o {
        for j in 0..a {
            for k in 0..b {
                s += (t.get(i, j, k) * w[i] * u[j] * v[k]).abs();
            }
        }
    }
    s
}

/// Checks the skew-symmetry conditions (C1)-(C3) by exact comparison and
/// random probes, plus the zero-mean condition on `B122`.
pub fn validate_climate(cm: &ClimateModel) -> ClimateValidation {
    let (d, m) = (cm.d(), cm.m());
    let a12t = cm.a12.transpose();
    let a_scale = cm.a12.max_abs().max(cm.a21.max_abs()).max(1e-300);
    let c1 = a12t
        .data()
        .iter()
        .zip(cm.a21.data())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
        / a_scale;

    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let (mut c2, mut c3) = (0.0f64, 0.0f64);
    for _ in 0..VALIDATION_PROBES {
        let x = random_vec(&mut rng, d);
        let xp = random_vec(&mut rng, d);
        let y = random_vec(&mut rng, m);
        let v2 = dot(&cm.b111.apply(&xp, &x).expect("shape checked"), &x);
        let s2 = abs_contraction(&cm.b111, &x, &xp, &x);
        if s2 > 0.0 {
            c2 = c2.max(v2.abs() / s2);
        }
        let lhs = dot(&cm.b112.apply(&xp, &y).expect("shape checked"), &x);
        let rhs = dot(&cm.b211.apply(&xp, &x).expect("shape checked"), &y);
        let s3 = abs_contraction(&cm.b112, &x, &xp, &y) + abs_contraction(&cm.b211, &y, &xp, &x);
        if s3 > 0.0 {
            c3 = c3.max((lhs + rhs).abs() / s3);
        }
    }
    let c4 = validate_zero_mean(&cm.b122, cm.space.q()).expect("shape checked");
    let pass = c1 <= STRUCTURE_TOL && c2 <= STRUCTURE_TOL && c3 <= STRUCTURE_TOL && c4.pass;
    ClimateValidation { c1, c2, c3, c4, pass }
}

/// Relative residuals of the four pointwise energy identities that control
/// the growth of the reduced climate equation:
///
/// 1. `<B111(x, x), x> = 0`
/// 2. `<A12 B211(x, x), x> = <B211(x, x), A21 x>`
/// 3. `<B112(x, A21 x), x> = -<B211(x, x), A21 x>`
/// 4. `<B112(x, B211(x, x)), x> = -|B211(x, x)|^2`
pub fn energy_identity_residuals(cm: &ClimateModel, probes: usize) -> [f64; 4] {
    let d = cm.d();
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED ^ 0xe4e6);
    let mut worst = [0.0f64; 4];
    let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
    for _ in 0..probes {
        let x: Vec<f64> = random_vec(&mut rng, d).iter().map(|v| 2.0 * v).collect();
        let bxx = cm.b211.apply(&x, &x).expect("shape checked");
        let a21x = cm.a21.apply(&x).expect("shape checked");
        let e1 = dot(&cm.b111.apply(&x, &x).expect("shape checked"), &x);
        let e2l = dot(&cm.a12.apply(&bxx).expect("shape checked"), &x);
        let e2r = dot(&bxx, &a21x);
        let e3l = dot(&cm.b112.apply(&x, &a21x).expect("shape checked"), &x);
        let e4l = dot(&cm.b112.apply(&x, &bxx).expect("shape checked"), &x);
        let e4r = -dot(&bxx, &bxx);
        let s1 = abs_contraction(&cm.b111, &x, &x, &x);
        worst[0] = worst[0].max(if s1 > 0.0 { e1.abs() / s1 } else { 0.0 });
        worst[1] = worst[1].max(rel(e2l, e2r));
        worst[2] = worst[2].max(rel(e3l, -e2r));
        worst[3] = worst[3].max(rel(e4l, e4r));
    }
    worst
}

/// Drift of the lowered climate model:
/// `F1_t + A11 x + B111(x, x) + A12 g + B112(x, g)` with `g = A21 x + B211(x, x)`.
pub struct ClimateDrift {
    cm: Arc<ClimateModel>,
}

impl Drift for ClimateDrift {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let cm = &self.cm;
        let (d, m) = (cm.d(), cm.m());
        let mut g = vec![0.0; m];
        let mut tmp = vec![0.0; d];
        cm.slaved(x, &mut g);
        cm.a11.apply_unchecked(x, out);
        cm.f1.add_into(t, out);
        cm.b111.apply_unchecked(x, x, &mut tmp);
        add(out, &tmp, 1.0);
        cm.a12.apply_unchecked(&g, &mut tmp);
        add(out, &tmp, 1.0);
        cm.b112.apply_unchecked(x, &g, &mut tmp);
        add(out, &tmp, 1.0);
    }
}

/// Lowers a validated climate model to the abstract form with
/// `sigma(x) = A12 + B112(x, .)` and `beta = B122`.
pub fn lower_climate(cm: Arc<ClimateModel>) -> Result<AbstractModel> {
    let v = validate_climate(&cm);
    if !v.structure_pass() {
        return Err(Error::Assumption {
            condition: "skew-symmetry (C1)-(C3)",
            max_residual: v.c1.max(v.c2).max(v.c3),
            residuals: vec![v.c1, v.c2, v.c3],
        });
    }
    let sigma = AffineDiffusion {
        constant: cm.a12.clone(),
        linear: Some(cm.b112.clone()),
    };
    let beta = cm.b122.clone();
    let space = cm.space.clone();
    AbstractModel::new(space, Arc::new(ClimateDrift { cm }), Arc::new(sigma), beta)
}

/// A named built-in model.
#[derive(Clone, Debug)]
pub enum Fixture {
    Climate(Arc<ClimateModel>),
    Abstract(AbstractModel),
}

impl Fixture {
    /// Abstract form (lowering climate fixtures).
    pub fn to_abstract(&self) -> Result<AbstractModel> {
        match self {
            Fixture::Climate(cm) => lower_climate(cm.clone()),
            Fixture::Abstract(m) => Ok(m.clone()),
        }
    }

    pub fn space(&self) -> &SpaceSpec {
        match self {
            Fixture::Climate(cm) => &cm.space,
            Fixture::Abstract(m) => m.space(),
        }
    }

    pub fn default_x0(&self) -> Vec<f64> {
        match self {
            Fixture::Climate(_) => vec![1.0, 0.5],
            Fixture::Abstract(m) => vec![0.0; m.d()],
        }
    }
}

pub const FIXTURE_NAMES: [&str; 3] = ["linear_scatter", "quadratic_offdiag", "ou_only"];

pub fn fixture_description(name: &str) -> Option<&'static str> {
    Some(match name {
        "linear_scatter" => "climate d=2 M=3 q=(1,0.5,0.25); B122 = 0 (pathwise limit)",
        "quadratic_offdiag" => "climate d=2 M=3 q=(1,0.5,0.25); B122 with zero diagonal (limit in law)",
        "ou_only" => "abstract d=2 M=3; F = 0, sigma = coordinate projection, beta = 0",
        _ => return None,
    })
}

pub fn builtin_fixture(name: &str) -> Result<Fixture> {
    match name {
        "linear_scatter" => Ok(Fixture::Climate(Arc::new(scatter_climate(None)?))),
        "quadratic_offdiag" => Ok(Fixture::Climate(Arc::new(scatter_climate(Some(offdiag_b122()))?))),
        "ou_only" => {
            let space = SpaceSpec::new(2, vec![1.0, 0.5, 0.25])?;
            let sigma = AffineDiffusion {
                constant: LinearMap::from_fn(2, 3, |i, m| if i == m { 1.0 } else { 0.0 }),
                linear: None,
            };
            let drift = PolynomialDrift {
                forcing: Forcing::zero(2),
                linear: None,
                quadratic: None,
            };
            Ok(Fixture::Abstract(AbstractModel::new(
                space,
                Arc::new(drift),
                Arc::new(sigma),
                Bilinear::zeros(2, 3, 3),
            )?))
        }
        other => Err(Error::UnknownFixture(other.to_string())),
    }
}

fn offdiag_b122() -> Bilinear {
    let mut b = Bilinear::zeros(2, 3, 3);
    for &(i, l, m, v) in &[(0, 0, 1, 0.8), (0, 1, 2, -0.4), (1, 0, 2, 0.7), (1, 1, 2, 0.5)] {
        b.set(i, l, m, v);
        b.set(i, m, l, v);
    }
    b
}

/// d = 2, M = 3 climate model with dissipative `A11`, nonzero linear and
/// bilinear scattering, and `B211` forced by (C3) from `B112`.
fn scatter_climate(b122: Option<Bilinear>) -> Result<ClimateModel> {
    let space = SpaceSpec::new(2, vec![1.0, 0.5, 0.25])?;
    let a11 = LinearMap::from_rows(&[vec![-1.5, 0.5], vec![-0.5, -1.5]])?;
    let a12 = LinearMap::from_rows(&[vec![0.6, 0.3, 0.0], vec![0.0, 0.4, 0.5]])?;
    let a21 = a12.transpose();
    // <B111(x', x), x> = 0: T[0][j][1] = c_j, T[1][j][0] = -c_j
    let c = [0.4, -0.2];
    let b111 = Bilinear::from_fn(2, 2, 2, |i, j, k| match (i, k) {
        (0, 1) => c[j],
        (1, 0) => -c[j],
        _ => 0.0,
    });
    let b112 = Bilinear::from_nested(&[
        vec![vec![0.2, 0.0, 0.1], vec![0.0, 0.15, 0.0]],
        vec![vec![0.0, 0.1, 0.0], vec![0.2, 0.0, 0.1]],
    ])?;
    let b211 = Bilinear::from_fn(3, 2, 2, |m, j, i| -b112.get(i, j, m));
    ClimateModel::new(
        space,
        Forcing::Constant(vec![0.5, -0.25]),
        a11,
        a12,
        a21,
        b111,
        b112,
        b122.unwrap_or_else(|| Bilinear::zeros(2, 3, 3)),
        b211,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_climate(d: usize, m: usize, f1: Vec<f64>) -> ClimateModel {
        ClimateModel::new(
            SpaceSpec::new(d, vec![1.0; m]).unwrap(),
            Forcing::Constant(f1),
            LinearMap::zeros(d, d),
            LinearMap::zeros(d, m),
            LinearMap::zeros(m, d),
            Bilinear::zeros(d, d, d),
            Bilinear::zeros(d, d, m),
            Bilinear::zeros(d, m, m),
            Bilinear::zeros(m, d, d),
        )
        .unwrap()
    }

    fn random_climate(seed: u64) -> ClimateModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (3, 4);
        let mut r = || rng.random_range(-1.0..1.0);
        let a12 = LinearMap::from_fn(d, m, |_, _| r());
        let b112 = Bilinear::from_fn(d, d, m, |_, _, _| r());
        let b211 = Bilinear::from_fn(m, d, d, |mm, j, i| -b112.get(i, j, mm));
        // skew in (i, k) for each j
        let raw = Bilinear::from_fn(d, d, d, |_, _, _| r());
        let b111 = Bilinear::from_fn(d, d, d, |i, j, k| raw.get(i, j, k) - raw.get(k, j, i));
        ClimateModel::new(
            SpaceSpec::new(d, vec![1.0, 0.7, 0.3, 0.1]).unwrap(),
            Forcing::Constant(vec![r(), r(), r()]),
            LinearMap::from_fn(d, d, |_, _| r()),
            a12.clone(),
            a12.transpose(),
            b111,
            b112,
            Bilinear::from_fn(d, m, m, |_, _, _| r()),
            b211,
        )
        .unwrap()
    }

    #[test]
    fn zero_mean_cases() {
        let mut zero_diag = Bilinear::zeros(1, 2, 2);
        zero_diag.set(0, 0, 1, 1.0);
        zero_diag.set(0, 1, 0, 1.0);
        assert!(validate_zero_mean(&zero_diag, &[1.0, 1.0]).unwrap().pass);

        let mut single = Bilinear::zeros(2, 2, 2);
        single.set(0, 0, 0, 1.0);
        let r = validate_zero_mean(&single, &[1.0, 0.0]).unwrap();
        assert!(!r.pass);
        assert_eq!(r.residual, vec![1.0, 0.0]);

        let mut cancel = Bilinear::zeros(1, 2, 2);
        cancel.set(0, 0, 0, 1.0);
        cancel.set(0, 1, 1, -2.0);
        let r = validate_zero_mean(&cancel, &[2.0, 1.0]).unwrap();
        assert_eq!(r.residual, vec![0.0]);
        assert!(r.pass);

        assert!(validate_zero_mean(&cancel, &[1.0]).is_err());
    }

    #[test]
    fn zero_climate_validates() {
        assert!(validate_climate(&zero_climate(2, 3, vec![0.0, 0.0])).pass);
    }

    #[test]
    fn rotation_b111_passes_c2() {
        let mut cm = zero_climate(2, 1, vec![0.0, 0.0]);
        // B(u, v) = (u1 v2, -u1 v1), zero-based indices
        cm.b111 = Bilinear::from_fn(2, 2, 2, |i, j, k| match (i, j, k) {
            (0, 0, 1) => 1.0,
            (1, 0, 0) => -1.0,
            _ => 0.0,
        });
        let v = validate_climate(&cm);
        assert!(v.c2 <= STRUCTURE_TOL, "{v:?}");
        // probe oracle: direct symbolic cancellation u1 x2 x1 - u1 x1 x2
        for (u, x) in [([0.3, -1.2], [0.7, 2.0]), ([1.0, 1.0], [-3.0, 0.5])] {
            let b = cm.b111.apply(&u, &x).unwrap();
            assert_eq!(b, vec![u[0] * x[1], -u[0] * x[0]]);
            assert!(dot(&b, &x).abs() < 1e-15);
        }
        cm.b111.set(0, 0, 0, 1.0);
        assert!(!validate_climate(&cm).pass);
    }

    #[test]
    fn forced_b211_passes_c3_and_broken_fails() {
        let cm = random_climate(3);
        let v = validate_climate(&cm);
        assert!(v.c1 <= STRUCTURE_TOL && v.c2 <= STRUCTURE_TOL && v.c3 <= STRUCTURE_TOL, "{v:?}");
        let mut broken = cm.clone();
        broken.b211.set(0, 0, 0, broken.b211.get(0, 0, 0) + 0.1);
        assert!(validate_climate(&broken).c3 > STRUCTURE_TOL);
        let mut broken = cm;
        broken.a21.set(0, 0, broken.a21.get(0, 0) + 0.1);
        assert!(validate_climate(&broken).c1 > STRUCTURE_TOL);
    }

    #[test]
    fn lowering_of_forcing_only_model() {
        let cm = Arc::new(zero_climate(2, 2, vec![1.5, -0.5]));
        let am = lower_climate(cm).unwrap();
        assert_eq!(am.eval_drift(0.3, &[4.0, -1.0]), vec![1.5, -0.5]);
        assert!(am.eval_sigma(0.0, &[4.0, -1.0]).data().iter().all(|v| *v == 0.0));
        assert!(am.beta().is_zero());
    }

    /// Independent term-by-term evaluation of the lowered drift.
    fn direct_lowered_drift(cm: &ClimateModel, t: f64, x: &[f64]) -> Vec<f64> {
        let (d, m) = (cm.d(), cm.m());
        let f1 = cm.f1.eval(t, d);
        let mut g = vec![0.0; m];
        for k in 0..m {
            for j in 0..d {
                g[k] += cm.a21.get(k, j) * x[j];
                for i in 0..d {
                    g[k] += cm.b211.get(k, j, i) * x[j] * x[i];
                }
            }
        }
        (0..d)
            .map(|i| {
                let mut s = f1[i];
                for j in 0..d {
                    s += cm.a11.get(i, j) * x[j];
                    for k in 0..d {
                        s += cm.b111.get(i, j, k) * x[j] * x[k];
                    }
                    for k in 0..m {
                        s += cm.b112.get(i, j, k) * x[j] * g[k];
                    }
                }
                for k in 0..m {
                    s += cm.a12.get(i, k) * g[k];
                }
                s
            })
            .collect()
    }

    #[test]
    fn lowered_drift_matches_direct_evaluation() {
        let cm = Arc::new(random_climate(9));
        let am = lower_climate(cm.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = random_vec(&mut rng, 3);
            let a = am.eval_drift(0.0, &x);
            let b = direct_lowered_drift(&cm, 0.0, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
        // zero input leaves only the forcing
        assert_eq!(am.eval_drift(0.0, &[0.0; 3]), cm.f1.eval(0.0, 3));
    }

    #[test]
    fn lowered_dsigma_is_analytic_and_matches_fd() {
        let cm = Arc::new(random_climate(4));
        let am = lower_climate(cm.clone()).unwrap();
        assert_eq!(am.dsigma(0.0, &[0.1, 0.2, 0.3]), cm.b112);
        assert!(am.check_dsigma(50, 2.0).unwrap() <= 1e-6);
    }

    #[test]
    fn lowering_refuses_invalid_structure() {
        let mut cm = random_climate(5);
        cm.b111.set(0, 0, 0, 1.0);
        assert!(matches!(lower_climate(Arc::new(cm)), Err(Error::Assumption { .. })));
    }

    #[test]
    fn fixtures_satisfy_their_contracts() {
        let Fixture::Climate(ls) = builtin_fixture("linear_scatter").unwrap() else {
            panic!("climate fixture expected")
        };
        let v = validate_climate(&ls);
        assert!(v.pass && ls.b122.is_zero(), "{v:?}");

        let Fixture::Climate(qo) = builtin_fixture("quadratic_offdiag").unwrap() else {
            panic!("climate fixture expected")
        };
        assert!(validate_climate(&qo).pass);
        assert!(validate_zero_mean(&qo.b122, qo.space.q()).unwrap().pass);
        assert!(!qo.b122.is_zero());

        let ou = builtin_fixture("ou_only").unwrap().to_abstract().unwrap();
        assert!(ou.has_constant_sigma() && ou.beta().is_zero());
        assert_eq!(ou.eval_sigma(0.0, &[0.0, 0.0]).to_rows(), vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);

        assert!(matches!(builtin_fixture("nope"), Err(Error::UnknownFixture(_))));
    }

    #[test]
    fn energy_identities_hold_on_fixtures() {
        for name in ["linear_scatter", "quadratic_offdiag"] {
            let Fixture::Climate(cm) = builtin_fixture(name).unwrap() else { unreachable!() };
            let r = energy_identity_residuals(&cm, VALIDATION_PROBES);
            assert!(r.iter().all(|v| *v <= 1e-10), "{name}: {r:?}");
        }
        let r = energy_identity_residuals(&random_climate(12), VALIDATION_PROBES);
        assert!(r.iter().all(|v| *v <= 1e-10), "{r:?}");
    }

    #[test]
    fn finite_difference_dsigma_for_closure_diffusion() {
        let space = SpaceSpec::new(1, vec![2.0]).unwrap();
        let sigma = FnDiffusion {
            sigma: Arc::new(|_, x: &[f64], out: &mut LinearMap| out.set(0, 0, x[0] * x[0])),
            derivative: Some(Arc::new(|_, x: &[f64]| Bilinear::from_fn(1, 1, 1, |_, _, _| 2.0 * x[0]))),
        };
        let drift = FnDrift(Arc::new(|_, _: &[f64], out: &mut [f64]| out[0] = 0.0));
        let m = AbstractModel::new(space, Arc::new(drift), Arc::new(sigma), Bilinear::zeros(1, 1, 1)).unwrap();
        let fd = m.dsigma_finite_difference(0.0, &[1.5]);
        assert!((fd.get(0, 0, 0) - 3.0).abs() < 1e-6);
        assert!(m.check_dsigma(20, 3.0).unwrap() < 1e-6);
    }

    #[test]
    fn forcing_table_interpolates() {
        let f = Forcing::table(vec![0.0, 1.0], vec![vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(f.eval(-1.0, 1), vec![0.0]);
        assert!((f.eval(0.25, 1)[0] - 0.5).abs() < 1e-15);
        assert_eq!(f.eval(3.0, 1), vec![2.0]);
        assert!(Forcing::table(vec![1.0, 0.0], vec![vec![0.0], vec![2.0]]).is_err());
    }

    #[test]
    fn beta_is_symmetrized() {
        let space = SpaceSpec::new(1, vec![1.0, 1.0]).unwrap();
        let mut beta = Bilinear::zeros(1, 2, 2);
        beta.set(0, 0, 1, 2.0);
        let drift = PolynomialDrift {
            forcing: Forcing::zero(1),
            linear: None,
            quadratic: None,
        };
        let sigma = AffineDiffusion {
            constant: LinearMap::zeros(1, 2),
            linear: None,
        };
        let m = AbstractModel::new(space, Arc::new(drift), Arc::new(sigma), beta).unwrap();
        assert_eq!(m.beta().get(0, 0, 1), 1.0);
        assert_eq!(m.beta().get(0, 1, 0), 1.0);
    }
}
