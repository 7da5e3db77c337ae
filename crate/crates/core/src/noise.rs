//! Exact-in-law generation of the Wiener increments `dW`, the stationary
//! Ornstein-Uhlenbeck process `dY = -eps^-2 Y dt + eps^-2 dW`, and the
//! pathwise integral `int Y ds` on a uniform substep grid.
//!
//! Every step samples the Wiener increment first and then the OU transition
//! conditionally on it: the stochastic convolution over the step is split
//! into its regression on `dW` plus an independent Gaussian residual. The
//! time integral then follows exactly from `eps^2 dY = -Y dt + dW`:
//!
//! ```text
//! int_{t_n}^{t_{n+1}} Y ds = dW_n - eps^2 (Y_{n+1} - Y_n)
//! ```
//!
//! Because `Y` is a function of the increments plus independent residuals,
//! several scale parameters can be driven by the same Wiener path.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpaceSpec;

/// Scale parameter `eps` together with the covariance spectrum of the driving
/// Wiener process.
#[derive(Clone, Debug, PartialEq)]
pub struct OuParams {
    epsilon: f64,
    q: Vec<f64>,
}

impl OuParams {
    pub fn new(epsilon: f64, space: &SpaceSpec) -> Result<Self> {
        Self::from_spectrum(epsilon, space.q().to_vec())
    }

    pub fn from_spectrum(epsilon: f64, q: Vec<f64>) -> Result<Self> {
        check_epsilon(epsilon)?;
        if q.is_empty() || q.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParam {
                name: "q",
                reason: "spectrum must be nonempty, finite and nonnegative".into(),
            });
        }
        Ok(OuParams { epsilon, q })
    }

    /// Like [`OuParams::from_spectrum`] but also admits `eps = 1`, for
    /// formula checks that are stated on the closed interval.
    pub(crate) fn from_spectrum_closed(epsilon: f64, q: Vec<f64>) -> Result<Self> {
        if epsilon == 1.0 {
            Self::from_spectrum(0.5, q).map(|p| OuParams { epsilon, ..p })
        } else {
            Self::from_spectrum(epsilon, q)
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn m(&self) -> usize {
        self.q.len()
    }

    /// Stationary variance `q_m eps^-2 / 2` of coordinate `m`.
    pub fn stationary_variance(&self, m: usize) -> f64 {
        self.q[m] / (2.0 * self.epsilon * self.epsilon)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::from_spectrum(epsilon, self.q.clone())
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParam {
            name: "epsilon",
            reason: format!("must lie in (0, 1), got {epsilon}"),
        });
    }
    Ok(())
}

/// Seeded ChaCha stream. Equal `(seed, stream)` pairs reproduce identical draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Stream id derived from a tuple of labels (purpose, ladder index,
    /// replica, ...). Distinct tuples give distinct streams up to 64-bit
    /// hash collisions.
    pub fn derived(seed: u64, labels: &[u64]) -> Self {
        let stream = labels
            .iter()
            .fold(0x6a09_e667_f3bc_c908u64, |acc, l| splitmix64(acc ^ splitmix64(*l)));
        RngStream { seed, stream }
    }

    pub fn child(&self, label: u64) -> Self {
        RngStream::derived(self.seed, &[self.stream, label])
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws `Y_0` from the stationary law: independent `N(0, q_m eps^-2 / 2)`.
pub fn sample_stationary_initial<R: Rng + ?Sized>(params: &OuParams, rng: &mut R) -> Vec<f64> {
    (0..params.m())
        .map(|m| {
            let z = std_normal(rng);
            if params.q[m] == 0.0 {
                0.0
            } else {
                params.stationary_variance(m).sqrt() * z
            }
        })
        .collect()
}

/// Stationary cross-covariance of coordinate `m` of two OU processes driven by
/// the same Wiener process with scales `e1`, `e2`:
/// `q s1 s2 / (s1 + s2)` with `s = eps^-2`.
pub fn stationary_cross_cov(q: f64, e1: f64, e2: f64) -> f64 {
    let (s1, s2) = (1.0 / (e1 * e1), 1.0 / (e2 * e2));
    q * s1 * s2 / (s1 + s2)
}

/// Jointly stationary initial values for a ladder of scales sharing one
/// Wiener process on `(-inf, 0]`. Returns one vector per scale.
pub fn sample_stationary_initial_joint<R: Rng + ?Sized>(
    q: &[f64],
    epsilons: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    for e in epsilons {
        check_epsilon(*e)?;
    }
    let k = epsilons.len();
    let base = DMatrix::from_fn(k, k, |a, b| stationary_cross_cov(1.0, epsilons[a], epsilons[b]));
    let chol = base
        .cholesky()
        .ok_or_else(|| Error::InvalidParam {
            name: "epsilons",
            reason: "joint stationary covariance is singular (repeated scale?)".into(),
        })?
        .l();
    let mut out = vec![vec![0.0; q.len()]; k];
    for (m, qm) in q.iter().enumerate() {
        let z: Vec<f64> = (0..k).map(|_| std_normal(rng)).collect();
        for a in 0..k {
            let v: f64 = (0..=a).map(|b| chol[(a, b)] * z[b]).sum();
            out[a][m] = qm.sqrt() * v;
        }
    }
    Ok(out)
}

/// Per-step coefficients of the exact joint transition for a fixed `(eps, h)`.
#[derive(Clone, Debug)]
pub struct OuStep {
    epsilon: f64,
    h: f64,
    decay: f64,
    regression: f64,
    resid_unit: f64,
    dw_sd: Vec<f64>,
    resid_sd: Vec<f64>,
}

impl OuStep {
    pub fn new(params: &OuParams, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParam {
                name: "h",
                reason: format!("step must be positive, got {h}"),
            });
        }
        let eps2 = params.epsilon * params.epsilon;
        let a = h / eps2;
        let one_minus_decay = -(-a).exp_m1();
        let var_conv_unit = -(-2.0 * a).exp_m1() / (2.0 * eps2);
        let explained_unit = one_minus_decay * one_minus_decay / h;
        let resid_unit = (var_conv_unit - explained_unit).max(0.0);
        Ok(OuStep {
            epsilon: params.epsilon,
            h,
            decay: (-a).exp(),
            regression: one_minus_decay / h,
            resid_unit,
            dw_sd: params.q.iter().map(|q| (q * h).sqrt()).collect(),
            resid_sd: params.q.iter().map(|q| (q * resid_unit).sqrt()).collect(),
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Regression coefficient of the stochastic convolution on `dW`.
    pub fn regression(&self) -> f64 {
        self.regression
    }

    /// Residual variance per unit `q` (Schur complement of the joint covariance).
    pub fn residual_variance_unit(&self) -> f64 {
        self.resid_unit
    }

    /// OU transition given the Wiener increment of the same step.
    #[inline]
    pub fn advance_given<R: Rng + ?Sized>(
        &self,
        y_prev: &[f64],
        dw: &[f64],
        y_next: &mut [f64],
        rng: &mut R,
    ) {
        for m in 0..y_prev.len() {
            let z = std_normal(rng);
            y_next[m] = self.decay * y_prev[m] + self.regression * dw[m] + self.resid_sd[m] * z;
        }
    }

    /// Joint draw of `(dW, Y_next)` given `Y_prev`.
    #[inline]
    pub fn advance_joint<R: Rng + ?Sized>(
        &self,
        y_prev: &[f64],
        dw: &mut [f64],
        y_next: &mut [f64],
        rng: &mut R,
    ) {
        for m in 0..y_prev.len() {
            dw[m] = self.dw_sd[m] * std_normal(rng);
        }
        self.advance_given(y_prev, dw, y_next, rng);
    }

    /// `int Y ds` over the step from the pathwise identity.
    #[inline]
    pub fn integral(&self, dw: f64, y_prev: f64, y_next: f64) -> f64 {
        dw - self.epsilon * self.epsilon * (y_next - y_prev)
    }
}

/// One exact joint step of `(dW, Y)`.
pub fn step_joint<R: Rng + ?Sized>(
    params: &OuParams,
    y_prev: &[f64],
    h: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if y_prev.len() != params.m() {
        return Err(crate::error::shape_err("step_joint state", params.m(), y_prev.len()));
    }
    let step = OuStep::new(params, h)?;
    let mut dw = vec![0.0; params.m()];
    let mut y = vec![0.0; params.m()];
    step.advance_joint(y_prev, &mut dw, &mut y, rng);
    Ok((dw, y))
}

/// Substep rule `h <= c eps^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstepRule {
    pub c: f64,
}

impl Default for SubstepRule {
    fn default() -> Self {
        SubstepRule { c: 0.1 }
    }
}

impl SubstepRule {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParam {
                name: "substep_c",
                reason: format!("must be positive, got {c}"),
            });
        }
        Ok(SubstepRule { c })
    }

    pub fn max_step(&self, epsilon: f64) -> f64 {
        self.c * epsilon * epsilon
    }

    /// Number of uniform substeps covering `[0, span]` with `h <= c eps^2`.
    pub fn steps_for(&self, epsilon: f64, span: f64) -> usize {
        ((span / self.max_step(epsilon)) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }
}

/// Wiener increments on a uniform grid, step-major (`dw[n * m + k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    h: f64,
    m: usize,
    dw: Vec<f64>,
}

impl Increments {
    pub fn new(h: f64, m: usize, dw: Vec<f64>) -> Result<Self> {
        if !(h > 0.0) || m == 0 || !dw.len().is_multiple_of(m) {
            return Err(Error::Grid(format!(
                "increments need h > 0 and a multiple of {m} values, got h = {h}, {} values",
                dw.len()
            )));
        }
        Ok(Increments { h, m, dw })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn steps(&self) -> usize {
        self.dw.len() / self.m
    }

    pub fn step(&self, n: usize) -> &[f64] {
        &self.dw[n * self.m..(n + 1) * self.m]
    }

    pub fn total(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.m];
        for chunk in self.dw.chunks_exact(self.m) {
            for (a, b) in w.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        w
    }

    /// Sums consecutive blocks of `factor` steps.
    pub fn aggregate(&self, factor: usize) -> Result<Increments> {
        let n = self.steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(Error::Grid(format!("cannot aggregate {n} steps by {factor}")));
        }
        let mut dw = vec![0.0; (n / factor) * self.m];
        for (i, chunk) in self.dw.chunks_exact(self.m).enumerate() {
            let dst = &mut dw[(i / factor) * self.m..(i / factor + 1) * self.m];
            for (a, b) in dst.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        Ok(Increments {
            h: self.h * factor as f64,
            m: self.m,
            dw,
        })
    }

    /// Splits every step into `factor` pieces by exact Brownian-bridge
    /// conditioning on the step's increment.
    pub fn refine<R: Rng + ?Sized>(&self, factor: usize, q: &[f64], rng: &mut R) -> Result<Increments> {
        if factor == 0 || q.len() != self.m {
            return Err(Error::Grid(format!("cannot refine by {factor} with spectrum of length {}", q.len())));
        }
        let h = self.h / factor as f64;
        let mut out = Vec::with_capacity(self.dw.len() * factor);
        let mut piece = vec![0.0; factor];
        let mut block = vec![0.0; factor * self.m];
        for chunk in self.dw.chunks_exact(self.m) {
            for (k, total) in chunk.iter().enumerate() {
                let sd = (q[k] * h).sqrt();
                for p in piece.iter_mut() {
                    *p = sd * std_normal(rng);
                }
                let shift = (piece.iter().sum::<f64>() - total) / factor as f64;
                for (j, p) in piece.iter().enumerate() {
                    block[j * self.m + k] = p - shift;
                }
            }
            out.extend_from_slice(&block);
        }
        Ok(Increments { h, m: self.m, dw: out })
    }
}

/// How a path is carried to another grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridChange {
    Same,
    Coarsen(usize),
    Refine(usize),
}

/// Jointly sampled `(dW, Y, int Y ds)` on a uniform grid `t_n = n h`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    epsilon: f64,
    q: Vec<f64>,
    increments: Increments,
    y: Vec<f64>,
    iy: Vec<f64>,
}

impl NoisePath {
    /// Builds `Y` and `int Y ds` from given increments by conditional
    /// sampling, starting at `y0`.
    pub fn from_increments<R: Rng + ?Sized>(
        params: &OuParams,
        increments: Increments,
        y0: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let m = params.m();
        if increments.m() != m || y0.len() != m {
            return Err(crate::error::shape_err(
                "noise path",
                format!("{m} coordinates"),
                format!("increments {} / y0 {}", increments.m(), y0.len()),
            ));
        }
        let step = OuStep::new(params, increments.h())?;
        let n = increments.steps();
        let mut y = Vec::with_capacity((n + 1) * m);
        y.extend_from_slice(&y0);
        y.resize((n + 1) * m, 0.0);
        let mut iy = vec![0.0; n * m];
        for k in 0..n {
            let (head, tail) = y.split_at_mut((k + 1) * m);
            let prev = &head[k * m..];
            let next = &mut tail[..m];
            step.advance_given(prev, increments.step(k), next, rng);
            for j in 0..m {
                iy[k * m + j] = step.integral(increments.step(k)[j], prev[j], next[j]);
            }
        }
        Ok(NoisePath {
            epsilon: params.epsilon(),
            q: params.q().to_vec(),
            increments,
            y,
            iy,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn params(&self) -> OuParams {
        OuParams {
            epsilon: self.epsilon,
            q: self.q.clone(),
        }
    }

    pub fn m(&self) -> usize {
        self.q.len()
    }

    pub fn h(&self) -> f64 {
        self.increments.h()
    }

    pub fn steps(&self) -> usize {
        self.increments.steps()
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.h()
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps())
    }

    pub fn increments(&self) -> &Increments {
        &self.increments
    }

    pub fn dw(&self, n: usize) -> &[f64] {
        self.increments.step(n)
    }

    /// `Y` at grid time `t_n`, `n = 0..=steps`.
    pub fn y(&self, n: usize) -> &[f64] {
        let m = self.m();
        &self.y[n * m..(n + 1) * m]
    }

    pub fn iy(&self, n: usize) -> &[f64] {
        let m = self.m();
        &self.iy[n * m..(n + 1) * m]
    }

    /// Maximum per-step and telescoped residuals of
    /// `int Y ds = dW - eps^2 dY`, recomputed from the stored arrays.
    pub fn identity_residuals(&self) -> (f64, f64) {
        let eps2 = self.epsilon * self.epsilon;
        let m = self.m();
        let mut per_step = 0.0f64;
        let mut sum_iy = vec![0.0; m];
        let w = self.increments.total();
        for n in 0..self.steps() {
            let (dw, iy, y0, y1) = (self.dw(n), self.iy(n), self.y(n), self.y(n + 1));
            for k in 0..m {
                let r = iy[k] - (dw[k] - eps2 * (y1[k] - y0[k]));
                per_step = per_step.max(r.abs());
                sum_iy[k] += iy[k];
            }
        }
        let (first, last) = (self.y(0), self.y(self.steps()));
        let telescoped = (0..m)
            .map(|k| (sum_iy[k] - (w[k] - eps2 * (last[k] - first[k]))).abs())
            .fold(0.0, f64::max);
        (per_step, telescoped)
    }

    /// Writes `t,m,Y,dW,IY` rows; the final time carries only `Y`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,m,Y,dW,IY")?;
        for n in 0..=self.steps() {
            for k in 0..self.m() {
                if n < self.steps() {
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        self.time(n),
                        k,
                        self.y(n)[k],
                        self.dw(n)[k],
                        self.iy(n)[k]
                    )?;
                } else {
                    writeln!(out, "{},{},{},,", self.time(n), k, self.y(n)[k])?;
                }
            }
        }
        Ok(())
    }
}

/// Generates a path on `[0, t_end]` with `h <= c eps^2` and a stationary start.
pub fn build_path<R: Rng + ?Sized>(
    params: &OuParams,
    t_end: f64,
    rule: SubstepRule,
    rng: &mut R,
) -> Result<NoisePath> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidParam {
            name: "T",
            reason: format!("horizon must be positive, got {t_end}"),
        });
    }
    let n = rule.steps_for(params.epsilon(), t_end);
    build_path_steps(params, t_end / n as f64, n, rng)
}

/// Generates `n` steps of size `h` from a stationary start.
pub fn build_path_steps<R: Rng + ?Sized>(
    params: &OuParams,
    h: f64,
    n: usize,
    rng: &mut R,
) -> Result<NoisePath> {
    let y0 = sample_stationary_initial(params, rng);
    build_path_from(params, h, n, y0, rng)
}

/// Generates `n` steps of size `h` from a given `Y_0`.
pub fn build_path_from<R: Rng + ?Sized>(
    params: &OuParams,
    h: f64,
    n: usize,
    y0: Vec<f64>,
    rng: &mut R,
) -> Result<NoisePath> {
    let m = params.m();
    if y0.len() != m {
        return Err(crate::error::shape_err("initial OU state", m, y0.len()));
    }
    let step = OuStep::new(params, h)?;
    let mut dw = vec![0.0; n * m];
    let mut y = Vec::with_capacity((n + 1) * m);
    y.extend_from_slice(&y0);
    y.resize((n + 1) * m, 0.0);
    let mut iy = vec![0.0; n * m];
    for k in 0..n {
        let (head, tail) = y.split_at_mut((k + 1) * m);
        let prev = &head[k * m..];
        let next = &mut tail[..m];
        let dwk = &mut dw[k * m..(k + 1) * m];
        step.advance_joint(prev, dwk, next, rng);
        for j in 0..m {
            iy[k * m + j] = step.integral(dwk[j], prev[j], next[j]);
        }
    }
    Ok(NoisePath {
        epsilon: params.epsilon(),
        q: params.q().to_vec(),
        increments: Increments { h, m, dw },
        y,
        iy,
    })
}

/// Carries a path to scale `epsilon` on the same, a coarser, or a finer grid.
/// The Wiener increments are preserved (summed or bridged exactly); the new
/// `Y` is re-simulated from them, with its initial value drawn from the joint
/// stationary law conditionally on the source `Y_0`.
pub fn rescale_to_shared_grid<R: Rng + ?Sized>(
    path: &NoisePath,
    epsilon: f64,
    change: GridChange,
    rng: &mut R,
) -> Result<NoisePath> {
    let params = path.params().with_epsilon(epsilon)?;
    let increments = match change {
        GridChange::Same => path.increments.clone(),
        GridChange::Coarsen(k) => path.increments.aggregate(k)?,
        GridChange::Refine(k) => path.increments.refine(k, &path.q, rng)?,
    };
    let y0: Vec<f64> = path
        .y(0)
        .iter()
        .zip(&path.q)
        .map(|(ys, q)| {
            if *q == 0.0 {
                return 0.0;
            }
            let c11 = stationary_cross_cov(*q, path.epsilon, path.epsilon);
            let c12 = stationary_cross_cov(*q, path.epsilon, epsilon);
            let c22 = stationary_cross_cov(*q, epsilon, epsilon);
            let var = (c22 - c12 * c12 / c11).max(0.0);
            c12 / c11 * ys + var.sqrt() * std_normal(rng)
        })
        .collect();
    NoisePath::from_increments(&params, increments, y0, rng)
}
