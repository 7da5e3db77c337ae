//! Time stepping for the slow-fast equation, the coupled climate system, the
//! reduced limit equation and the auxiliary processes, all driven by a shared
//! [`NoisePath`] so that their solutions are pathwise coupled.
//!
//! The slow variable is advanced by explicit Euler with coefficients frozen
//! on each substep; the driving term `sigma(X) Y dt` uses the exact substep
//! integral of `Y`. The reduced equation uses Euler-Maruyama. Values are
//! recorded on the output grid `t_k = k Delta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::models::{lower_climate, AbstractModel, ClimateModel};
use crate::noise::{check_epsilon, std_normal, Increments, NoisePath, SubstepRule};
use crate::reduction::ReducedModel;
use crate::spectral::{norm, LinearMap};

/// Horizon, initial condition, scale parameter and grids of one simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub t_end: f64,
    pub x0: Vec<f64>,
    pub epsilon: f64,
    pub substep: SubstepRule,
    /// Output grid spacing; defaults to `eps^{4/3}`.
    pub delta: Option<f64>,
    /// Explosion radius; defaults to `10 (1 + |x0|)`.
    pub radius: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(t_end: f64, x0: Vec<f64>, epsilon: f64) -> Self {
        ExperimentConfig {
            t_end,
            x0,
            epsilon,
            substep: SubstepRule::default(),
            delta: None,
            radius: None,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        ExperimentConfig {
            epsilon,
            ..self.clone()
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius.unwrap_or(10.0 * (1.0 + norm(&self.x0)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidParam {
                name: "T",
                reason: format!("horizon must be positive, got {}", self.t_end),
            });
        }
        check_epsilon(self.epsilon)?;
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam {
                name: "x0",
                reason: "must be finite".into(),
            });
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(Error::InvalidParam {
                    name: "delta",
                    reason: format!("must be positive, got {d}"),
                });
            }
        }
        if self.radius() <= norm(&self.x0) {
            return Err(Error::InvalidParam {
                name: "radius",
                reason: format!("must exceed |x0| = {}", norm(&self.x0)),
            });
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<GridPlan> {
        self.validate()?;
        GridPlan::new(self.t_end, self.epsilon, self.substep, self.delta)
    }
}

/// Output grid of `macro_steps` intervals of length `delta`, each split into
/// `substeps` noise steps of length `h <= c eps^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPlan {
    pub macro_steps: usize,
    pub substeps: usize,
    pub delta: f64,
    pub h: f64,
}

impl GridPlan {
    pub fn new(t_end: f64, epsilon: f64, rule: SubstepRule, delta: Option<f64>) -> Result<Self> {
        let target = delta.unwrap_or_else(|| default_delta(epsilon)).min(t_end);
        let macro_steps = ((t_end / target) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let delta = t_end / macro_steps as f64;
        let substeps = rule.steps_for(epsilon, delta);
        Ok(GridPlan {
            macro_steps,
            substeps,
            delta,
            h: delta / substeps as f64,
        })
    }

    pub fn total_substeps(&self) -> usize {
        self.macro_steps * self.substeps
    }
}

/// Output spacing `Delta = eps^{4/3}`, which solves `Delta^{3/2} = eps^2` and
/// keeps `Delta / eps -> 0` and `eps^2 / Delta -> 0`.
pub fn default_delta(epsilon: f64) -> f64 {
    epsilon.powf(4.0 / 3.0)
}

/// Sampled slow path. Values stop at the first exit from the ball of radius
/// `R`; `stopped` then carries the exit time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathD {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub stopped: Option<f64>,
}

impl PathD {
    pub fn is_stopped(&self) -> bool {
        self.stopped.is_some()
    }

    pub fn final_value(&self) -> Option<&[f64]> {
        if self.is_stopped() {
            None
        } else {
            self.values.last().map(Vec::as_slice)
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| norm(v)).fold(0.0, f64::max)
    }

    /// `max_k |a(t_k) - b(t_k)|` over a shared output grid, `None` if either
    /// path stopped.
    pub fn sup_distance(&self, other: &PathD) -> Option<f64> {
        if self.is_stopped() || other.is_stopped() || self.values.len() != other.values.len() {
            return None;
        }
        Some(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
        )
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.values.first().map_or(0, Vec::len);
        let cols: Vec<String> = (1..=d).map(|i| format!("X{i}")).collect();
        writeln!(out, "t,{},stopped", cols.join(","))?;
        for (t, v) in self.times.iter().zip(&self.values) {
            let vals: Vec<String> = v.iter().map(f64::to_string).collect();
            writeln!(out, "{t},{},0", vals.join(","))?;
        }
        if let Some(ts) = self.stopped {
            writeln!(out, "{ts},{},1", vec![""; d].join(","))?;
        }
        Ok(())
    }
}

struct Recorder {
    stride: usize,
    h: f64,
    radius: f64,
    path: PathD,
}

impl Recorder {
    fn new(steps: usize, macro_steps: usize, h: f64, radius: f64, x0: &[f64]) -> Result<Self> {
        if macro_steps == 0 || !steps.is_multiple_of(macro_steps) {
            return Err(Error::Grid(format!(
                "{steps} noise steps do not divide into {macro_steps} output intervals"
            )));
        }
        Ok(Recorder {
            stride: steps / macro_steps,
            h,
            radius,
            path: PathD {
                times: vec![0.0],
                values: vec![x0.to_vec()],
                stopped: None,
            },
        })
    }

    /// Returns false once the state has left the ball.
    fn after_step(&mut self, n: usize, x: &[f64]) -> bool {
        let t = (n + 1) as f64 * self.h;
        if !(norm(x) < self.radius) {
            self.path.stopped = Some(t);
            return false;
        }
        if (n + 1).is_multiple_of(self.stride) {
            self.path.times.push(t);
            self.path.values.push(x.to_vec());
        }
        true
    }
}

fn check_noise(cfg: &ExperimentConfig, d: usize, m: usize, noise: &NoisePath) -> Result<GridPlan> {
    let plan = cfg.plan()?;
    if cfg.x0.len() != d {
        return Err(shape_err("x0", d, cfg.x0.len()));
    }
    if noise.m() != m {
        return Err(shape_err("noise coordinates", m, noise.m()));
    }
    if (noise.epsilon() - cfg.epsilon).abs() > 1e-15 {
        return Err(Error::Grid(format!(
            "noise path generated for eps = {}, config has eps = {}",
            noise.epsilon(),
            cfg.epsilon
        )));
    }
    if noise.h() > cfg.substep.max_step(cfg.epsilon) * (1.0 + 1e-9) {
        return Err(Error::Grid(format!(
            "substep {} exceeds c eps^2 = {}",
            noise.h(),
            cfg.substep.max_step(cfg.epsilon)
        )));
    }
    if (noise.horizon() - cfg.t_end).abs() > 1e-9 * cfg.t_end {
        return Err(Error::Grid(format!("noise horizon {} differs from T = {}", noise.horizon(), cfg.t_end)));
    }
    Ok(plan)
}

/// Explicit Euler for `dX = F dt + sigma(X) Y dt + eps beta(Y, Y) dt`:
///
/// `X_{n+1} = X_n + h F(t_n, X_n) + sigma(t_n, X_n) IY_n + h eps beta(Y_n, Y_n)`
/// with `IY_n` the exact substep integral of `Y`.
pub fn simulate_fast_slow(model: &AbstractModel, cfg: &ExperimentConfig, noise: &NoisePath) -> Result<PathD> {
    let (d, m) = (model.d(), model.m());
    let plan = check_noise(cfg, d, m, noise)?;
    let h = noise.h();
    let eps = noise.epsilon();
    let beta = model.beta();
    let quadratic = !beta.is_zero();
    let mut rec = Recorder::new(noise.steps(), plan.macro_steps, h, cfg.radius(), &cfg.x0)?;
    let mut x = cfg.x0.clone();
    let mut f = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut sigma = LinearMap::zeros(d, m);
    for n in 0..noise.steps() {
        let t = n as f64 * h;
        model.drift().eval(t, &x, &mut f);
        model.diffusion().eval(t, &x, &mut sigma);
        sigma.apply_unchecked(noise.iy(n), &mut tmp);
        for i in 0..d {
            x[i] += h * f[i] + tmp[i];
        }
        if quadratic {
            let y = noise.y(n);
            beta.apply_unchecked(y, y, &mut tmp);
            for i in 0..d {
                x[i] += h * eps * tmp[i];
            }
        }
        if !rec.after_step(n, &x) {
            break;
        }
    }
    Ok(rec.path)
}

/// Summary of the fast climate variable along a coupled run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastSummary {
    pub y_final: Vec<f64>,
    pub sup_norm: f64,
    /// Time average of `|Y|^2` over the simulated interval.
    pub mean_square: f64,
}

/// Coupled climate system. The fast variable is advanced by exponential
/// Euler on its mild form, `Y = Y_ou + V` with `Y_ou` the pure OU path of
/// `noise` and
///
/// `V_{n+1} = e^{-h/eps^2} V_n + (1 - e^{-h/eps^2}) (A21 X_n + B211(X_n, X_n))`.
///
/// The slow variable takes one Euler step per substep using the exact
/// substep integral of `Y` for frozen `X_n`.
pub fn simulate_coupled_climate(
    cm: &ClimateModel,
    cfg: &ExperimentConfig,
    noise: &NoisePath,
) -> Result<(PathD, FastSummary)> {
    let v = crate::models::validate_climate(cm);
    if !v.structure_pass() {
        return Err(Error::Assumption {
            condition: "skew-symmetry (C1)-(C3)",
            max_residual: v.c1.max(v.c2).max(v.c3),
            residuals: vec![v.c1, v.c2, v.c3],
        });
    }
    let (d, m) = (cm.d(), cm.m());
    let plan = check_noise(cfg, d, m, noise)?;
    let h = noise.h();
    let eps = noise.epsilon();
    let eps2 = eps * eps;
    let decay = (-h / eps2).exp();
    let one_minus = -(-h / eps2).exp_m1();
    // int_0^h of the relaxation toward the slaved value
    let w_prev = eps2 * one_minus;
    let w_slaved = h - eps2 * one_minus;
    let quadratic = !cm.b122.is_zero();

    let mut rec = Recorder::new(noise.steps(), plan.macro_steps, h, cfg.radius(), &cfg.x0)?;
    let mut x = cfg.x0.clone();
    let mut v_dev = vec![0.0; m];
    let mut g = vec![0.0; m];
    let mut iy = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut f = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut sup = norm(noise.y(0));
    let mut energy = 0.0;
    for n in 0..noise.steps() {
        let t = n as f64 * h;
        let y_ou = noise.y(n);
        for k in 0..m {
            y[k] = y_ou[k] + v_dev[k];
        }
        cm.slaved(&x, &mut g);
        for k in 0..m {
            iy[k] = noise.iy(n)[k] + w_prev * v_dev[k] + w_slaved * g[k];
        }

        cm.a11.apply_unchecked(&x, &mut f);
        cm.f1.add_into(t, &mut f);
        cm.b111.apply_unchecked(&x, &x, &mut tmp);
        for i in 0..d {
            dx[i] = h * (f[i] + tmp[i]);
        }
        cm.a12.apply_unchecked(&iy, &mut tmp);
        for i in 0..d {
            dx[i] += tmp[i];
        }
        cm.b112.apply_unchecked(&x, &iy, &mut tmp);
        for i in 0..d {
            dx[i] += tmp[i];
        }
        if quadratic {
            cm.b122.apply_unchecked(&y, &y, &mut tmp);
            for i in 0..d {
                dx[i] += h * eps * tmp[i];
            }
        }
        for i in 0..d {
            x[i] += dx[i];
        }

        for k in 0..m {
            v_dev[k] = decay * v_dev[k] + one_minus * g[k];
        }
        let y_next: Vec<f64> = noise.y(n + 1).iter().zip(&v_dev).map(|(a, b)| a + b).collect();
        let ny = norm(&y_next);
        sup = sup.max(ny);
        energy += 0.5 * h * (norm(&y).powi(2) + ny * ny);
        y.copy_from_slice(&y_next);
        if !rec.after_step(n, &x) {
            break;
        }
    }
    let elapsed = rec.path.stopped.unwrap_or(noise.horizon());
    Ok((
        rec.path,
        FastSummary {
            y_final: y,
            sup_norm: sup,
            mean_square: energy / elapsed,
        },
    ))
}

/// Intermediate process: the lowered climate model (fast variable replaced by
/// its slaved value plus the OU path) run by [`simulate_fast_slow`].
pub fn simulate_tilde(
    cm: &std::sync::Arc<ClimateModel>,
    cfg: &ExperimentConfig,
    noise: &NoisePath,
) -> Result<PathD> {
    let model = lower_climate(cm.clone())?;
    simulate_fast_slow(&model, cfg, noise)
}

/// Euler-Maruyama for the reduced equation:
///
/// `X_{n+1} = X_n + h (F + C)(t_n, X_n) + sigma(t_n, X_n) dW_n + G xi_n sqrt(h)`
///
/// with `xi_n` standard normal draws from `extra_rng`, independent of `dW`.
pub fn simulate_reduced<R: Rng + ?Sized>(
    rm: &ReducedModel,
    cfg: &ExperimentConfig,
    increments: &Increments,
    extra_rng: &mut R,
) -> Result<PathD> {
    let (d, m) = (rm.d(), rm.m());
    let plan = cfg.plan()?;
    if cfg.x0.len() != d {
        return Err(shape_err("x0", d, cfg.x0.len()));
    }
    if increments.m() != m {
        return Err(shape_err("increments", m, increments.m()));
    }
    let h = increments.h();
    if ((h * increments.steps() as f64) - cfg.t_end).abs() > 1e-9 * cfg.t_end {
        return Err(Error::Grid(format!(
            "increments cover {} but T = {}",
            h * increments.steps() as f64,
            cfg.t_end
        )));
    }
    let mut rec = Recorder::new(increments.steps(), plan.macro_steps, h, cfg.radius(), &cfg.x0)?;
    let g = rm.extra_chol();
    let extra = rm.has_extra_noise();
    let sqrt_h = h.sqrt();
    let mut x = cfg.x0.clone();
    let mut f = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut sigma = LinearMap::zeros(d, m);
    for n in 0..increments.steps() {
        let t = n as f64 * h;
        rm.drift_into(t, &x, &mut f, &mut sigma);
        rm.model().diffusion().eval(t, &x, &mut sigma);
        sigma.apply_unchecked(increments.step(n), &mut tmp);
        for i in 0..d {
            x[i] += h * f[i] + tmp[i];
        }
        if extra {
            for v in xi.iter_mut() {
                *v = std_normal(extra_rng);
            }
            g.apply_unchecked(&xi, &mut tmp);
            for i in 0..d {
                x[i] += sqrt_h * tmp[i];
            }
        }
        if !rec.after_step(n, &x) {
            break;
        }
    }
    Ok(rec.path)
}

/// Auxiliary process with the reduced drift and diffusion but the quadratic
/// term kept pathwise: Euler-Maruyama on the substep grid with the extra
/// increment `h eps beta(Y_n, Y_n)` in place of the independent noise.
pub fn simulate_hat(rm: &ReducedModel, cfg: &ExperimentConfig, noise: &NoisePath) -> Result<PathD> {
    let (d, m) = (rm.d(), rm.m());
    let plan = check_noise(cfg, d, m, noise)?;
    let h = noise.h();
    let eps = noise.epsilon();
    let beta = rm.model().beta();
    let quadratic = !beta.is_zero();
    let mut rec = Recorder::new(noise.steps(), plan.macro_steps, h, cfg.radius(), &cfg.x0)?;
    let mut x = cfg.x0.clone();
    let mut f = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut sigma = LinearMap::zeros(d, m);
    for n in 0..noise.steps() {
        let t = n as f64 * h;
        rm.drift_into(t, &x, &mut f, &mut sigma);
        rm.model().diffusion().eval(t, &x, &mut sigma);
        sigma.apply_unchecked(noise.dw(n), &mut tmp);
        for i in 0..d {
            x[i] += h * f[i] + tmp[i];
        }
        if quadratic {
            let y = noise.y(n);
            beta.apply_unchecked(y, y, &mut tmp);
            for i in 0..d {
                x[i] += h * eps * tmp[i];
            }
        }
        if !rec.after_step(n, &x) {
            break;
        }
    }
    Ok(rec.path)
}

/// Noise path on the substep grid of `plan` for `cfg.epsilon`.
pub fn noise_for<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    q: &[f64],
    rng: &mut R,
) -> Result<(GridPlan, NoisePath)> {
    let plan = cfg.plan()?;
    let params = crate::noise::OuParams::from_spectrum(cfg.epsilon, q.to_vec())?;
    let path = crate::noise::build_path_steps(&params, plan.h, plan.total_substeps(), rng)?;
    Ok((plan, path))
}
