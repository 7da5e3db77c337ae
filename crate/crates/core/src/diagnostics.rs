//! Monte Carlo experiments and closed-form checks.
//!
//! Every experiment returns a [`StatReport`]: rows of estimates with standard
//! errors and replica counts, and a verdict that is a pure function of those
//! rows. Replicas run in parallel on per-replica RNG streams and are folded
//! in replica order, so results do not depend on the thread count.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::integrators::{
    noise_for, simulate_coupled_climate, simulate_fast_slow, simulate_reduced, ExperimentConfig, GridPlan, PathD,
};
use crate::models::{
    energy_identity_residuals, validate_climate, validate_zero_mean, ClimateModel, Fixture, STRUCTURE_TOL,
    VALIDATION_PROBES,
};
use crate::noise::{
    check_epsilon, sample_stationary_initial, sample_stationary_initial_joint, std_normal, Increments, NoisePath,
    OuParams, OuStep, RngStream, SubstepRule,
};
use crate::reduction::{build_reduced, climate_correction_discrepancy, diffusion_b, extra_covariance, ReducedModel};
use crate::spectral::{Bilinear, LinearMap};

/// Replica fraction above which an experiment is inconclusive.
pub const STOP_FRACTION_LIMIT: f64 = 0.05;
/// Substep constant `c` in `h = c eps^2` for the closed-form checks.
pub const FORMULA_SUBSTEP: f64 = 0.02;
/// Tolerance of the pointwise energy identities.
pub const ENERGY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// Fail dominates inconclusive, which dominates pass.
    pub fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }

    pub fn all<I: IntoIterator<Item = Verdict>>(it: I) -> Verdict {
        it.into_iter().fold(Verdict::Pass, Verdict::and)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

/// Decreasing sequence of scale parameters with the Monte Carlo settings
/// shared by every rung.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsLadder {
    pub epsilons: Vec<f64>,
    pub replicas: usize,
    /// Exceedance threshold for the sup-distance; defaults to a quarter of
    /// the median sup-norm of the reduced paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

impl EpsLadder {
    pub fn new(epsilons: Vec<f64>, replicas: usize) -> Result<Self> {
        let ladder = EpsLadder {
            epsilons,
            replicas,
            delta: None,
            confidence: default_confidence(),
        };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::InvalidParam {
                name: "ladder",
                reason: "no scale parameters".into(),
            });
        }
        for e in &self.epsilons {
            check_epsilon(*e)?;
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParam {
                name: "ladder",
                reason: "scale parameters must be strictly decreasing".into(),
            });
        }
        if self.replicas == 0 {
            return Err(Error::InvalidParam {
                name: "replicas",
                reason: "need at least one replica".into(),
            });
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidParam {
                name: "confidence",
                reason: format!("must lie in (0, 1), got {}", self.confidence),
            });
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(Error::InvalidParam {
                    name: "delta",
                    reason: format!("threshold must be positive, got {d}"),
                });
            }
        }
        Ok(())
    }
}

/// One estimate with its Monte Carlo uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub estimate: f64,
    pub se: f64,
    pub n: usize,
    pub stopped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<[f64; 2]>,
    pub verdict: Verdict,
}

impl StatRecord {
    pub fn new(name: impl Into<String>, epsilon: Option<f64>, estimate: f64, se: f64, n: usize) -> Self {
        StatRecord {
            name: name.into(),
            epsilon,
            estimate,
            se,
            n,
            stopped: 0,
            reference: None,
            interval: None,
            verdict: Verdict::Pass,
        }
    }

    fn reference(mut self, r: f64) -> Self {
        self.reference = Some(r);
        self
    }

    fn verdict(mut self, v: Verdict) -> Self {
        self.verdict = v;
        self
    }

    fn stopped(mut self, s: usize) -> Self {
        self.stopped = s;
        self
    }

    /// Pass iff `|estimate - reference| <= k se` (exact equality when `se = 0`).
    fn within_se(mut self, reference: f64, k: f64) -> Self {
        self.reference = Some(reference);
        let gap = (self.estimate - reference).abs();
        self.verdict = Verdict::from_pass(gap <= k * self.se || gap <= 1e-14 * reference.abs().max(1e-300));
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub name: String,
    pub verdict: Verdict,
    pub records: Vec<StatRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl StatReport {
    pub(crate) fn from_records(name: &str, records: Vec<StatRecord>, notes: Vec<String>) -> Self {
        StatReport {
            name: name.into(),
            verdict: Verdict::all(records.iter().map(|r| r.verdict)),
            records,
            notes,
        }
    }

    pub fn find(&self, name: &str, epsilon: Option<f64>) -> Option<&StatRecord> {
        self.records.iter().find(|r| r.name == name && r.epsilon == epsilon)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "name,epsilon,estimate,se,n,stopped,reference,lower,upper,verdict")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.name,
                opt(r.epsilon),
                r.estimate,
                r.se,
                r.n,
                r.stopped,
                opt(r.reference),
                opt(r.interval.map(|i| i[0])),
                opt(r.interval.map(|i| i[1])),
                r.verdict.as_str()
            )?;
        }
        Ok(())
    }
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance and its large-sample standard error
/// `sqrt((m4 - s^4) / n)`.
pub fn variance_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (var, ((m4 - var * var).max(0.0) / n).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Two-sided normal quantile for a confidence level.
pub fn normal_quantile(confidence: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + 0.5 * confidence)
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, confidence: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = normal_quantile(confidence);
    let (nf, p) = (n as f64, k as f64 / n as f64);
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * nf)) / (1.0 + z2 / nf);
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / (1.0 + z2 / nf);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Runs `n` independent replicas in parallel; results come back in replica
/// order.
fn replicate<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

fn replica_rngs(stream: RngStream, rung: usize, replica: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let base = stream.child(rung as u64).child(replica as u64);
    (base.child(0).rng(), base.child(1).rng())
}

fn fast_path(target: &Fixture, cfg: &ExperimentConfig, noise: &NoisePath) -> Result<PathD> {
    match target {
        Fixture::Climate(cm) => Ok(simulate_coupled_climate(cm, cfg, noise)?.0),
        Fixture::Abstract(m) => simulate_fast_slow(m, cfg, noise),
    }
}

fn stop_verdict(stopped: usize, total: usize) -> Verdict {
    if (stopped as f64) > STOP_FRACTION_LIMIT * total as f64 {
        Verdict::Inconclusive
    } else {
        Verdict::Pass
    }
}

/// Tuning of [`strong_convergence`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongOptions {
    /// Upper bound on the exceedance probability at the smallest scale.
    pub final_threshold: f64,
    /// Multiplier of the median reduced sup-norm used as default threshold.
    pub delta_fraction: f64,
}

impl Default for StrongOptions {
    fn default() -> Self {
        StrongOptions {
            final_threshold: 0.1,
            delta_fraction: 0.25,
        }
    }
}

/// Exceedance probability `P(max_k |X^eps(t_k) - Xbar(t_k)| > delta)` for
/// pathwise coupled solutions: both equations are driven by the same Wiener
/// increments, the reduced one on the output grid.
///
/// Passes when consecutive Wilson intervals overlap in the nonincreasing
/// direction and the estimate at the smallest scale is below
/// `final_threshold`. Refuses models with a quadratic noise term, for which
/// only convergence in law holds.
pub fn strong_convergence(
    target: &Fixture,
    ladder: &EpsLadder,
    cfg: &ExperimentConfig,
    stream: RngStream,
    opts: StrongOptions,
) -> Result<StatReport> {
    ladder.validate()?;
    let model = target.to_abstract()?;
    if !model.beta().is_zero() {
        return Err(Error::Refused(
            "pathwise convergence is only available without the quadratic noise term (beta = 0)".into(),
        ));
    }
    let q = model.space().q().to_vec();
    let rm = build_reduced(model)?;

    // (sup distance, reduced sup-norm) per replica, None when a path stopped
    let mut runs: Vec<Vec<Option<(f64, f64)>>> = Vec::with_capacity(ladder.epsilons.len());
    for (k, &eps) in ladder.epsilons.iter().enumerate() {
        let cfg_e = cfg.with_epsilon(eps);
        let per = replicate(ladder.replicas, |r| {
            let (mut noise_rng, mut extra_rng) = replica_rngs(stream, k, r);
            let (plan, noise) = noise_for(&cfg_e, &q, &mut noise_rng)?;
            let fast = fast_path(target, &cfg_e, &noise)?;
            let coarse = noise.increments().aggregate(plan.substeps)?;
            let red = simulate_reduced(&rm, &cfg_e, &coarse, &mut extra_rng)?;
            Ok(fast.sup_distance(&red).map(|dist| (dist, red.sup_norm())))
        })?;
        runs.push(per);
    }

    let mut notes = Vec::new();
    let delta = match ladder.delta {
        Some(d) => d,
        None => {
            let norms: Vec<f64> = runs.iter().flatten().flatten().map(|(_, s)| *s).collect();
            let d = opts.delta_fraction * median(&norms);
            notes.push(format!("delta = {} x median reduced sup-norm = {d}", opts.delta_fraction));
            d
        }
    };
    if !(delta > 0.0) {
        return Err(Error::InvalidParam {
            name: "delta",
            reason: "threshold is not positive (all replicas stopped or reduced paths vanish)".into(),
        });
    }

    let mut records = vec![StatRecord::new("delta", None, delta, 0.0, 1)];
    let mut prev_interval: Option<(f64, f64)> = None;
    let last = ladder.epsilons.len() - 1;
    for (k, &eps) in ladder.epsilons.iter().enumerate() {
        let valid: Vec<f64> = runs[k].iter().flatten().map(|(d, _)| *d).collect();
        let stopped = ladder.replicas - valid.len();
        let n = valid.len();
        let hits = valid.iter().filter(|d| **d > delta).count();
        let p = if n > 0 { hits as f64 / n as f64 } else { f64::NAN };
        // continuity-adjusted so that the SE stays positive at p = 0 or 1
        let pa = (hits as f64 + 0.5) / (n as f64 + 1.0);
        let se = (pa * (1.0 - pa) / n.max(1) as f64).sqrt();
        let interval = wilson_interval(hits, n, ladder.confidence);
        let mut v = stop_verdict(stopped, ladder.replicas);
        if let Some((_, hi_prev)) = prev_interval {
            v = v.and(Verdict::from_pass(interval.0 <= hi_prev));
        }
        if k == last {
            v = v.and(Verdict::from_pass(p < opts.final_threshold));
        }
        prev_interval = Some(interval);
        let mut rec = StatRecord::new("p_exceed", Some(eps), p, se, n).stopped(stopped).verdict(v);
        rec.interval = Some([interval.0, interval.1]);
        if k == last {
            rec.reference = Some(opts.final_threshold);
        }
        records.push(rec);
        let (m, s) = mean_se(&valid);
        records.push(StatRecord::new("mean_sup_distance", Some(eps), m, s, n).stopped(stopped));
    }
    Ok(StatReport::from_records("strong_convergence", records, notes))
}

/// Endpoint of one reduced path on the output grid of `plan`, with Wiener
/// increments drawn directly at that resolution.
fn reduced_endpoint(
    rm: &ReducedModel,
    cfg: &ExperimentConfig,
    plan: &GridPlan,
    noise_rng: &mut ChaCha8Rng,
    extra_rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<f64>>> {
    let q = rm.model().space().q();
    let mut dw = Vec::with_capacity(plan.macro_steps * q.len());
    for _ in 0..plan.macro_steps {
        for qm in q {
            dw.push((qm * plan.delta).sqrt() * std_normal(noise_rng));
        }
    }
    let inc = Increments::new(plan.delta, q.len(), dw)?;
    Ok(simulate_reduced(rm, cfg, &inc, extra_rng)?.final_value().map(<[f64]>::to_vec))
}

fn column(samples: &[Vec<f64>], i: usize) -> Vec<f64> {
    samples.iter().map(|v| v[i]).collect()
}

/// Tuning of [`weak_convergence`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakOptions {
    /// Independent pairs of reduced batches averaged into the null KS level.
    pub null_pairs: usize,
    /// Allowed ratio of the final KS statistic to the null level.
    pub ks_factor: f64,
    /// Slack, in combined SEs, for the nonincreasing-gap check.
    pub trend_slack: f64,
}

impl Default for WeakOptions {
    fn default() -> Self {
        WeakOptions {
            null_pairs: 5,
            ks_factor: 2.0,
            trend_slack: 2.0,
        }
    }
}

/// Fixed-time marginals of `X^eps_T` against the reduced `Xbar_T`.
///
/// The reference batch of `Xbar_T` is simulated on the output grid of the
/// smallest scale. Per coordinate the report carries the mean and variance
/// gaps with SEs and the two-sample KS statistic; the null KS level is the
/// average over `null_pairs` pairs of independent reference batches. Passes
/// when the absolute gaps are nonincreasing along the ladder up to
/// `trend_slack` combined SEs and the KS statistic at the smallest scale is
/// at most `ks_factor` times the null level.
pub fn weak_convergence(
    target: &Fixture,
    ladder: &EpsLadder,
    cfg: &ExperimentConfig,
    stream: RngStream,
    opts: WeakOptions,
) -> Result<StatReport> {
    ladder.validate()?;
    let model = target.to_abstract()?;
    let q = model.space().q().to_vec();
    let d = model.d();
    let rm = build_reduced(model)?;
    let n = ladder.replicas;
    let eps_min = *ladder.epsilons.last().expect("validated nonempty");
    let cfg_ref = cfg.with_epsilon(eps_min);
    let plan_ref = cfg_ref.plan()?;

    let rungs = ladder.epsilons.len();
    let batch = |label: usize| -> Result<(Vec<Vec<f64>>, usize)> {
        let out = replicate(n, |r| {
            let (mut a, mut b) = replica_rngs(stream, rungs + label, r);
            reduced_endpoint(&rm, &cfg_ref, &plan_ref, &mut a, &mut b)
        })?;
        let stopped = out.iter().filter(|v| v.is_none()).count();
        Ok((out.into_iter().flatten().collect(), stopped))
    };
    let (reference, ref_stopped) = batch(0)?;
    let mut null_ks = vec![0.0; d];
    let mut null_stopped = 0;
    for j in 0..opts.null_pairs {
        let (other, s) = batch(j + 1)?;
        null_stopped += s;
        for (i, v) in null_ks.iter_mut().enumerate() {
            *v += ks_two_sample(&column(&reference, i), &column(&other, i)) / opts.null_pairs as f64;
        }
    }

    let mut records = Vec::new();
    let mut notes = vec![format!(
        "reduced reference on {} output steps of {}",
        plan_ref.macro_steps, plan_ref.delta
    )];
    let mut verdict = stop_verdict(ref_stopped, n).and(stop_verdict(null_stopped, n * opts.null_pairs.max(1)));
    for (i, v) in null_ks.iter().enumerate() {
        records.push(StatRecord::new(format!("ks_null[{i}]"), None, *v, 0.0, n).stopped(ref_stopped));
    }
    let ref_mean: Vec<(f64, f64)> = (0..d).map(|i| mean_se(&column(&reference, i))).collect();
    let ref_var: Vec<(f64, f64)> = (0..d).map(|i| variance_se(&column(&reference, i))).collect();

    // Per-coordinate (gap, se) of the mean and variance at the previous rung.
    let mut prev: Option<(Vec<(f64, f64)>, Vec<(f64, f64)>)> = None;
    let last = rungs - 1;
    for (k, &eps) in ladder.epsilons.iter().enumerate() {
        let cfg_e = cfg.with_epsilon(eps);
        let out = replicate(n, |r| {
            let (mut noise_rng, _) = replica_rngs(stream, k, r);
            let (_, noise) = noise_for(&cfg_e, &q, &mut noise_rng)?;
            Ok(fast_path(target, &cfg_e, &noise)?.final_value().map(<[f64]>::to_vec))
        })?;
        let stopped = out.iter().filter(|v| v.is_none()).count();
        let samples: Vec<Vec<f64>> = out.into_iter().flatten().collect();
        let stop_v = stop_verdict(stopped, n);
        let mut mean_gaps = Vec::with_capacity(d);
        let mut var_gaps = Vec::with_capacity(d);
        for i in 0..d {
            let col = column(&samples, i);
            let (m, ms) = mean_se(&col);
            let (v, vs) = variance_se(&col);
            let mg = (m - ref_mean[i].0, ms.hypot(ref_mean[i].1));
            let vg = (v - ref_var[i].0, vs.hypot(ref_var[i].1));
            let trend = |now: (f64, f64), before: Option<(f64, f64)>| match before {
                Some(b) => Verdict::from_pass(now.0.abs() <= b.0.abs() + opts.trend_slack * now.1.hypot(b.1)),
                None => Verdict::Pass,
            };
            let mv = stop_v.and(trend(mg, prev.as_ref().map(|p| p.0[i])));
            let vv = stop_v.and(trend(vg, prev.as_ref().map(|p| p.1[i])));
            records.push(StatRecord::new(format!("mean_gap[{i}]"), Some(eps), mg.0, mg.1, samples.len()).stopped(stopped).verdict(mv));
            records.push(StatRecord::new(format!("var_gap[{i}]"), Some(eps), vg.0, vg.1, samples.len()).stopped(stopped).verdict(vv));
            let ks = ks_two_sample(&col, &column(&reference, i));
            let mut ks_rec = StatRecord::new(format!("ks[{i}]"), Some(eps), ks, 0.0, samples.len()).stopped(stopped);
            if k == last {
                ks_rec = ks_rec
                    .reference(opts.ks_factor * null_ks[i])
                    .verdict(stop_v.and(Verdict::from_pass(ks <= opts.ks_factor * null_ks[i])));
            }
            records.push(ks_rec);
            mean_gaps.push(mg);
            var_gaps.push(vg);
        }
        verdict = verdict.and(stop_v);
        prev = Some((mean_gaps, var_gaps));
    }
    notes.push("only fixed-time marginals are compared".into());
    let mut report = StatReport::from_records("weak_convergence", records, notes);
    report.verdict = report.verdict.and(verdict);
    Ok(report)
}

/// One configuration of the iterated-integral check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondExpCase {
    pub delta: f64,
    pub epsilon: f64,
    pub l: usize,
    pub m: usize,
    /// Starting values `(Y^l_0, Y^m_0)`; the first is used when `l = m`.
    pub y0: (f64, f64),
}

/// `E[int_0^Delta int_0^s Y^l_r Y^m_s dr ds | Y_0]`:
///
/// `(eps^4/2) y_l y_m (e^{-a} - 1)^2 + [l = m] (q_m/2) (Delta + eps^2 (-3/2 + 2 e^{-a} - e^{-2a}/2))`
/// with `a = Delta / eps^2`.
pub fn cond_exp_closed_form(q: &[f64], case: &CondExpCase) -> f64 {
    let eps2 = case.epsilon * case.epsilon;
    let a = case.delta / eps2;
    let (yl, ym) = if case.l == case.m { (case.y0.0, case.y0.0) } else { case.y0 };
    let mut v = 0.5 * eps2 * eps2 * yl * ym * (-a).exp_m1().powi(2);
    if case.l == case.m {
        v += 0.5 * q[case.m] * (case.delta + eps2 * (-1.5 + 2.0 * (-a).exp() - 0.5 * (-2.0 * a).exp()));
    }
    v
}

/// Monte Carlo estimate of the conditional iterated integral from OU paths
/// started at the given values, with substeps `h = eps^2 / 50` and exact
/// substep integrals. Passes within 3 SE of [`cond_exp_closed_form`].
pub fn check_cond_exp(q: &[f64], case: &CondExpCase, replicas: usize, stream: RngStream) -> Result<StatReport> {
    if case.l >= q.len() || case.m >= q.len() {
        return Err(Error::InvalidParam {
            name: "l, m",
            reason: format!("indices must be below M = {}", q.len()),
        });
    }
    if !(case.delta >= 0.0 && case.delta.is_finite()) {
        return Err(Error::InvalidParam {
            name: "Delta",
            reason: format!("must be nonnegative, got {}", case.delta),
        });
    }
    let reference = cond_exp_closed_form(q, case);
    let eps = case.epsilon;
    let name = format!("cond_exp[{},{}]", case.l, case.m);
    if case.delta == 0.0 {
        let rec = StatRecord::new(name, Some(eps), 0.0, 0.0, replicas).within_se(reference, 3.0);
        return Ok(StatReport::from_records("cond_exp", vec![rec], Vec::new()));
    }
    let (qs, y0) = if case.l == case.m {
        (vec![q[case.l]], vec![case.y0.0])
    } else {
        (vec![q[case.l], q[case.m]], vec![case.y0.0, case.y0.1])
    };
    let params = OuParams::from_spectrum_closed(eps, qs)?;
    let steps = ((case.delta / (FORMULA_SUBSTEP * eps * eps)).ceil() as usize).max(1);
    let step = OuStep::new(&params, case.delta / steps as f64)?;
    let diag = case.l == case.m;
    let vals = replicate(replicas, |r| {
        let (mut rng, _) = replica_rngs(stream, 0, r);
        let k = y0.len();
        let mut y = y0.clone();
        let mut y_next = vec![0.0; k];
        let mut dw = vec![0.0; k];
        let (mut acc_l, mut c) = (0.0, 0.0);
        for _ in 0..steps {
            step.advance_joint(&y, &mut dw, &mut y_next, &mut rng);
            let il = step.integral(dw[0], y[0], y_next[0]);
            let im = if diag { il } else { step.integral(dw[1], y[1], y_next[1]) };
            // int_{t_n}^{t_n+1} Y^m_s (int_0^s Y^l_r dr) ds, inner part within the step
            // taken at its midpoint value; exact when l = m
            c += im * (acc_l + 0.5 * il);
            acc_l += il;
            std::mem::swap(&mut y, &mut y_next);
        }
        Ok(c)
    })?;
    let (m, se) = mean_se(&vals);
    let rec = StatRecord::new(name, Some(eps), m, se, replicas).within_se(reference, 3.0);
    Ok(StatReport::from_records(
        "cond_exp",
        vec![rec],
        vec![format!("Delta = {}, Y0 = {:?}, {} substeps", case.delta, case.y0, steps)],
    ))
}

/// `E[U^i_T U^j_T] = 1/2 sum_{l,m} beta[i][l][m] beta[j][l][m] q_l q_m (T + (eps^2/2)(e^{-2T/eps^2} - 1))`
/// for `U_T = eps int_0^T beta(Y_s, Y_s) ds` with stationary `Y`.
pub fn u_second_moment(beta: &Bilinear, q: &[f64], t_end: f64, epsilon: f64) -> LinearMap {
    let (d, m, _) = beta.shape();
    let eps2 = epsilon * epsilon;
    let bracket = t_end + 0.5 * eps2 * (-2.0 * t_end / eps2).exp_m1();
    LinearMap::from_fn(d, d, |i, j| {
        let mut s = 0.0;
        for l in 0..m {
            for k in 0..m {
                s += beta.get(i, l, k) * beta.get(j, l, k) * q[l] * q[k];
            }
        }
        0.5 * s * bracket
    })
}

/// Mean and second moments of `U^eps_T = eps int_0^T beta(Y, Y) ds` against
/// the closed forms: mean within 5 SE of zero, second moments within 3 SE.
/// The integral is a left-point sum on substeps `h = eps^2 / 50`.
pub fn check_u_moments(
    beta: &Bilinear,
    q: &[f64],
    t_end: f64,
    epsilon: f64,
    replicas: usize,
    stream: RngStream,
) -> Result<StatReport> {
    let zm = validate_zero_mean(beta, q)?;
    if !zm.pass {
        return Err(Error::Assumption {
            condition: "zero-mean condition (A5)",
            max_residual: zm.max_abs,
            residuals: zm.residual,
        });
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidParam {
            name: "T",
            reason: format!("horizon must be positive, got {t_end}"),
        });
    }
    let beta = beta.symmetrize_in_last_two()?;
    let d = beta.out_dim();
    let params = OuParams::from_spectrum_closed(epsilon, q.to_vec())?;
    let steps = ((t_end / (FORMULA_SUBSTEP * epsilon * epsilon)).ceil() as usize).max(1);
    let step = OuStep::new(&params, t_end / steps as f64)?;
    let h = step.h();
    let samples = replicate(replicas, |r| {
        let (mut rng, _) = replica_rngs(stream, 0, r);
        let mut u = vec![0.0; d];
        if beta.is_zero() {
            return Ok(u);
        }
        let mut y = sample_stationary_initial(&params, &mut rng);
        let mut y_next = vec![0.0; y.len()];
        let mut dw = vec![0.0; y.len()];
        let mut tmp = vec![0.0; d];
        for _ in 0..steps {
            beta.apply_unchecked(&y, &y, &mut tmp);
            for i in 0..d {
                u[i] += h * epsilon * tmp[i];
            }
            step.advance_joint(&y, &mut dw, &mut y_next, &mut rng);
            std::mem::swap(&mut y, &mut y_next);
        }
        Ok(u)
    })?;
    let reference = u_second_moment(&beta, q, t_end, epsilon);
    let mut records = Vec::new();
    for i in 0..d {
        let (m, se) = mean_se(&column(&samples, i));
        records.push(StatRecord::new(format!("u_mean[{i}]"), Some(epsilon), m, se, replicas).within_se(0.0, 5.0));
    }
    for i in 0..d {
        for j in i..d {
            let prod: Vec<f64> = samples.iter().map(|u| u[i] * u[j]).collect();
            let (m, se) = mean_se(&prod);
            records.push(
                StatRecord::new(format!("u_second[{i},{j}]"), Some(epsilon), m, se, replicas)
                    .within_se(reference.get(i, j), 3.0),
            );
        }
    }
    let limit = extra_covariance(&diffusion_b(&beta, q)?);
    let notes = vec![format!(
        "T = {t_end}, {steps} substeps; small-eps limit T * extra_cov = {:?}",
        limit.to_rows().iter().map(|r| r.iter().map(|v| v * t_end).collect::<Vec<_>>()).collect::<Vec<_>>()
    )];
    Ok(StatReport::from_records("u_moments", records, notes))
}

/// `1 - 2 eps^-1 eps2^-1 / (eps^-2 + eps2^-2)`.
pub fn non_cauchy_factor(epsilon: f64, epsilon2: f64) -> f64 {
    let (a, b) = (1.0 / epsilon, 1.0 / epsilon2);
    1.0 - 2.0 * a * b / (a * a + b * b)
}

/// `T sum_{i,l,m} beta[i][l][m]^2 q_l q_m * non_cauchy_factor`.
pub fn non_cauchy_bound(beta: &Bilinear, q: &[f64], t_end: f64, epsilon: f64, epsilon2: f64) -> f64 {
    let (d, m, _) = beta.shape();
    let mut s = 0.0;
    for i in 0..d {
        for l in 0..m {
            for k in 0..m {
                s += beta.get(i, l, k).powi(2) * q[l] * q[k];
            }
        }
    }
    t_end * s * non_cauchy_factor(epsilon, epsilon2)
}

/// `E sup_t |M^eps_t - M^eps2_t|^2` with `M^eps = eps int beta(Y^eps, dW)`,
/// both scales driven by one Wiener path from a jointly stationary start,
/// `eps2 = ratio * eps`. Passes when the estimate is at least half the
/// closed-form lower bound.
pub fn check_non_cauchy(
    beta: &Bilinear,
    q: &[f64],
    t_end: f64,
    epsilon: f64,
    ratio: f64,
    replicas: usize,
    stream: RngStream,
) -> Result<StatReport> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::InvalidParam {
            name: "ratio",
            reason: format!("must be at least 1, got {ratio}"),
        });
    }
    let beta = beta.symmetrize_in_last_two()?;
    let eps2 = ratio * epsilon;
    let params = OuParams::from_spectrum(epsilon, q.to_vec())?;
    let params2 = OuParams::from_spectrum_closed(eps2, q.to_vec())?;
    let factor = non_cauchy_factor(epsilon, eps2);
    let bound = non_cauchy_bound(&beta, q, t_end, epsilon, eps2);
    let notes = vec![format!("scales {epsilon} and {eps2}, gap factor {factor}")];
    let name = "sup_sq_gap";
    if ratio == 1.0 {
        let rec = StatRecord::new(name, Some(epsilon), 0.0, 0.0, replicas).reference(0.5 * bound);
        return Ok(StatReport::from_records("non_cauchy", vec![rec], notes));
    }
    let steps = ((t_end / (FORMULA_SUBSTEP * epsilon * epsilon)).ceil() as usize).max(1);
    let h = t_end / steps as f64;
    let (s1, s2) = (OuStep::new(&params, h)?, OuStep::new(&params2, h)?);
    let d = beta.out_dim();
    let m = q.len();
    let vals = replicate(replicas, |r| {
        let (mut rng, _) = replica_rngs(stream, 0, r);
        let mut y0 = if eps2 < 1.0 {
            sample_stationary_initial_joint(q, &[epsilon, eps2], &mut rng)?
        } else {
            joint_initial_closed(q, epsilon, eps2, &mut rng)
        };
        let mut y2 = y0.pop().expect("two scales");
        let mut y1 = y0.pop().expect("two scales");
        let (mut n1, mut n2, mut dw) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        let mut gap = vec![0.0; d];
        let mut sup = 0.0f64;
        for _ in 0..steps {
            s1.advance_joint(&y1, &mut dw, &mut n1, &mut rng);
            s2.advance_given(&y2, &dw, &mut n2, &mut rng);
            beta.apply_unchecked(&y1, &dw, &mut a);
            beta.apply_unchecked(&y2, &dw, &mut b);
            for i in 0..d {
                gap[i] += epsilon * a[i] - eps2 * b[i];
            }
            sup = sup.max(gap.iter().map(|g| g * g).sum());
            std::mem::swap(&mut y1, &mut n1);
            std::mem::swap(&mut y2, &mut n2);
        }
        Ok(sup)
    })?;
    let (est, se) = mean_se(&vals);
    let rec = StatRecord::new(name, Some(epsilon), est, se, replicas)
        .reference(0.5 * bound)
        .verdict(Verdict::from_pass(est >= 0.5 * bound));
    Ok(StatReport::from_records("non_cauchy", vec![rec], notes))
}

/// Joint stationary start when the second scale equals 1.
fn joint_initial_closed(q: &[f64], e1: f64, e2: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    use crate::noise::stationary_cross_cov as cc;
    let (c11, c12, c22) = (cc(1.0, e1, e1), cc(1.0, e1, e2), cc(1.0, e2, e2));
    let l21 = c12 / c11.sqrt();
    let l22 = (c22 - l21 * l21).max(0.0).sqrt();
    let mut out = vec![vec![0.0; q.len()]; 2];
    for (k, qk) in q.iter().enumerate() {
        let (z1, z2) = (std_normal(rng), std_normal(rng));
        out[0][k] = qk.sqrt() * c11.sqrt() * z1;
        out[1][k] = qk.sqrt() * (l21 * z1 + l22 * z2);
    }
    out
}

/// Least-squares slope of `y` on `x` and its SE propagated from per-point SEs
/// of `y`.
pub fn regression_slope(x: &[f64], y: &[f64], y_se: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let var: f64 = x.iter().zip(y_se).map(|(a, s)| ((a - xm) / sxx).powi(2) * s * s).sum();
    (sxy / sxx, var.sqrt())
}

/// Growth of `(E sup_{t <= T} |Y^eps_t|^p)^{1/p}` as `eps -> 0`: log-log
/// regression slope over the given scales, passing within `0.15` of `-1`.
///
/// For fixed `T` the supremum of a single coordinate grows like
/// `eps^-1 sqrt(log(T / eps^2))`, so finite ladders show slopes slightly
/// steeper than `-1`. The supremum is taken over substeps `h = c eps^2`.
pub fn check_ou_scaling(
    q: &[f64],
    epsilons: &[f64],
    p: f64,
    t_end: f64,
    replicas: usize,
    rule: SubstepRule,
    stream: RngStream,
) -> Result<StatReport> {
    if epsilons.len() < 3 {
        return Err(Error::InvalidParam {
            name: "ladder",
            reason: format!("slope needs at least 3 scales, got {}", epsilons.len()),
        });
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParam {
            name: "p",
            reason: format!("moment order must be at least 1, got {p}"),
        });
    }
    for e in epsilons {
        check_epsilon(*e)?;
    }
    if q.iter().all(|v| *v == 0.0) {
        let mut rec = StatRecord::new("slope", None, f64::NAN, 0.0, replicas).verdict(Verdict::Inconclusive);
        rec.reference = Some(-1.0);
        return Ok(StatReport::from_records(
            "ou_scaling",
            vec![rec],
            vec!["degenerate: all covariance eigenvalues vanish, sup |Y| = 0".into()],
        ));
    }
    let mut records = Vec::new();
    let (mut xs, mut ys, mut ses) = (Vec::new(), Vec::new(), Vec::new());
    for (k, &eps) in epsilons.iter().enumerate() {
        let params = OuParams::from_spectrum(eps, q.to_vec())?;
        let steps = rule.steps_for(eps, t_end);
        let step = OuStep::new(&params, t_end / steps as f64)?;
        let vals = replicate(replicas, |r| {
            let (mut rng, _) = replica_rngs(stream, k, r);
            let mut y = sample_stationary_initial(&params, &mut rng);
            let mut y_next = vec![0.0; y.len()];
            let mut dw = vec![0.0; y.len()];
            let mut sup = y.iter().map(|v| v * v).sum::<f64>();
            for _ in 0..steps {
                step.advance_joint(&y, &mut dw, &mut y_next, &mut rng);
                std::mem::swap(&mut y, &mut y_next);
                sup = sup.max(y.iter().map(|v| v * v).sum());
            }
            Ok(sup.powf(0.5 * p))
        })?;
        let (m, se) = mean_se(&vals);
        let root = m.powf(1.0 / p);
        let root_se = se * root / (p * m);
        records.push(StatRecord::new("sup_moment_root", Some(eps), root, root_se, replicas));
        xs.push(eps.ln());
        ys.push(root.ln());
        ses.push(root_se / root);
    }
    let (slope, slope_se) = regression_slope(&xs, &ys, &ses);
    let rec = StatRecord::new("slope", None, slope, slope_se, replicas)
        .reference(-1.0)
        .verdict(Verdict::from_pass((slope + 1.0).abs() <= 0.15));
    records.push(rec);
    Ok(StatReport::from_records(
        "ou_scaling",
        records,
        vec![format!("p = {p}, T = {t_end}, substep c = {}", rule.c)],
    ))
}

/// Constant gap between the generic correction of the lowered climate model
/// and its simplified form (informational).
pub fn correction_discrepancy(cm: &ClimateModel) -> StatReport {
    let records = climate_correction_discrepancy(cm)
        .into_iter()
        .enumerate()
        .map(|(i, v)| StatRecord::new(format!("discrepancy[{i}]"), None, v, 0.0, 1))
        .collect();
    StatReport::from_records("correction_discrepancy", records, Vec::new())
}

/// Residuals of every structural condition applicable to the fixture.
pub fn structural_report(target: &Fixture) -> Result<StatReport> {
    let mut records = Vec::new();
    let mut notes = Vec::new();
    let tol_rec = |name: &str, v: f64, tol: f64| {
        StatRecord::new(name, None, v, 0.0, 1)
            .reference(tol)
            .verdict(Verdict::from_pass(v <= tol))
    };
    match target {
        Fixture::Climate(cm) => {
            let v = validate_climate(cm);
            records.push(tol_rec("c1_linear_coupling", v.c1, STRUCTURE_TOL));
            records.push(tol_rec("c2_b111_skew", v.c2, STRUCTURE_TOL));
            records.push(tol_rec("c3_b112_b211_skew", v.c3, STRUCTURE_TOL));
            records.push(tol_rec(
                "c4_zero_mean",
                v.c4.max_abs / v.c4.scale,
                crate::models::ZERO_MEAN_TOL,
            ));
            for (k, r) in energy_identity_residuals(cm, VALIDATION_PROBES).iter().enumerate() {
                records.push(tol_rec(&format!("energy_identity[{}]", k + 1), *r, ENERGY_TOL));
            }
            notes.push(format!("{VALIDATION_PROBES} random probes"));
        }
        Fixture::Abstract(m) => {
            let zm = validate_zero_mean(m.beta(), m.space().q())?;
            records.push(tol_rec("a5_zero_mean", zm.max_abs / zm.scale, crate::models::ZERO_MEAN_TOL));
            if let Some(r) = m.check_dsigma(VALIDATION_PROBES, 2.0) {
                records.push(tol_rec("dsigma_vs_finite_difference", r, 1e-6));
            }
        }
    }
    Ok(StatReport::from_records("validation", records, notes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin_fixture;

    fn quad_beta() -> (Bilinear, Vec<f64>) {
        let Fixture::Climate(cm) = builtin_fixture("quadratic_offdiag").unwrap() else { unreachable!() };
        (cm.b122.clone(), cm.space.q().to_vec())
    }

    #[test]
    fn ladder_validation() {
        assert!(EpsLadder::new(vec![0.3, 0.2, 0.1], 10).is_ok());
        assert!(EpsLadder::new(vec![0.2, 0.3], 10).is_err());
        assert!(EpsLadder::new(vec![0.2, 0.2], 10).is_err());
        assert!(EpsLadder::new(vec![], 10).is_err());
        assert!(EpsLadder::new(vec![0.2], 0).is_err());
        assert!(EpsLadder::new(vec![1.2], 5).is_err());
    }

    #[test]
    fn verdict_combination() {
        use Verdict::*;
        assert_eq!(Verdict::all([Pass, Pass]), Pass);
        assert_eq!(Verdict::all([Pass, Inconclusive]), Inconclusive);
        assert_eq!(Verdict::all([Inconclusive, Fail, Pass]), Fail);
        assert_eq!(serde_json::to_string(&Inconclusive).unwrap(), "\"inconclusive\"");
    }

    #[test]
    fn ks_statistic_oracle() {
        assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
        // F_a jumps at 1,2,3,4; F_b at 2.5 and 5: max gap 3/4 - 1/2 ... at x = 2: 1/2 - 0
        let d = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[2.5, 5.0]);
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wilson_interval_oracle() {
        let (lo, hi) = wilson_interval(0, 100, 0.95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.036_994).abs() < 1e-4, "{hi}");
        let (lo, hi) = wilson_interval(50, 100, 0.95);
        assert!((lo - 0.403_8).abs() < 1e-3 && (hi - 0.596_2).abs() < 1e-3);
    }

    #[test]
    fn regression_slope_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 1.5 * v).collect();
        let (s, se) = regression_slope(&x, &y, &[0.1; 4]);
        assert!((s + 1.5).abs() < 1e-14);
        assert!((se - 0.1 / 5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn cond_exp_trivial_cases() {
        let q = [1.0, 0.5];
        let zero = CondExpCase { delta: 0.0, epsilon: 0.5, l: 0, m: 0, y0: (1.0, 1.0) };
        assert_eq!(cond_exp_closed_form(&q, &zero), 0.0);
        let r = check_cond_exp(&q, &zero, 10, RngStream::new(1, 0)).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);

        let off = CondExpCase { delta: 0.5, epsilon: 0.5, l: 0, m: 1, y0: (0.0, 0.0) };
        assert_eq!(cond_exp_closed_form(&q, &off), 0.0);
        let r = check_cond_exp(&q, &off, 4000, RngStream::new(1, 1)).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn cond_exp_unit_case_matches_brute_force() {
        let e = (-1.0f64).exp();
        let expected = 0.5 * (1.0 + (-1.5 + 2.0 * e - 0.5 * e * e));
        let case = CondExpCase { delta: 1.0, epsilon: 1.0, l: 0, m: 0, y0: (0.0, 0.0) };
        assert!((cond_exp_closed_form(&[1.0], &case) - expected).abs() < 1e-15);
        let r = check_cond_exp(&[1.0], &case, 4000, RngStream::new(2, 0)).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn u_moments_trivial_and_unit_scale() {
        let zero = Bilinear::zeros(2, 3, 3);
        let r = check_u_moments(&zero, &[1.0, 0.5, 0.25], 1.0, 0.5, 20, RngStream::new(3, 0)).unwrap();
        assert!(r.records.iter().all(|x| x.estimate == 0.0));
        assert_eq!(r.verdict, Verdict::Pass);

        let (beta, q) = quad_beta();
        let ref1 = u_second_moment(&beta, &q, 1.0, 1.0);
        let expected_bracket = 1.0 + 0.5 * ((-2.0f64).exp() - 1.0);
        let raw: f64 = (0..3).flat_map(|l| (0..3).map(move |k| (l, k))).map(|(l, k)| beta.get(0, l, k).powi(2) * q[l] * q[k]).sum();
        assert!((ref1.get(0, 0) - 0.5 * raw * expected_bracket).abs() < 1e-14);
        let r = check_u_moments(&beta, &q, 1.0, 1.0, 3000, RngStream::new(3, 1)).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn u_moments_refuse_nonzero_mean() {
        let mut beta = Bilinear::zeros(1, 1, 1);
        beta.set(0, 0, 0, 1.0);
        assert!(matches!(
            check_u_moments(&beta, &[1.0], 1.0, 0.5, 10, RngStream::new(4, 0)),
            Err(Error::Assumption { .. })
        ));
    }

    #[test]
    fn non_cauchy_factor_values() {
        assert!((non_cauchy_factor(0.1, 0.2) - 0.2).abs() < 1e-15);
        assert_eq!(non_cauchy_factor(0.3, 0.3), 0.0);
        assert!(non_cauchy_factor(0.01, 0.9) > 0.97);
        let (beta, q) = quad_beta();
        let r = check_non_cauchy(&beta, &q, 1.0, 0.1, 1.0, 10, RngStream::new(5, 0)).unwrap();
        assert_eq!(r.records[0].estimate, 0.0);
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(check_non_cauchy(&beta, &q, 1.0, 0.1, 0.5, 10, RngStream::new(5, 0)).is_err());
    }

    #[test]
    fn ou_scaling_degenerate_inputs() {
        let s = RngStream::new(6, 0);
        assert!(check_ou_scaling(&[1.0], &[0.1], 2.0, 1.0, 10, SubstepRule::default(), s).is_err());
        let r = check_ou_scaling(&[0.0, 0.0], &[0.2, 0.1, 0.05], 2.0, 1.0, 10, SubstepRule::default(), s).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn discrepancy_report_matches_reduction() {
        let Fixture::Climate(cm) = builtin_fixture("linear_scatter").unwrap() else { unreachable!() };
        let r = correction_discrepancy(&cm);
        let direct = climate_correction_discrepancy(&cm);
        for (rec, v) in r.records.iter().zip(direct) {
            assert_eq!(rec.estimate, v);
        }
    }

    #[test]
    fn strong_refuses_quadratic_noise() {
        let f = builtin_fixture("quadratic_offdiag").unwrap();
        let ladder = EpsLadder::new(vec![0.3], 2).unwrap();
        let cfg = ExperimentConfig::new(1.0, f.default_x0(), 0.3);
        assert!(matches!(
            strong_convergence(&f, &ladder, &cfg, RngStream::new(7, 0), StrongOptions::default()),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn strong_additive_matches_gaussian_tail() {
        // F = 0, sigma = projection: sup-distance at the final time is
        // eps^2 |Y_T - Y_0|, a Gaussian quantity; check P(eps^2 |dY_T| > delta)
        // on a single output interval against the exact tail.
        let f = builtin_fixture("ou_only").unwrap();
        let eps = 0.3;
        let mut cfg = ExperimentConfig::new(1.0, vec![0.0, 0.0], eps);
        cfg.delta = Some(1.0);
        let mut ladder = EpsLadder::new(vec![eps], 4000).unwrap();
        ladder.delta = Some(0.05);
        let r = strong_convergence(&f, &ladder, &cfg, RngStream::new(8, 0), StrongOptions { final_threshold: 1.0, ..Default::default() })
            .unwrap();
        let rec = r.find("p_exceed", Some(eps)).unwrap();
        // Y_T - Y_0 per coordinate ~ N(0, q eps^-2 (1 - e^{-T/eps^2}))
        let q = [1.0, 0.5];
        let var: Vec<f64> = q.iter().map(|qm| eps.powi(4) * qm / (eps * eps) * (1.0 - (-1.0 / (eps * eps)).exp())).collect();
        // P(|Z| > delta) for a 2-d Gaussian with independent coordinates, by quadrature
        let n = 2000;
        let mut inside = 0.0;
        let (s0, s1) = (var[0].sqrt(), var[1].sqrt());
        let std = Normal::standard();
        for k in 0..n {
            let a = -0.05 + 0.1 * (k as f64 + 0.5) / n as f64;
            let w = 0.1 / n as f64;
            let b = (0.05f64 * 0.05 - a * a).max(0.0).sqrt();
            let dens = (-(a * a) / (2.0 * var[0])).exp() / (s0 * (2.0 * std::f64::consts::PI).sqrt());
            inside += w * dens * (std.cdf(b / s1) - std.cdf(-b / s1));
        }
        let p = 1.0 - inside;
        assert!((rec.estimate - p).abs() <= 5.0 * rec.se, "{} vs {p} (se {})", rec.estimate, rec.se);
    }

    #[test]
    fn strong_is_deterministic() {
        let f = builtin_fixture("linear_scatter").unwrap();
        let ladder = EpsLadder::new(vec![0.3, 0.2], 24).unwrap();
        let cfg = ExperimentConfig::new(0.5, f.default_x0(), 0.3);
        let a = strong_convergence(&f, &ladder, &cfg, RngStream::new(9, 0), StrongOptions::default()).unwrap();
        let b = strong_convergence(&f, &ladder, &cfg, RngStream::new(9, 0), StrongOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn weak_refuses_zero_mean_violation_and_is_deterministic() {
        let f = builtin_fixture("ou_only").unwrap();
        let ladder = EpsLadder::new(vec![0.3, 0.2], 50).unwrap();
        let cfg = ExperimentConfig::new(0.5, vec![0.0, 0.0], 0.3);
        let a = weak_convergence(&f, &ladder, &cfg, RngStream::new(10, 0), WeakOptions::default()).unwrap();
        let b = weak_convergence(&f, &ladder, &cfg, RngStream::new(10, 0), WeakOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.find("ks[0]", Some(0.2)).unwrap().reference.is_some());
    }

    #[test]
    fn structural_reports_pass_on_fixtures() {
        for name in crate::models::FIXTURE_NAMES {
            let r = structural_report(&builtin_fixture(name).unwrap()).unwrap();
            assert_eq!(r.verdict, Verdict::Pass, "{name}: {r:?}");
        }
    }

    #[test]
    fn report_csv_layout() {
        let r = StatReport::from_records(
            "x",
            vec![StatRecord::new("a", Some(0.1), 1.5, 0.25, 10).within_se(1.0, 3.0)],
            Vec::new(),
        );
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "name,epsilon,estimate,se,n,stopped,reference,lower,upper,verdict\na,0.1,1.5,0.25,10,0,1,,,pass\n"
        );
    }
}
