//! Scenario files: parsing, eager validation, command-line overrides and the
//! orchestration of one run into `report.json`, per-experiment CSV tables
//! and a plain-text summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diagnostics::{
    check_cond_exp, check_non_cauchy, check_ou_scaling, check_u_moments, correction_discrepancy,
    strong_convergence, structural_report, weak_convergence, CondExpCase, EpsLadder, StatRecord, StatReport,
    StrongOptions, Verdict, WeakOptions,
};
use crate::error::{Error, Result};
use crate::integrators::{noise_for, simulate_coupled_climate, simulate_fast_slow, simulate_reduced, ExperimentConfig};
use crate::models::{
    builtin_fixture, validate_climate, validate_zero_mean, AbstractModel, AffineDiffusion, ClimateModel, Fixture,
    Forcing, PolynomialDrift,
};
use crate::noise::{RngStream, SubstepRule};
use crate::reduction::build_reduced;
use crate::spectral::{Bilinear, LinearMap, SpaceSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Strong,
    Weak,
    CheckFormulas,
    Simulate,
    Validate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClimateSpec {
    pub space: SpaceSpec,
    pub f1: Vec<f64>,
    pub a11: LinearMap,
    pub a12: LinearMap,
    pub a21: LinearMap,
    pub b111: Bilinear,
    pub b112: Bilinear,
    pub b122: Bilinear,
    pub b211: Bilinear,
}

/// `F(x) = forcing + linear x + quadratic(x, x)`,
/// `sigma(x) = sigma + sigma_linear(x, .)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractSpec {
    pub space: SpaceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<Bilinear>,
    pub sigma: LinearMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_linear: Option<Bilinear>,
    pub beta: Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSpec {
    Fixture(String),
    Climate(Box<ClimateSpec>),
    Abstract(Box<AbstractSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSpec {
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substep_c: Option<f64>,
}

/// Settings of the closed-form battery; unset fields fall back to the
/// ladder and config of the scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_exp: Option<CondExpCase>,
    /// Scales of the OU supremum regression; defaults to the ladder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ou_epsilons: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ou_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ou_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub non_cauchy_ratio: Option<f64>,
}

/// Scenario file contents. `seed` is mandatory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub model: ModelSpec,
    pub kind: Kind,
    pub ladder: EpsLadder,
    pub config: ConfigSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formulas: Option<FormulaSpec>,
}

/// Validated scenario with its model resolved.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub fixture: Fixture,
    pub config: ExperimentConfig,
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Sets `path` (dot-separated object keys) in `root` to `value`, parsed as
/// JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, value: &str) -> Result<()> {
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(cfg_err(path, "empty key in override path"));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| cfg_err(path, format!("`{key}` is not inside an object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| cfg_err(path, "parent is not an object"))?;
    obj.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses `key=value` override strings.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| cfg_err(s, "override must have the form key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Parses and validates a scenario, applying overrides first.
pub fn parse_scenario_with(text: &str, overrides: &[(String, String)]) -> Result<Scenario> {
    let mut value: Value = serde_json::from_str(text)?;
    if !value.is_object() {
        return Err(cfg_err("<root>", "scenario must be a JSON object"));
    }
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    if value.get("seed").is_none_or(Value::is_null) {
        return Err(cfg_err("seed", "required: runs are only reproducible from an explicit seed"));
    }
    let spec: ScenarioSpec = serde_json::from_value(value)?;
    resolve(spec)
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    parse_scenario_with(text, &[])
}

pub fn load_scenario(path: &Path, overrides: &[(String, String)]) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario_with(&text, overrides)
}

fn build_model(spec: &ModelSpec) -> Result<Fixture> {
    match spec {
        ModelSpec::Fixture(name) => builtin_fixture(name),
        ModelSpec::Climate(c) => {
            let cm = ClimateModel::new(
                c.space.clone(),
                Forcing::Constant(c.f1.clone()),
                c.a11.clone(),
                c.a12.clone(),
                c.a21.clone(),
                c.b111.clone(),
                c.b112.clone(),
                c.b122.clone(),
                c.b211.clone(),
            )?;
            Ok(Fixture::Climate(Arc::new(cm)))
        }
        ModelSpec::Abstract(a) => {
            let d = a.space.d();
            let forcing = match &a.forcing {
                Some(f) if f.len() != d => return Err(crate::error::shape_err("forcing", d, f.len())),
                Some(f) => Forcing::Constant(f.clone()),
                None => Forcing::zero(d),
            };
            let drift = PolynomialDrift {
                forcing,
                linear: a.linear.clone(),
                quadratic: a.quadratic.clone(),
            };
            let sigma = AffineDiffusion {
                constant: a.sigma.clone(),
                linear: a.sigma_linear.clone(),
            };
            Ok(Fixture::Abstract(AbstractModel::new(
                a.space.clone(),
                Arc::new(drift),
                Arc::new(sigma),
                a.beta.clone(),
            )?))
        }
    }
}

fn resolve(mut spec: ScenarioSpec) -> Result<Scenario> {
    let fixture = build_model(&spec.model)?;
    spec.ladder.validate()?;
    let x0 = spec.config.x0.clone().unwrap_or_else(|| fixture.default_x0());
    spec.config.x0 = Some(x0.clone());
    let mut config = ExperimentConfig::new(spec.config.t_end, x0, spec.ladder.epsilons[0]);
    config.delta = spec.config.delta;
    config.radius = spec.config.radius;
    if let Some(c) = spec.config.substep_c {
        config.substep = SubstepRule::new(c)?;
    }
    config.validate()?;
    if config.x0.len() != fixture.space().d() {
        return Err(crate::error::shape_err("config.x0", fixture.space().d(), config.x0.len()));
    }

    if spec.kind != Kind::Validate {
        if let Fixture::Climate(cm) = &fixture {
            let v = validate_climate(cm);
            if !v.structure_pass() {
                return Err(Error::Assumption {
                    condition: "skew-symmetry (C1)-(C3)",
                    max_residual: v.c1.max(v.c2).max(v.c3),
                    residuals: vec![v.c1, v.c2, v.c3],
                });
            }
        }
        let model = fixture.to_abstract()?;
        let zm = validate_zero_mean(model.beta(), model.space().q())?;
        if !zm.pass {
            return Err(Error::Assumption {
                condition: "zero-mean condition (A5)",
                max_residual: zm.max_abs,
                residuals: zm.residual,
            });
        }
        if spec.kind == Kind::Strong && !model.beta().is_zero() {
            return Err(Error::Refused(
                "kind=strong needs beta = 0; use kind=weak for models with quadratic noise".into(),
            ));
        }
    }
    if spec.kind == Kind::CheckFormulas {
        let f = spec.formulas.clone().unwrap_or_default();
        let n = f.ou_epsilons.as_ref().map_or(spec.ladder.epsilons.len(), Vec::len);
        if n < 3 {
            return Err(cfg_err(
                "formulas.ou_epsilons",
                "the supremum regression needs at least 3 scales (set ladder.epsilons or formulas.ou_epsilons)",
            ));
        }
        let ratio = f.non_cauchy_ratio.unwrap_or(2.0);
        let eps = *spec.ladder.epsilons.last().expect("validated");
        if ratio * eps > 1.0 {
            return Err(cfg_err("formulas.non_cauchy_ratio", format!("ratio * eps = {} exceeds 1", ratio * eps)));
        }
    }
    Ok(Scenario { spec, fixture, config })
}

/// Reports of one run and their combined verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub verdict: Verdict,
    pub reports: Vec<StatReport>,
}

impl RunOutcome {
    /// 0 when every verdict passes, 2 when some are inconclusive and none
    /// fail, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Verdict::Pass => 0,
            Verdict::Inconclusive => 2,
            Verdict::Fail => 1,
        }
    }
}

/// Runs the experiments of a scenario on the current rayon pool.
pub fn execute(sc: &Scenario) -> Result<(RunOutcome, Vec<(String, String)>)> {
    let spec = &sc.spec;
    let stream = RngStream::derived(spec.seed, &[kind_label(spec.kind)]);
    let mut extra_files = Vec::new();
    let reports = match spec.kind {
        Kind::Validate => vec![structural_report(&sc.fixture)?],
        Kind::Strong => vec![strong_convergence(
            &sc.fixture,
            &spec.ladder,
            &sc.config,
            stream,
            StrongOptions::default(),
        )?],
        Kind::Weak => vec![weak_convergence(
            &sc.fixture,
            &spec.ladder,
            &sc.config,
            stream,
            WeakOptions::default(),
        )?],
        Kind::CheckFormulas => formula_battery(sc, stream)?,
        Kind::Simulate => {
            let (report, files) = simulate_ladder(sc, stream)?;
            extra_files = files;
            vec![report]
        }
    };
    let verdict = Verdict::all(reports.iter().map(|r| r.verdict));
    Ok((RunOutcome { verdict, reports }, extra_files))
}

fn kind_label(kind: Kind) -> u64 {
    match kind {
        Kind::Strong => 1,
        Kind::Weak => 2,
        Kind::CheckFormulas => 3,
        Kind::Simulate => 4,
        Kind::Validate => 5,
    }
}

fn formula_battery(sc: &Scenario, stream: RngStream) -> Result<Vec<StatReport>> {
    let spec = &sc.spec;
    let f = spec.formulas.clone().unwrap_or_default();
    let model = sc.fixture.to_abstract()?;
    let q = model.space().q().to_vec();
    let n = spec.ladder.replicas;
    let eps_last = *spec.ladder.epsilons.last().expect("validated");
    let t_end = sc.config.t_end;
    let case = f.cond_exp.unwrap_or(CondExpCase {
        delta: 0.5,
        epsilon: 0.5,
        l: 0,
        m: 0,
        y0: (0.0, 0.0),
    });
    let ou_eps = f.ou_epsilons.clone().unwrap_or_else(|| spec.ladder.epsilons.clone());
    let mut reports = vec![
        check_cond_exp(&q, &case, n, stream.child(1))?,
        check_u_moments(model.beta(), &q, t_end, eps_last, n, stream.child(2))?,
        check_ou_scaling(
            &q,
            &ou_eps,
            f.ou_p.unwrap_or(2.0),
            f.ou_t.unwrap_or(t_end),
            n,
            sc.config.substep,
            stream.child(3),
        )?,
        check_non_cauchy(
            model.beta(),
            &q,
            t_end,
            eps_last,
            f.non_cauchy_ratio.unwrap_or(2.0),
            n,
            stream.child(4),
        )?,
    ];
    reports.push(match &sc.fixture {
        Fixture::Climate(cm) => correction_discrepancy(cm),
        Fixture::Abstract(_) => StatReport {
            name: "correction_discrepancy".into(),
            verdict: Verdict::Pass,
            records: Vec::new(),
            notes: vec!["not applicable: the model has no climate structure".into()],
        },
    });
    Ok(reports)
}

/// One coupled pair of paths per scale, dumped as CSV.
fn simulate_ladder(sc: &Scenario, stream: RngStream) -> Result<(StatReport, Vec<(String, String)>)> {
    let model = sc.fixture.to_abstract()?;
    let q = model.space().q().to_vec();
    let rm = build_reduced(model)?;
    let mut records = Vec::new();
    let mut files = Vec::new();
    for (k, &eps) in sc.spec.ladder.epsilons.iter().enumerate() {
        let cfg = sc.config.with_epsilon(eps);
        let base = stream.child(k as u64);
        let (plan, noise) = noise_for(&cfg, &q, &mut base.child(0).rng())?;
        let fast = match &sc.fixture {
            Fixture::Climate(cm) => simulate_coupled_climate(cm, &cfg, &noise)?.0,
            Fixture::Abstract(m) => simulate_fast_slow(m, &cfg, &noise)?,
        };
        let coarse = noise.increments().aggregate(plan.substeps)?;
        let red = simulate_reduced(&rm, &cfg, &coarse, &mut base.child(1).rng())?;
        let stopped = usize::from(fast.is_stopped()) + usize::from(red.is_stopped());
        let v = if stopped > 0 { Verdict::Inconclusive } else { Verdict::Pass };
        let dist = fast.sup_distance(&red).unwrap_or(f64::NAN);
        let mut rec = StatRecord::new("sup_distance", Some(eps), dist, 0.0, 1);
        rec.stopped = stopped;
        rec.verdict = v;
        records.push(rec);
        for (label, path) in [("fast", &fast), ("reduced", &red)] {
            let mut buf = Vec::new();
            path.write_csv(&mut buf).map_err(|e| cfg_err("output", e.to_string()))?;
            files.push((
                format!("path_eps{eps}_{label}.csv"),
                String::from_utf8(buf).expect("csv is utf-8"),
            ));
        }
    }
    Ok((StatReport::from_records("simulate", records, Vec::new()), files))
}

/// Serialized `report.json` document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportDocument {
    pub seed: u64,
    pub scenario: ScenarioSpec,
    pub timestamp: u64,
    pub verdict: Verdict,
    pub reports: Vec<StatReport>,
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| Error::Io { path, source })
}

pub fn summary_text(doc: &ReportDocument) -> String {
    let mut s = format!(
        "scenario kind: {:?}\nseed: {}\nverdict: {}\n",
        doc.scenario.kind,
        doc.seed,
        doc.verdict.as_str()
    );
    for r in &doc.reports {
        s.push_str(&format!("\n[{}] {}\n", r.name, r.verdict.as_str()));
        for rec in &r.records {
            let eps = rec.epsilon.map(|e| format!(" eps={e}")).unwrap_or_default();
            let reference = rec.reference.map(|v| format!(" ref={v:.6e}")).unwrap_or_default();
            s.push_str(&format!(
                "  {:<28}{eps:<10} est={:.6e} se={:.3e} n={} stopped={}{reference}  {}\n",
                rec.name,
                rec.estimate,
                rec.se,
                rec.n,
                rec.stopped,
                rec.verdict.as_str()
            ));
        }
        for note in &r.notes {
            s.push_str(&format!("  note: {note}\n"));
        }
    }
    s
}

/// Runs a scenario and writes its artifacts into `out_dir` (created if
/// needed).
pub fn run(sc: &Scenario, out_dir: &Path) -> Result<RunOutcome> {
    let (outcome, files) = execute(sc)?;
    fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let doc = ReportDocument {
        seed: sc.spec.seed,
        scenario: sc.spec.clone(),
        timestamp,
        verdict: outcome.verdict,
        reports: outcome.reports.clone(),
    };
    write_file(out_dir, "report.json", serde_json::to_string_pretty(&doc)?.as_bytes())?;
    for r in &outcome.reports {
        let mut buf = Vec::new();
        r.write_csv(&mut buf).map_err(|source| Error::Io {
            path: out_dir.join(format!("{}.csv", r.name)),
            source,
        })?;
        write_file(out_dir, &format!("{}.csv", r.name), &buf)?;
    }
    for (name, contents) in &files {
        write_file(out_dir, name, contents.as_bytes())?;
    }
    write_file(out_dir, "summary.txt", summary_text(&doc).as_bytes())?;
    Ok(outcome)
}

/// Output directory: explicit argument, else the scenario's `output`, else
/// `./out`.
pub fn output_dir(sc: &Scenario, cli: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| sc.spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
