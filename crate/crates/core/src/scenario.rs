//! Scenario files (schema version 1): parsing, dispatch and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{hypothesis_margin, nonneg_check_ii, residual_ladder, POSITIVITY_TOL};
use crate::kakeya::{
    self, curved_axiom_check, frame_hypothesis, q_scan, s0_check, AtomMap, CurvedMapFamily, Cutoff, MapFamily, QConfig,
    RatioConfig, Spacing, Tube, TubeFamily,
};
use crate::measure::{Atom, DiscreteMeasure, MeasureTuple};
use crate::suite::{self, run_cases, NonnegTemplate};
use crate::valgebra::{integrate, integrate_bruteforce, ExponentVec, FnId, Registry, VirtualFn};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Integrate,
    Identities,
    Nonneg,
    Flowcheck,
    KakeyaQ,
    KakeyaRatio,
    CurvedCheck,
}

impl Kind {
    fn section(self) -> &'static str {
        match self {
            Kind::Integrate => "integrate",
            Kind::Identities => "identities",
            Kind::Nonneg => "nonneg",
            Kind::Flowcheck => "flowcheck",
            Kind::KakeyaQ => "kakeya",
            Kind::KakeyaRatio => "ratio",
            Kind::CurvedCheck => "curved",
        }
    }

    fn randomized(self) -> bool {
        matches!(self, Kind::Identities | Kind::Nonneg | Kind::Flowcheck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub kind: Kind,
    pub seed: Option<u64>,
    pub output: Option<OutputSpec>,
    pub integrate: Option<IntegrateSpec>,
    pub identities: Option<IdentitiesSpec>,
    pub nonneg: Option<NonnegSpec>,
    pub flowcheck: Option<FlowcheckSpec>,
    pub kakeya: Option<KakeyaSpec>,
    pub ratio: Option<RatioSpec>,
    pub curved: Option<CurvedSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub coeff: f64,
    #[serde(default)]
    pub factors: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub label: String,
    pub mass: f64,
    pub payload: Option<Vec<f64>>,
}

/// A space as a bare mass list or as labelled atoms.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SpaceSpec {
    Masses(Vec<f64>),
    Atoms { atoms: Vec<AtomSpec> },
}

impl SpaceSpec {
    fn measure(&self) -> Result<DiscreteMeasure> {
        match self {
            SpaceSpec::Masses(m) => DiscreteMeasure::from_masses(m),
            SpaceSpec::Atoms { atoms } => DiscreteMeasure::new(
                atoms
                    .iter()
                    .map(|a| {
                        let atom = Atom::new(a.label.clone(), a.mass);
                        match &a.payload {
                            Some(p) => atom.with_payload(p.clone()),
                            None => atom,
                        }
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateSpec {
    pub spaces: Vec<SpaceSpec>,
    pub p: Vec<f64>,
    /// Named functions on the disjoint union, one value list per space.
    #[serde(default)]
    pub functions: BTreeMap<String, Vec<Vec<f64>>>,
    /// Sum of `coeff * prod Sigma(factor)`.
    pub integrand: Vec<TermSpec>,
    #[serde(default)]
    pub bruteforce: bool,
    pub expected: Option<f64>,
    #[serde(default)]
    pub expected_negative: bool,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitiesSpec {
    #[serde(default = "default_identity_cases")]
    pub cases: usize,
    #[serde(default = "default_oracle_cases")]
    pub oracle_cases: usize,
    #[serde(default = "default_quartic_cases")]
    pub quartic_cases: usize,
    #[serde(default = "default_adjugate_cases")]
    pub adjugate_cases: usize,
}

fn default_identity_cases() -> usize {
    200
}
fn default_oracle_cases() -> usize {
    100
}
fn default_quartic_cases() -> usize {
    50
}
fn default_adjugate_cases() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonnegSpec {
    pub d: usize,
    pub p: f64,
    pub eps: f64,
    pub kappa: f64,
    pub bound: f64,
    #[serde(default = "default_atoms")]
    pub atoms: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_eps_ladder")]
    pub eps_ladder: Vec<f64>,
}

fn default_atoms() -> usize {
    3
}
fn default_samples() -> usize {
    100
}
fn default_eps_ladder() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4, 1e-5]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowcheckSpec {
    #[serde(default = "default_families")]
    pub families: usize,
}

fn default_families() -> usize {
    50
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSpec {
    pub direction: Vec<f64>,
    pub offset: Vec<f64>,
    #[serde(default = "one")]
    pub mass: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    /// `d` rows of length `d - 1`.
    pub b: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// One symmetric `d x d` matrix per output component.
    pub hessians: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default = "one")]
    pub mass: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum FamilySpec {
    Tubes { tubes: Vec<TubeSpec> },
    Maps { maps: Vec<MapSpec> },
}

/// `"d_over_p"` or a number.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ExponentSpec {
    Value(f64),
    Named(String),
}

impl ExponentSpec {
    fn resolve(&self, d: usize, p: f64, field: &str) -> Result<f64> {
        match self {
            ExponentSpec::Value(v) => Ok(*v),
            ExponentSpec::Named(s) if s == "d_over_p" => Ok(d as f64 / p),
            ExponentSpec::Named(s) => Err(Error::Config(format!("{field}: expected a number or \"d_over_p\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CutoffSpec {
    Named(String),
    Bump { bump: BumpSpec },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

/// `"t_over_K"` or a fixed number.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SpacingSpec {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub h: SpacingSpec,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1e-16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedValue {
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KakeyaSpec {
    pub d: usize,
    pub p: f64,
    pub alpha: ExponentSpec,
    pub cutoff: CutoffSpec,
    pub families: Vec<FamilySpec>,
    pub t_ladder: LadderSpec,
    pub grid: GridSpec,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Every `Q(t)` must lie within `tolerance` of `value`.
    pub expected_q: Option<ExpectedValue>,
}

fn default_kappa() -> f64 {
    0.05
}
fn default_bound() -> f64 {
    4.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DyadicSpec {
    pub from: i32,
    pub to: i32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioSpec {
    pub d: usize,
    pub p: f64,
    pub exponent: ExponentSpec,
    pub families: Vec<FamilySpec>,
    /// `delta = 2^-k` for `k` in `from..=to`.
    pub deltas: DyadicSpec,
    #[serde(rename = "box")]
    pub region: BoxSpec,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    /// Largest allowed per-halving drift; checked only when given.
    pub max_drift: Option<f64>,
    pub expected_ratio: Option<ExpectedValue>,
}

fn default_spacing() -> f64 {
    0.125
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvedSpec {
    pub families: Vec<FamilySpec>,
    pub bound: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "default_samples_per_axis")]
    pub samples_per_axis: usize,
}

fn default_samples_per_axis() -> usize {
    5
}

/// The rendered report and whether every mathematical contract held.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: String,
    pub format: Format,
    pub path: Option<PathBuf>,
    pub contracts_held: bool,
}

/// Parse and validate a scenario; serde errors carry line and column.
pub fn parse(text: &str) -> Result<Scenario> {
    let sc: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
    if sc.version != SCHEMA_VERSION {
        return Err(Error::Config(format!("version: expected {SCHEMA_VERSION}, got {}", sc.version)));
    }
    let present: Vec<&str> = [
        ("integrate", sc.integrate.is_some()),
        ("identities", sc.identities.is_some()),
        ("nonneg", sc.nonneg.is_some()),
        ("flowcheck", sc.flowcheck.is_some()),
        ("kakeya", sc.kakeya.is_some()),
        ("ratio", sc.ratio.is_some()),
        ("curved", sc.curved.is_some()),
    ]
    .into_iter()
    .filter_map(|(k, on)| on.then_some(k))
    .collect();
    let want = sc.kind.section();
    if present != [want] {
        return Err(Error::Config(format!("kind {:?} needs exactly the section \"{want}\", found {present:?}", sc.kind)));
    }
    if sc.kind.randomized() && sc.seed.is_none() {
        return Err(Error::Config(format!("seed: required for kind {:?}", sc.kind)));
    }
    Ok(sc)
}

/// Shortest round-trip form, switching to exponent notation for very small or large values.
fn num(v: f64) -> String {
    if v != 0.0 && v.is_finite() && !(1e-4..1e16).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// `key,value` lines for flat reports written as CSV.
fn flat_csv(v: &serde_json::Value) -> String {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, x) in m {
                    walk(&if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }, x, out);
                }
            }
            serde_json::Value::Array(a) => {
                for (i, x) in a.iter().enumerate() {
                    walk(&format!("{prefix}.{i}"), x, out);
                }
            }
            other => {
                let _ = writeln!(out, "{prefix},{other}");
            }
        }
    }
    let mut out = String::from("key,value\n");
    walk("", v, &mut out);
    out
}

fn render<T: Serialize>(report: &T, format: Format) -> String {
    match format {
        Format::Json => to_json(report),
        Format::Csv => flat_csv(&serde_json::to_value(report).expect("report serializes")),
    }
}

/// Run a parsed scenario.
pub fn run(sc: &Scenario) -> Result<Outcome> {
    let default_format = if matches!(sc.kind, Kind::KakeyaQ | Kind::KakeyaRatio) { Format::Csv } else { Format::Json };
    let format = sc.output.as_ref().and_then(|o| o.format).unwrap_or(default_format);
    let path = sc.output.as_ref().and_then(|o| o.path.clone());
    let seed = sc.seed.unwrap_or(0);
    let (report, contracts_held) = match sc.kind {
        Kind::Integrate => run_integrate(sc.integrate.as_ref().expect("validated"), format)?,
        Kind::Identities => run_identities(sc.identities.as_ref().expect("validated"), seed, format)?,
        Kind::Nonneg => run_nonneg(sc.nonneg.as_ref().expect("validated"), seed, format)?,
        Kind::Flowcheck => run_flowcheck(sc.flowcheck.as_ref().expect("validated"), seed, format)?,
        Kind::KakeyaQ => run_kakeya_q(sc.kakeya.as_ref().expect("validated"), format)?,
        Kind::KakeyaRatio => run_ratio(sc.ratio.as_ref().expect("validated"), format)?,
        Kind::CurvedCheck => run_curved(sc.curved.as_ref().expect("validated"), format)?,
    };
    Ok(Outcome { report, format, path, contracts_held })
}

/// Parse and run scenario text.
pub fn run_text(text: &str) -> Result<Outcome> {
    run(&parse(text)?)
}

#[derive(Serialize)]
struct IntegrateReport {
    kind: Kind,
    value: f64,
    bruteforce: Option<f64>,
    expected: Option<f64>,
    negative: bool,
    expected_negative: bool,
    contracts_held: bool,
}

fn run_integrate(spec: &IntegrateSpec, format: Format) -> Result<(String, bool)> {
    let spaces = spec.spaces.iter().enumerate().map(|(j, sp)| sp.measure().map_err(|e| Error::Config(format!("integrate.spaces.{j}: {e}"))));
    let tuple = MeasureTuple::new(spaces.collect::<Result<_>>()?)?;
    let p = ExponentVec::new(spec.p.clone())?;
    let mut reg = Registry::for_tuple(&tuple);
    let mut names: BTreeMap<&str, FnId> = BTreeMap::new();
    for (name, values) in &spec.functions {
        let id = reg.insert_values(values.clone()).map_err(|e| Error::Config(format!("functions.{name}: {e}")))?;
        names.insert(name, id);
    }
    let mut f = VirtualFn::zero();
    for (k, term) in spec.integrand.iter().enumerate() {
        let mut mono = VirtualFn::constant(term.coeff);
        for name in &term.factors {
            let id = names.get(name.as_str()).ok_or_else(|| Error::Config(format!("integrand.{k}: unknown function {name:?}")))?;
            mono = &mono * &reg.sigma(*id)?;
        }
        f = &f + &mono;
    }
    let tol = spec.tolerance.unwrap_or(1e-12);
    let value = integrate(&f, &reg, &tuple, &p)?;
    let bruteforce = if spec.bruteforce { Some(integrate_bruteforce(&f, &reg, &tuple, &p)?) } else { None };
    let mut held = true;
    if let Some(b) = bruteforce {
        held &= suite::scaled_error(value, b, 0.0) <= tol;
    }
    if let Some(e) = spec.expected {
        held &= (value - e).abs() <= tol * e.abs().max(1.0);
    }
    if spec.expected_negative {
        held &= value < 0.0;
    }
    let report = IntegrateReport {
        kind: Kind::Integrate,
        value,
        bruteforce,
        expected: spec.expected,
        negative: value < 0.0,
        expected_negative: spec.expected_negative,
        contracts_held: held,
    };
    Ok((render(&report, format), held))
}

#[derive(Serialize)]
struct Check {
    name: String,
    cases: usize,
    worst: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn new(name: &str, values: impl IntoIterator<Item = f64>, tolerance: f64) -> Self {
        let mut cases = 0;
        let mut worst: f64 = 0.0;
        for v in values {
            cases += 1;
            worst = if v.is_nan() { f64::INFINITY } else { worst.max(v) };
        }
        Check { name: name.into(), cases, worst, tolerance, pass: worst <= tolerance }
    }
}

#[derive(Serialize)]
struct ChecksReport {
    kind: Kind,
    seed: u64,
    checks: Vec<Check>,
    contracts_held: bool,
}

fn checks_report(kind: Kind, seed: u64, checks: Vec<Check>, format: Format) -> (String, bool) {
    let held = checks.iter().all(|c| c.pass);
    (render(&ChecksReport { kind, seed, checks, contracts_held: held }, format), held)
}

fn run_identities(spec: &IdentitiesSpec, seed: u64, format: Format) -> Result<(String, bool)> {
    let ids = run_cases(seed, spec.cases, suite::identity_case)?;
    let oracle = run_cases(seed ^ 0x0a, spec.oracle_cases, suite::oracle_case)?;
    let quartic = run_cases(seed ^ 0x0b, spec.quartic_cases, suite::quartic_case)?;
    let adj2 = run_cases(seed ^ 0x0c, spec.adjugate_cases, |r| suite::adjugate_case(r, 2, 10, false))?;
    let adj3 = run_cases(seed ^ 0x0d, spec.adjugate_cases, |r| suite::adjugate_case(r, 3, 10, false))?;
    let checks = vec![
        Check::new("unit_integral", ids.iter().map(|c| c.unit), 1e-12),
        Check::new("linear_closed_form", ids.iter().map(|c| c.linear), 1e-12),
        Check::new("bilinear_closed_form", ids.iter().map(|c| c.bilinear), 1e-12),
        Check::new("three_sum_expansion", ids.iter().map(|c| c.three_sum), 1e-12),
        Check::new("oracle_equivalence", oracle.iter().map(|c| c.rel_error), 1e-12),
        Check::new("quartic_closed_form", quartic.iter().map(|c| c.rel_error), 1e-12),
        Check::new("quartic_counterexample", [(suite::quartic_counterexample()? + 0.25).abs()], 1e-14),
        Check::new("adjugate_law", adj2.iter().chain(&adj3).map(|c| c.worst), 1e-10),
    ];
    Ok(checks_report(Kind::Identities, seed, checks, format))
}

#[derive(Serialize)]
struct NonnegReport {
    kind: Kind,
    seed: u64,
    /// `(eps, residual, residual / eps)`.
    residual_ladder: Vec<(f64, f64, f64)>,
    residual_drift: f64,
    margins: Vec<f64>,
    threshold: f64,
    hypothesis: bool,
    min_normalized: f64,
    violations: usize,
    null_direction_worst: f64,
    contracts_held: bool,
}

fn run_nonneg(spec: &NonnegSpec, seed: u64, format: Format) -> Result<(String, bool)> {
    if spec.d < 2 {
        return Err(Error::Config("nonneg.d: must be at least 2".into()));
    }
    let template = NonnegTemplate::random(&mut suite::case_rng(seed, 0), spec.d, spec.atoms);
    let ladder = residual_ladder(|e| template.instance(spec.p, e, spec.kappa, spec.bound), &spec.eps_ladder)?;
    let inst = template.instance(spec.p, spec.eps, spec.kappa, spec.bound)?;
    let margin = hypothesis_margin(&inst)?;
    let mut rng = suite::case_rng(seed, 1);
    let samples: Vec<_> = (0..spec.samples).map(|_| suite::random_row_field(&mut rng, &inst)).collect();
    let pos = nonneg_check_ii(&inst, &samples)?;
    let null = run_cases(seed ^ 0x0e, 10, |r| suite::null_direction_case(r, &inst))?;
    let null_worst = null.iter().copied().fold(0.0, f64::max);
    let held = ladder.pass && pos.contract_holds && null_worst <= POSITIVITY_TOL;
    let report = NonnegReport {
        kind: Kind::Nonneg,
        seed,
        residual_ladder: ladder.rows,
        residual_drift: ladder.max_drift,
        margins: margin.margins,
        threshold: margin.threshold,
        hypothesis: margin.pass,
        min_normalized: pos.min_normalized,
        violations: pos.violations.len(),
        null_direction_worst: null_worst,
        contracts_held: held,
    };
    Ok((render(&report, format), held))
}

fn run_flowcheck(spec: &FlowcheckSpec, seed: u64, format: Format) -> Result<(String, bool)> {
    let cases = run_cases(seed, spec.families, suite::derivative_case)?;
    let checks = vec![
        Check::new("fixed_integrand", cases.iter().map(|c| c.fixed), 1e-6),
        Check::new("moving_integrand", cases.iter().map(|c| c.moving), 1e-6),
    ];
    Ok(checks_report(Kind::Flowcheck, seed, checks, format))
}

fn matrix_rows(rows: &[Vec<f64>], r: usize, c: usize, field: &str) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{field}: expected a {r}x{c} matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn build_families(specs: &[FamilySpec], d: usize, field: &str) -> Result<Vec<MapFamily>> {
    if specs.len() != d {
        return Err(Error::Config(format!("{field}: {} families for d = {d}", specs.len())));
    }
    specs
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let at = |k: usize| format!("{field}.{j}.{k}");
            match spec {
                FamilySpec::Tubes { tubes } => {
                    let mut out = Vec::with_capacity(tubes.len());
                    for (k, t) in tubes.iter().enumerate() {
                        let norm = t.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if t.direction.len() != d || (norm - 1.0).abs() > 1e-12 {
                            return Err(Error::Config(format!("{}: direction must be a unit vector in R^{d}", at(k))));
                        }
                        if t.offset.len() != d - 1 {
                            return Err(Error::Config(format!("{}: offset must have length {}", at(k), d - 1)));
                        }
                        out.push(Tube { direction: t.direction.clone(), offset: t.offset.clone(), mass: t.mass });
                    }
                    TubeFamily { tubes: out }.to_maps().map_err(|e| Error::Config(format!("{field}.{j}: {e}")))
                }
                FamilySpec::Maps { maps } => {
                    let atoms = maps
                        .iter()
                        .enumerate()
                        .map(|(k, m)| {
                            let b = matrix_rows(&m.b, d, d - 1, &format!("{}.b", at(k)))?;
                            let hs = match &m.hessians {
                                Some(hs) => Some(
                                    hs.iter()
                                        .map(|h| matrix_rows(h, d, d, &format!("{}.hessians", at(k))))
                                        .collect::<Result<Vec<_>>>()?,
                                ),
                                None => None,
                            };
                            AtomMap::new(b, m.v.clone(), hs, m.mass).map_err(|e| Error::Config(format!("{}: {e}", at(k))))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    MapFamily::new(atoms).map_err(|e| Error::Config(format!("{field}.{j}: {e}")))
                }
            }
        })
        .collect()
}

fn parse_spacing(spec: &SpacingSpec) -> Result<Spacing> {
    match spec {
        SpacingSpec::Fixed(h) => Ok(Spacing::Fixed(*h)),
        SpacingSpec::Named(s) => s
            .strip_prefix("t_over_")
            .and_then(|k| k.parse::<f64>().ok())
            .filter(|k| *k > 0.0)
            .map(Spacing::PerT)
            .ok_or_else(|| Error::Config(format!("grid.h: expected a number or \"t_over_K\", got {s:?}"))),
    }
}

#[derive(Serialize)]
struct QRow {
    t: f64,
    q: f64,
    quad_err: f64,
    coarse: bool,
    s0_min: f64,
    verdict: &'static str,
}

#[derive(Serialize)]
struct QReport {
    kind: Kind,
    rows: Vec<QRow>,
    monotone: bool,
    hypothesis: bool,
    s0_violations: usize,
    warnings: Vec<String>,
    contracts_held: bool,
}

fn run_kakeya_q(spec: &KakeyaSpec, format: Format) -> Result<(String, bool)> {
    let d = spec.d;
    let families = build_families(&spec.families, d, "kakeya.families")?;
    let mut cfg = QConfig::new(families, spec.p).map_err(|e| Error::Config(format!("kakeya: {e}")))?;
    cfg.alpha = spec.alpha.resolve(d, spec.p, "kakeya.alpha")?;
    cfg.cutoff = match &spec.cutoff {
        CutoffSpec::Named(s) if s == "global" => Cutoff::Global,
        CutoffSpec::Named(s) => return Err(Error::Config(format!("kakeya.cutoff: unknown mode {s:?}"))),
        CutoffSpec::Bump { bump } => Cutoff::Bump { center: bump.center.clone(), radius: bump.radius },
    };
    cfg.spacing = parse_spacing(&spec.grid.h)?;
    cfg.tau = spec.grid.tau;
    cfg.validate().map_err(|e| Error::Config(format!("kakeya: {e}")))?;
    let ladder = kakeya::geometric_ladder(spec.t_ladder.from, spec.t_ladder.to, spec.t_ladder.points)?;

    let scan = q_scan(&cfg, &ladder)?;
    let hypothesis = cfg.is_affine() && frame_hypothesis(&cfg, spec.kappa, spec.bound).is_ok_and(|(m, _)| m.pass);
    // S_0 at the centres of the Gaussian products and at offsets of one t along the axes
    let centers = s0_centers(&cfg)?;
    let mut rows = Vec::with_capacity(ladder.len());
    let mut s0_violations = 0;
    for (k, row) in scan.rows.iter().enumerate() {
        let samples: Vec<(f64, Vec<f64>)> = centers
            .iter()
            .flat_map(|c| offsets(d).into_iter().map(move |o| (row.t, c.iter().zip(&o).map(|(a, b)| a + b * row.t).collect())))
            .collect();
        let s0 = s0_check(&cfg, &samples)?;
        s0_violations += s0.violations.len();
        let step_ok = !scan.violations.contains(&k.wrapping_sub(1));
        let ok = step_ok && s0.violations.is_empty() && spec.expected_q.as_ref().is_none_or(|e| (row.value - e.value).abs() <= e.tolerance);
        rows.push(QRow {
            t: row.t,
            q: row.value,
            quad_err: row.quad_err,
            coarse: row.coarse,
            s0_min: s0.min_normalized,
            verdict: if ok { "PASS" } else { "FAIL" },
        });
    }
    let exact_case = matches!(cfg.cutoff, Cutoff::Global) && (cfg.alpha - d as f64 / spec.p).abs() < 1e-12;
    let expected_ok = spec.expected_q.as_ref().is_none_or(|e| rows.iter().all(|r| (r.q - e.value).abs() <= e.tolerance));
    let held = expected_ok && !(hypothesis && (s0_violations > 0 || (exact_case && !scan.pass)));
    let report = QReport {
        kind: Kind::KakeyaQ,
        rows,
        monotone: scan.pass,
        hypothesis,
        s0_violations,
        warnings: cfg.warnings(),
        contracts_held: held,
    };
    let text = match format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut s = String::from("t,Q,quad_err,s0_min,verdict\n");
            for r in &report.rows {
                let _ = writeln!(s, "{},{},{},{},{}", num(r.t), num(r.q), num(r.quad_err), num(r.s0_min), r.verdict);
            }
            s
        }
    };
    Ok((text, held))
}

fn s0_centers(cfg: &QConfig) -> Result<Vec<Vec<f64>>> {
    match &cfg.cutoff {
        Cutoff::Bump { center, .. } => Ok(vec![center.clone()]),
        Cutoff::Global => kakeya::combo_centers(cfg),
    }
}

/// `{-1, 0, 1}^d`.
fn offsets(d: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        out = out.into_iter().flat_map(|v| [-1.0, 0.0, 1.0].map(|s| [v.clone(), vec![s]].concat())).collect();
    }
    out
}

#[derive(Serialize)]
struct RatioRow {
    delta: f64,
    ratio: f64,
    integral: f64,
    points: usize,
    clipped: bool,
}

#[derive(Serialize)]
struct RatioScenarioReport {
    kind: Kind,
    exponent: f64,
    rows: Vec<RatioRow>,
    max_drift: f64,
    monotone: bool,
    contracts_held: bool,
}

fn run_ratio(spec: &RatioSpec, format: Format) -> Result<(String, bool)> {
    let d = spec.d;
    let families = build_families(&spec.families, d, "ratio.families")?;
    let mut cfg = RatioConfig::new(spec.p, spec.region.lower.clone(), spec.region.upper.clone());
    cfg.exponent = Some(spec.exponent.resolve(d, spec.p, "ratio.exponent")?);
    cfg.spacing = spec.spacing;
    let deltas = kakeya::dyadic_ladder(spec.deltas.from, spec.deltas.to);
    let ladder = kakeya::ratio_ladder(&families, &deltas, &cfg)?;
    let drift_ok = spec.max_drift.is_none_or(|m| ladder.stable(m));
    let expected_ok = spec
        .expected_ratio
        .as_ref()
        .is_none_or(|e| ladder.rows.iter().all(|r| (r.ratio - e.value).abs() <= e.tolerance));
    let held = drift_ok && expected_ok;
    let rows: Vec<RatioRow> = ladder
        .rows
        .iter()
        .map(|r| RatioRow { delta: r.delta, ratio: r.ratio, integral: r.integral, points: r.points, clipped: r.clipped })
        .collect();
    let report = RatioScenarioReport {
        kind: Kind::KakeyaRatio,
        exponent: cfg.exponent.expect("set above"),
        rows,
        max_drift: ladder.max_drift,
        monotone: ladder.monotone,
        contracts_held: held,
    };
    let text = match format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut s = String::from("delta,ratio,integral,points,clipped\n");
            for r in &report.rows {
                let _ = writeln!(s, "{},{},{},{},{}", num(r.delta), num(r.ratio), num(r.integral), r.points, r.clipped);
            }
            s
        }
    };
    Ok((text, held))
}

#[derive(Serialize)]
struct CurvedReport {
    kind: Kind,
    max_first_derivative: f64,
    max_second_derivative: f64,
    regularity: bool,
    singular_range: (f64, f64),
    submersion: bool,
    min_wedge: f64,
    transversality: bool,
    samples: usize,
}

fn run_curved(spec: &CurvedSpec, format: Format) -> Result<(String, bool)> {
    let d = spec.center.len();
    let families = build_families(&spec.families, d, "curved.families")?;
    let fam = CurvedMapFamily {
        families,
        bound: spec.bound,
        center: spec.center.clone(),
        radius: spec.radius,
        samples_per_axis: spec.samples_per_axis,
    };
    let r = curved_axiom_check(&fam)?;
    let report = CurvedReport {
        kind: Kind::CurvedCheck,
        max_first_derivative: r.max_first_derivative,
        max_second_derivative: r.max_second_derivative,
        regularity: r.regularity,
        singular_range: r.singular_range,
        submersion: r.submersion,
        min_wedge: r.min_wedge,
        transversality: r.transversality,
        samples: r.samples,
    };
    // axiom outcomes are findings about the input, not contracts
    Ok((render(&report, format), true))
}
