//! Fixed-seed battery of quick checks over every module.

use serde::Serialize;

use crate::error::Result;
use crate::flow::{nonneg_check_ii, POSITIVITY_TOL};
use crate::kakeya::{self, pi_frame, q_functional, AtomMap, MapFamily, QConfig, RatioConfig};
use crate::suite::{self, run_cases, NonnegTemplate};

pub const DEFAULT_SEED: u64 = 20240601;

/// Deliberate defects used to confirm that the battery can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    AdjugateSign,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SelftestReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl SelftestReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn check(name: &'static str, values: &[f64], tolerance: f64) -> CheckResult {
    let worst = values.iter().fold(0.0f64, |w, &v| if v.is_nan() { f64::INFINITY } else { w.max(v) });
    CheckResult { name, cases: values.len(), worst, tolerance, pass: worst <= tolerance }
}

fn slab(d: usize, j: usize) -> Result<MapFamily> {
    MapFamily::new(vec![AtomMap::affine(pi_frame(d, j), vec![0.0; d - 1], 1.0)?])
}

pub fn run(seed: u64, fault: Option<Fault>) -> Result<SelftestReport> {
    let flip = fault == Some(Fault::AdjugateSign);
    let mut checks = Vec::new();

    let oracle = run_cases(seed, 40, suite::oracle_case)?;
    checks.push(check("oracle_equivalence", &oracle.iter().map(|c| c.rel_error).collect::<Vec<_>>(), 1e-12));

    let ids = run_cases(seed ^ 1, 60, suite::identity_case)?;
    checks.push(check("closed_form_identities", &ids.iter().map(|c| c.max()).collect::<Vec<_>>(), 1e-12));

    let quartic = run_cases(seed ^ 2, 20, suite::quartic_case)?;
    checks.push(check("quartic_closed_form", &quartic.iter().map(|c| c.rel_error).collect::<Vec<_>>(), 1e-12));
    checks.push(check("quartic_counterexample", &[(suite::quartic_counterexample()? + 0.25).abs()], 1e-14));

    let adj2 = run_cases(seed ^ 3, 3, |r| suite::adjugate_case(r, 2, 5, flip))?;
    checks.push(check("adjugate_2x2", &adj2.iter().map(|c| c.worst).collect::<Vec<_>>(), 1e-10));
    let adj3 = run_cases(seed ^ 4, 3, |r| suite::adjugate_case(r, 3, 5, flip))?;
    checks.push(check("adjugate_3x3", &adj3.iter().map(|c| c.worst).collect::<Vec<_>>(), 1e-10));

    let derivs = run_cases(seed ^ 5, 10, suite::derivative_case)?;
    checks.push(check("time_derivative", &derivs.iter().map(|c| c.fixed.max(c.moving)).collect::<Vec<_>>(), 1e-6));

    let template = NonnegTemplate::random(&mut suite::case_rng(seed ^ 6, 0), 2, 3);
    let inst = template.instance(1.5, 0.01, 0.05, 4.0)?;
    let null = run_cases(seed ^ 7, 5, |r| suite::null_direction_case(r, &inst))?;
    checks.push(check("null_direction", &null, POSITIVITY_TOL));
    let mut rng = suite::case_rng(seed ^ 8, 0);
    let samples: Vec<_> = (0..20).map(|_| suite::random_row_field(&mut rng, &inst)).collect();
    let pos = nonneg_check_ii(&inst, &samples)?;
    checks.push(check("positivity", &[(-pos.min_normalized).max(0.0)], POSITIVITY_TOL));

    let cfg = QConfig::new(vec![slab(2, 0)?, slab(2, 1)?], 1.0)?;
    let lw = q_functional(&cfg, 1.0)?;
    checks.push(check("gaussian_pi", &[(lw.value - std::f64::consts::PI).abs()], 1e-10));

    let rcfg = RatioConfig::new(1.0, vec![-1.0, -1.0], vec![1.0, 1.0]);
    let r = kakeya::kakeya_ratio(&[slab(2, 0)?, slab(2, 1)?], 0.0625, &rcfg)?;
    checks.push(check("crossing_slabs", &[(r.ratio - 4.0).abs()], 1e-12));

    let pass = checks.iter().all(|c| c.pass);
    Ok(SelftestReport { seed, checks, pass })
}
