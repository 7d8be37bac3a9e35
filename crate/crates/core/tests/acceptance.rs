//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances are pinned below.
//!
//! Runs without the libtest harness so the lines always reach the terminal.
//! The process fails when an attainable criterion fails; see `KNOWN_UNATTAINABLE`.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use virtint::flow::{nonneg_check_ii, residual_ladder, POSITIVITY_TOL};
use virtint::kakeya::{
    dyadic_ladder, geometric_ladder, kakeya_ratio, q_scan, ratio_ladder, s0_check, s0_integral, s0_sample_points, MapFamily, QConfig,
    RatioConfig, Spacing, Tube, TubeFamily,
};
use virtint::scenario;
use virtint::selftest;
use virtint::suite::{self, case_rng, run_cases, NonnegTemplate};

const SEED: u64 = 0x5eed_a11c;

const ORACLE_CASES: usize = 1000;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_CASES: usize = 200;
const IDENTITY_TOL: f64 = 1e-12;
const QUARTIC_CASES: usize = 50;
const QUARTIC_TOL: f64 = 1e-12;
const COUNTEREXAMPLE_TOL: f64 = 1e-14;
const ADJUGATE_MATRICES: usize = 5;
const ADJUGATE_TUPLES: usize = 10;
const ADJUGATE_TOL: f64 = 1e-10;
const DECADE_DRIFT: f64 = 2.0;
const NONNEG_SAMPLES: usize = 100;
const KAPPA: f64 = 0.05;
const BOUND: f64 = 4.0;
const DERIVATIVE_FAMILIES: usize = 50;
const DERIVATIVE_TOL: f64 = 1e-6;
const LW_TOL: f64 = 1e-4;
const SCAN_INSTANCES: usize = 20;
const SCAN_POINTS: usize = 16;
const SCAN_BUDGET: Duration = Duration::from_secs(600);
const S0_SAMPLES: usize = 100;
const S0_SINGLE_ATOM_TOL: f64 = 1e-12;
const RATIO_DRIFT: f64 = 1.5;
const RATIO_SHIFT: f64 = 0.2;
const SLABS_REL: f64 = 0.02;

/// Sub-checks that cannot pass as stated. They print FAIL but do not fail the process.
const KNOWN_UNATTAINABLE: &[&str] = &["9b"];

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: &'static str, name: &'static str, pass: bool, detail: String) {
    println!("criterion {id:<3} {:<4} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, name, pass, detail });
}

fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |w, v| if v.is_nan() { f64::INFINITY } else { w.max(v) })
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `d` families of tubes pointing near the coordinate axes, masses normalized to 1 per family.
fn random_tubes(rng: &mut ChaCha8Rng, d: usize, max_tubes: usize, tilt: f64, spread: f64) -> Vec<MapFamily> {
    (0..d)
        .map(|j| {
            let n = rng.random_range(1..=max_tubes);
            let masses: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            let total: f64 = masses.iter().sum();
            let tubes = masses
                .iter()
                .map(|m| {
                    let dir = unit((0..d).map(|k| if k == j { 1.0 } else { rng.random_range(-tilt..tilt) }).collect());
                    let offset = (0..d - 1).map(|_| rng.random_range(-spread..spread)).collect();
                    Tube { direction: dir, offset, mass: m / total }
                })
                .collect();
            TubeFamily { tubes }.to_maps().expect("valid tubes")
        })
        .collect()
}

/// Tubes through a common point: every tube of family `j` contains the origin.
fn bush(rng: &mut ChaCha8Rng, d: usize, tubes: usize, tilt: f64) -> Vec<MapFamily> {
    (0..d)
        .map(|j| {
            let tubes = (0..tubes)
                .map(|_| Tube {
                    direction: unit((0..d).map(|k| if k == j { 1.0 } else { rng.random_range(-tilt..tilt) }).collect()),
                    offset: vec![0.0; d - 1],
                    mass: 1.0,
                })
                .collect();
            TubeFamily { tubes }.to_maps().expect("valid tubes")
        })
        .collect()
}

fn axis_slabs(d: usize) -> Vec<MapFamily> {
    (0..d)
        .map(|j| {
            let direction = (0..d).map(|k| if k == j { 1.0 } else { 0.0 }).collect();
            TubeFamily { tubes: vec![Tube { direction, offset: vec![0.0; d - 1], mass: 1.0 }] }.to_maps().expect("valid tubes")
        })
        .collect()
}

fn oracle(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let cases = run_cases(SEED, ORACLE_CASES, suite::oracle_case).expect("oracle cases run");
    let elapsed = start.elapsed();
    let w = worst(cases.iter().map(|c| c.rel_error));
    report(
        out,
        "1",
        "oracle equivalence",
        w <= ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!("{ORACLE_CASES} cases, worst rel {w:.2e} (tol {ORACLE_TOL:e}), {:.1} s (budget {} s)", elapsed.as_secs_f64(), ORACLE_BUDGET.as_secs()),
    );
}

fn identities(out: &mut Vec<Outcome>) {
    let cases = run_cases(SEED ^ 2, IDENTITY_CASES, suite::identity_case).expect("identity cases run");
    let w = worst(cases.iter().map(|c| c.max()));
    report(out, "2", "closed-form identities", w <= IDENTITY_TOL, format!("{IDENTITY_CASES} cases, worst rel {w:.2e} (tol {IDENTITY_TOL:e})"));
}

fn quartic(out: &mut Vec<Outcome>) {
    let cases = run_cases(SEED ^ 3, QUARTIC_CASES, suite::quartic_case).expect("quartic cases run");
    let w = worst(cases.iter().map(|c| c.rel_error));
    let v = suite::quartic_counterexample().expect("counterexample runs");
    let pass = w <= QUARTIC_TOL && (v + 0.25).abs() <= COUNTEREXAMPLE_TOL;
    report(out, "3", "quartic identity and negativity", pass, format!("{QUARTIC_CASES} cases, worst rel {w:.2e}; f = +-1, p = 0.5 gives {v}"));
}

fn adjugate(out: &mut Vec<Outcome>) {
    let a2 = run_cases(SEED ^ 4, ADJUGATE_MATRICES, |r| suite::adjugate_case(r, 2, ADJUGATE_TUPLES, false)).expect("2x2 runs");
    let a3 = run_cases(SEED ^ 5, ADJUGATE_MATRICES, |r| suite::adjugate_case(r, 3, ADJUGATE_TUPLES, false)).expect("3x3 runs");
    let (w2, w3) = (worst(a2.iter().map(|c| c.worst)), worst(a3.iter().map(|c| c.worst)));
    report(
        out,
        "4",
        "adjugate law",
        w2.max(w3) <= ADJUGATE_TOL,
        format!("{ADJUGATE_MATRICES} matrices x {ADJUGATE_TUPLES} tuples per size, worst/scale 2x2 {w2:.2e}, 3x3 {w3:.2e} (tol {ADJUGATE_TOL:e})"),
    );
}

fn nonneg(out: &mut Vec<Outcome>) {
    let ladder = [1e-2, 1e-3, 1e-4, 1e-5];
    let mut max_drift: f64 = 1.0;
    let mut min_norm = f64::INFINITY;
    let mut null_worst: f64 = 0.0;
    let (mut instances, mut hyp) = (0, 0);
    for (d, ps) in [(2, [1.2, 1.5, 1.9]), (3, [0.6, 0.8, 1.5])] {
        for (k, &p) in ps.iter().enumerate() {
            for rep in 0..3 {
                let case = (d * 100 + k * 10 + rep) as u64;
                let template = NonnegTemplate::random(&mut case_rng(SEED ^ 6, case), d, 3);
                let lad = residual_ladder(|e| template.instance(p, e, KAPPA, BOUND), &ladder).expect("ladder runs");
                max_drift = max_drift.max(lad.max_drift);
                let inst = template.instance(p, 0.01, KAPPA, BOUND).expect("instance builds");
                let mut rng = case_rng(SEED ^ 7, case);
                let samples: Vec<_> = (0..NONNEG_SAMPLES).map(|_| suite::random_row_field(&mut rng, &inst)).collect();
                let pos = nonneg_check_ii(&inst, &samples).expect("positivity runs");
                instances += 1;
                if pos.hypothesis.pass {
                    hyp += 1;
                    min_norm = min_norm.min(pos.min_normalized);
                }
                let null = run_cases(SEED ^ 8 ^ case, 10, |r| suite::null_direction_case(r, &inst)).expect("null runs");
                null_worst = null_worst.max(worst(null));
            }
        }
    }
    let pass = max_drift < DECADE_DRIFT && hyp > 0 && min_norm >= -POSITIVITY_TOL && null_worst <= POSITIVITY_TOL;
    report(
        out,
        "5",
        "non-negativity",
        pass,
        format!(
            "{instances} instances ({hyp} hypothesis-passing); residual/eps drift {max_drift:.3} per decade (< {DECADE_DRIFT}); \
             min normalized braket {min_norm:.2e} over {NONNEG_SAMPLES} fields each (>= -{POSITIVITY_TOL:e}); null direction {null_worst:.2e}"
        ),
    );
}

fn derivatives(out: &mut Vec<Outcome>) {
    let cases = run_cases(SEED ^ 9, DERIVATIVE_FAMILIES, suite::derivative_case).expect("derivative cases run");
    let w = worst(cases.iter().map(|c| c.fixed.max(c.moving)));
    report(out, "6", "differentiation under the integral", w <= DERIVATIVE_TOL, format!("{DERIVATIVE_FAMILIES} families, worst rel {w:.2e} (tol {DERIVATIVE_TOL:e})"));
}

/// The 20 randomized instances of the monotonicity scan. `d = 3` uses `h = t/4` to fit the budget.
fn scan_instances() -> Vec<QConfig> {
    let mut out = Vec::with_capacity(SCAN_INSTANCES);
    for (d, ps, max_tubes, k) in [(2usize, [1.2, 1.5, 1.9], 3, 8.0), (3, [0.6, 0.8, 1.5], 2, 4.0)] {
        for i in 0..SCAN_INSTANCES / 2 {
            let mut rng = case_rng(SEED ^ 10, (d * 100 + i) as u64);
            let fams = random_tubes(&mut rng, d, max_tubes, 0.1, 0.5);
            let mut cfg = QConfig::new(fams, ps[i % 3]).expect("config builds");
            cfg.spacing = Spacing::PerT(k);
            out.push(cfg);
        }
    }
    out
}

fn monotonicity(out: &mut Vec<Outcome>, instances: &[QConfig]) {
    let lw = QConfig::new(axis_slabs(2), 1.0).expect("config builds");
    let ladder = geometric_ladder(0.1, 2.0, SCAN_POINTS).expect("ladder");
    let lw_scan = q_scan(&lw, &ladder).expect("scan runs");
    let lw_err = worst(lw_scan.rows.iter().map(|r| (r.value - PI).abs()));

    let start = Instant::now();
    let mut failed = Vec::new();
    let mut coarse = 0;
    for (i, cfg) in instances.iter().enumerate() {
        let scan = q_scan(cfg, &ladder).expect("scan runs");
        coarse += scan.rows.iter().filter(|r| r.coarse).count();
        if !scan.pass {
            failed.push(i);
        }
    }
    let elapsed = start.elapsed();
    let pass = lw_err <= LW_TOL && failed.is_empty() && elapsed < SCAN_BUDGET;
    report(
        out,
        "7",
        "heat-flow monotonicity",
        pass,
        format!(
            "LW |Q - pi| max {lw_err:.2e} (tol {LW_TOL:e}); {} instances, failing {failed:?}, coarse rows {coarse}; {:.0} s (budget {} s)",
            instances.len(),
            elapsed.as_secs_f64(),
            SCAN_BUDGET.as_secs()
        ),
    );
}

fn s0_positivity(out: &mut Vec<Outcome>, instances: &[QConfig]) {
    let mut min_norm = f64::INFINITY;
    let mut checked = 0;
    for (i, cfg) in instances.iter().enumerate() {
        let hyp = virtint::kakeya::frame_hypothesis(cfg, KAPPA, BOUND).map(|(m, _)| m.pass).unwrap_or(false);
        if !hyp {
            continue;
        }
        checked += 1;
        let pts = s0_sample_points(cfg, 0.1, 2.0, S0_SAMPLES, &mut case_rng(SEED ^ 11, i as u64)).expect("samples");
        min_norm = min_norm.min(s0_check(cfg, &pts).expect("S0 runs").min_normalized);
    }
    let single = QConfig::new(axis_slabs(2), 1.0).expect("config builds");
    let mut rng = case_rng(SEED ^ 12, 0);
    let single_worst = worst((0..S0_SAMPLES).map(|_| {
        let t = rng.random_range(0.1..2.0);
        let x = [rng.random_range(-2.0..2.0) * t, rng.random_range(-2.0..2.0) * t];
        let s = s0_integral(&single, t, &x).expect("S0 runs");
        s.value.abs() / s.scale.max(1.0)
    }));
    let pass = checked > 0 && min_norm >= -POSITIVITY_TOL && single_worst <= S0_SINGLE_ATOM_TOL;
    report(
        out,
        "8",
        "S0 positivity",
        pass,
        format!(
            "{checked} hypothesis-passing instances x {S0_SAMPLES} points, min normalized {min_norm:.2e} (>= -{POSITIVITY_TOL:e}); \
             single atom p = 1 worst {single_worst:.2e} (tol {S0_SINGLE_ATOM_TOL:e})"
        ),
    );
}

fn exponent_stability(out: &mut Vec<Outcome>) {
    let deltas = dyadic_ladder(3, 7);
    let configs: Vec<(&str, usize, f64, Vec<MapFamily>)> = vec![
        ("d=2 p=1", 2, 1.0, random_tubes(&mut case_rng(SEED ^ 13, 0), 2, 3, 0.3, 0.3)),
        ("d=2 p=1.5", 2, 1.5, random_tubes(&mut case_rng(SEED ^ 13, 1), 2, 3, 0.3, 0.3)),
        ("d=3 p=0.75 bush", 3, 0.75, bush(&mut case_rng(SEED ^ 13, 2), 3, 2, 0.3)),
        ("d=3 p=1.5 bush", 3, 1.5, bush(&mut case_rng(SEED ^ 13, 3), 3, 2, 0.3)),
    ];
    let mut stable = true;
    let mut drifting = true;
    let mut lines = Vec::new();
    for (label, d, p, fams) in &configs {
        let region = 2.0;
        let at = |e: f64| {
            let mut cfg = RatioConfig::new(*p, vec![-region; *d], vec![region; *d]);
            cfg.exponent = Some(e);
            ratio_ladder(fams, &deltas, &cfg).expect("ratio ladder runs")
        };
        let base = at(*d as f64 / p);
        let clipped = base.rows.iter().any(|r| r.clipped);
        stable &= base.stable(RATIO_DRIFT) && !clipped;
        let mut shifted = Vec::new();
        for e in [*d as f64 / p - RATIO_SHIFT, *d as f64 / p + RATIO_SHIFT] {
            let l = at(e);
            drifting &= l.drifting(RATIO_DRIFT);
            let total = l.rows.last().unwrap().ratio / l.rows[0].ratio;
            shifted.push(format!("min step {:.3}, cumulative x{:.3}", l.min_drift, total));
        }
        lines.push(format!("    {label}: d/p max step {:.3}{}; d/p-0.2 {}; d/p+0.2 {}", base.max_drift, if clipped { " (clipped)" } else { "" }, shifted[0], shifted[1]));
    }
    let slabs = kakeya_ratio(&axis_slabs(2), 2f64.powi(-5), &RatioConfig::new(1.0, vec![-1.0; 2], vec![1.0; 2])).expect("slabs run");
    let slabs_ok = (slabs.ratio / 4.0 - 1.0).abs() <= SLABS_REL;
    report(out, "9a", "Kakeya exponent stability at d/p", stable && slabs_ok, format!("per-halving drift < {RATIO_DRIFT} over delta = 2^-3..2^-7; crossing slabs {}", slabs.ratio));
    report(
        out,
        "9b",
        "negative control at d/p +- 0.2",
        drifting,
        format!(
            "requires > {RATIO_DRIFT}x per halving; shifting the exponent by 0.2 moves the ratio by 2^0.2 = {:.3}x per halving at most",
            2f64.powf(RATIO_SHIFT)
        ),
    );
    for l in lines {
        println!("{l}");
    }
}

fn determinism(out: &mut Vec<Outcome>) {
    let bin = env!("CARGO_BIN_EXE_virtint");
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<_> = std::fs::read_dir(&dir).expect("scenario dir").map(|e| e.expect("entry").path()).collect();
    files.sort();
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut mismatched = Vec::new();
    for f in &files {
        let reports: Vec<Vec<u8>> = ["1", "2"]
            .iter()
            .map(|jobs| {
                let path = tmp.path().join(format!("report{jobs}"));
                let st = Command::new(bin).args(["run", f.to_str().unwrap(), "--jobs", jobs, "--out", path.to_str().unwrap()]).status().expect("binary runs");
                assert_eq!(st.code(), Some(0), "{}", f.display());
                std::fs::read(&path).expect("report written")
            })
            .collect();
        let inproc = scenario::run_text(&std::fs::read_to_string(f).unwrap()).expect("scenario runs").report.into_bytes();
        if reports[0] != reports[1] || reports[0] != inproc {
            mismatched.push(f.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let a = Command::new(bin).arg("selftest").output().expect("selftest runs");
    let b = Command::new(bin).arg("selftest").output().expect("selftest runs");
    let lib = selftest::run(selftest::DEFAULT_SEED, None).expect("selftest runs").to_json();
    let selftest_ok = a.status.success() && a.stdout == b.stdout && a.stdout == lib.as_bytes();
    report(
        out,
        "10",
        "determinism",
        mismatched.is_empty() && selftest_ok,
        format!("{} scenarios byte-identical across runs and --jobs (mismatch {mismatched:?}); selftest identical: {selftest_ok}", files.len()),
    );
}

fn main() {
    // libtest flags such as --list or --nocapture are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut out = Vec::new();
    oracle(&mut out);
    identities(&mut out);
    quartic(&mut out);
    adjugate(&mut out);
    nonneg(&mut out);
    derivatives(&mut out);
    let instances = scan_instances();
    monotonicity(&mut out, &instances);
    s0_positivity(&mut out, &instances);
    exponent_stability(&mut out);
    determinism(&mut out);

    let unexpected: Vec<&Outcome> = out.iter().filter(|o| !o.pass && !KNOWN_UNATTAINABLE.contains(&o.id)).collect();
    let known = out.iter().filter(|o| !o.pass && KNOWN_UNATTAINABLE.contains(&o.id)).count();
    println!("acceptance: {} passed, {} failed ({known} known unattainable)", out.iter().filter(|o| o.pass).count(), out.len() - out.iter().filter(|o| o.pass).count());
    if !unexpected.is_empty() {
        for o in unexpected {
            eprintln!("unexpected failure: {} {}: {}", o.id, o.name, o.detail);
        }
        std::process::exit(1);
    }
}
