//! Seeded random instances and the invariant checks shared by `selftest`, the
//! randomized scenario kinds and the test suites.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::flow::{
    braket_integral, ddt_integral, ddt_integral_timedep, flow_integral, flow_integral_timedep, null_direction,
    richardson_derivative, DerivableFamily, FamilyTerm, GaussianFamily, NonnegInstance, RowField,
};
use crate::kakeya::pi_frame;
use crate::measure::{DiscreteMeasure, MeasureTuple};
use crate::valgebra::{
    closed_form_bilinear, closed_form_linear, fgs_expansion, integrate, integrate_bruteforce,
    quartic_centered_closed_form, ExponentVec, FnId, Registry, VirtualFn,
};
use crate::vmatrix::{vadj, vdet, VirtualMatrix};

/// The generator for case `case` of a run seeded with `seed`: one stream per case,
/// so results do not depend on how cases are scheduled.
pub fn case_rng(seed: u64, case: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case);
    rng
}

/// Run `n` independent seeded cases in parallel, returning results in case order.
pub fn run_cases<T: Send>(seed: u64, n: usize, f: impl Fn(&mut ChaCha8Rng) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(|k| f(&mut case_rng(seed, k as u64))).collect()
}

/// Difference measured against a magnitude that cannot cancel.
pub fn scaled_error(value: f64, reference: f64, scale: f64) -> f64 {
    let denom = scale.abs().max(reference.abs()).max(value.abs());
    if denom == 0.0 {
        0.0
    } else {
        (value - reference).abs() / denom
    }
}

pub fn random_masses(rng: &mut ChaCha8Rng, d: usize, max_atoms: usize) -> Vec<Vec<f64>> {
    (0..d).map(|_| (0..rng.random_range(1..=max_atoms)).map(|_| rng.random_range(0.2..2.0)).collect()).collect()
}

pub fn random_tuple(rng: &mut ChaCha8Rng, d: usize, max_atoms: usize) -> Result<MeasureTuple> {
    MeasureTuple::from_masses(&random_masses(rng, d, max_atoms))
}

/// Integer entries in `1..=max` or fractional entries in `(0, max]`.
pub fn random_exponents(rng: &mut ChaCha8Rng, d: usize, max: u32, integer: bool) -> Result<ExponentVec> {
    let v = (0..d)
        .map(|_| if integer { rng.random_range(1..=max) as f64 } else { rng.random_range(0.05..=max as f64) })
        .collect();
    ExponentVec::new(v)
}

pub fn random_function(rng: &mut ChaCha8Rng, reg: &mut Registry) -> Result<FnId> {
    reg.insert_fn(|_, _| rng.random_range(-1.5..1.5))
}

/// A polynomial in `Sigma(f_k)` with up to `max_terms` monomials of degree at most `max_degree`.
pub fn random_polynomial(rng: &mut ChaCha8Rng, handles: &[FnId], reg: &Registry, max_degree: usize, max_terms: usize) -> Result<VirtualFn> {
    let mut out = VirtualFn::zero();
    for _ in 0..rng.random_range(1..=max_terms) {
        let deg = rng.random_range(0..=max_degree);
        let mut mono = VirtualFn::constant(rng.random_range(-2.0..2.0));
        for _ in 0..deg {
            mono = &mono * &reg.sigma(handles[rng.random_range(0..handles.len())])?;
        }
        out = &out + &mono;
    }
    Ok(out)
}

/// The same polynomial with every coefficient and function value replaced by its absolute value.
fn absolute(f: &VirtualFn, reg: &Registry) -> Result<(VirtualFn, Registry)> {
    let mut abs_reg = Registry::new(reg.sizes().to_vec());
    let mut map = std::collections::BTreeMap::new();
    for h in f.handles() {
        let id = abs_reg.insert(reg.get(h)?.map(f64::abs))?;
        map.insert(h, id);
    }
    let mut out = VirtualFn::zero();
    for (mono, c) in f.terms() {
        let ids: Vec<FnId> = mono.iter().map(|h| map[h]).collect();
        out = &out + &VirtualFn::monomial(c.abs(), &ids);
    }
    Ok((out, abs_reg))
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OracleCase {
    pub value: f64,
    pub bruteforce: f64,
    pub rel_error: f64,
}

/// Grouped evaluation against the explicit product-space sum (integer exponents).
pub fn oracle_case(rng: &mut ChaCha8Rng) -> Result<OracleCase> {
    let d = rng.random_range(1..=3);
    let tuple = random_tuple(rng, d, 4)?;
    let p = random_exponents(rng, d, 3, true)?;
    let mut reg = Registry::for_tuple(&tuple);
    let handles: Vec<FnId> = (0..3).map(|_| random_function(rng, &mut reg)).collect::<Result<_>>()?;
    let f = random_polynomial(rng, &handles, &reg, 5, 4)?;
    let value = integrate(&f, &reg, &tuple, &p)?;
    let bruteforce = integrate_bruteforce(&f, &reg, &tuple, &p)?;
    let (fa, ra) = absolute(&f, &reg)?;
    let scale = integrate_bruteforce(&fa, &ra, &tuple, &p)?;
    Ok(OracleCase { value, bruteforce, rel_error: scaled_error(value, bruteforce, scale) })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct IdentityCase {
    /// Empty integrand against the mass power.
    pub unit: f64,
    pub linear: f64,
    pub bilinear: f64,
    pub three_sum: f64,
}

impl IdentityCase {
    pub fn max(&self) -> f64 {
        self.unit.max(self.linear).max(self.bilinear).max(self.three_sum)
    }
}

/// Closed forms for `1`, `Sigma(f)` and `Sigma(f) Sigma(g)` at fractional exponents.
pub fn identity_case(rng: &mut ChaCha8Rng) -> Result<IdentityCase> {
    let d = rng.random_range(1..=3);
    let tuple = random_tuple(rng, d, 4)?;
    let p = random_exponents(rng, d, 3, false)?;
    let mut reg = Registry::for_tuple(&tuple);
    let f = random_function(rng, &mut reg)?;
    let g = random_function(rng, &mut reg)?;
    let mass_pow = tuple.mass_power(&p)?;
    let unit = scaled_error(integrate(&VirtualFn::unit(), &reg, &tuple, &p)?, mass_pow, 0.0);

    let abs_mean = |h: FnId| -> Result<f64> {
        let v = reg.get(h)?.values();
        Ok(tuple.spaces().iter().zip(p.iter()).zip(v).map(|((s, &pj), fj)| pj * s.expect(&fj.iter().map(|x| x.abs()).collect::<Vec<_>>())).sum())
    };
    let (af, ag) = (abs_mean(f)?, abs_mean(g)?);
    let sf = reg.sigma(f)?;
    let fg = &sf * &reg.sigma(g)?;
    let lin = integrate(&sf, &reg, &tuple, &p)?;
    let linear = scaled_error(lin, closed_form_linear(&tuple, &p, &reg, f)?, af * mass_pow);
    let bil = integrate(&fg, &reg, &tuple, &p)?;
    let cross: f64 = tuple
        .spaces()
        .iter()
        .zip(p.iter())
        .enumerate()
        .map(|(j, (s, &pj))| {
            let fv = &reg.get(f).expect("bound").values()[j];
            let gv = &reg.get(g).expect("bound").values()[j];
            pj * s.expect(&fv.iter().zip(gv).map(|(a, b)| (a * b).abs()).collect::<Vec<_>>())
        })
        .sum();
    let bil_scale = (af * ag + cross + af * ag) * mass_pow;
    let bilinear = scaled_error(bil, closed_form_bilinear(&tuple, &p, &reg, f, g)?, bil_scale);
    let three_sum = scaled_error(fgs_expansion(&tuple, &p, &reg, f, g)?, bil, bil_scale);
    Ok(IdentityCase { unit, linear, bilinear, three_sum })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct QuarticCase {
    pub p: f64,
    pub value: f64,
    pub closed_form: f64,
    pub rel_error: f64,
}

/// Fourth virtual moment of a centred function on a probability space.
pub fn quartic_case(rng: &mut ChaCha8Rng) -> Result<QuarticCase> {
    let n = rng.random_range(2..=5);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let total: f64 = raw.iter().sum();
    let masses: Vec<f64> = raw.iter().map(|m| m / total).collect();
    let mu = DiscreteMeasure::from_masses(&masses)?;
    let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mean = mu.expect(&f);
    let f: Vec<f64> = f.iter().map(|v| v - mean).collect();
    let p: f64 = rng.random_range(0.05..3.0);
    let tuple = MeasureTuple::new(vec![mu.clone()])?;
    let mut reg = Registry::for_tuple(&tuple);
    let h = reg.insert_values(vec![f.clone()])?;
    let value = integrate(&reg.sigma(h)?.pow(4), &reg, &tuple, &ExponentVec::new(vec![p])?)?;
    let closed_form = quartic_centered_closed_form(&mu, p, &f);
    let f2: Vec<f64> = f.iter().map(|v| v * v).collect();
    let f4: Vec<f64> = f2.iter().map(|v| v * v).collect();
    let scale = p * mu.expect(&f4) + p * (3.0 * p + 2.0) * mu.expect(&f2).powi(2);
    Ok(QuarticCase { p, value, closed_form, rel_error: scaled_error(value, closed_form, scale) })
}

/// `int Sigma(f)^4` for `f = (1, -1)` on two atoms of mass 1/2 at `p = 1/2`.
pub fn quartic_counterexample() -> Result<f64> {
    let tuple = MeasureTuple::from_masses(&[vec![0.5, 0.5]])?;
    let mut reg = Registry::for_tuple(&tuple);
    let h = reg.insert_values(vec![vec![1.0, -1.0]])?;
    integrate(&reg.sigma(h)?.pow(4), &reg, &tuple, &ExponentVec::new(vec![0.5])?)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AdjugateCase {
    pub side: usize,
    /// Largest `|int (adj(M) M - det(M) I)_ij| / scale` over the weighted tuples.
    pub worst: f64,
}

/// `adj(M) M = det(M) I` after integration, for `M_ab = c_ab + Sigma(f_ab)`.
///
/// `flip_adjugate` negates the adjugate (a deliberately broken law for negative controls).
pub fn adjugate_case(rng: &mut ChaCha8Rng, side: usize, tuples: usize, flip_adjugate: bool) -> Result<AdjugateCase> {
    let d = rng.random_range(1..=3);
    let tuple = random_tuple(rng, d, 3)?;
    let p = random_exponents(rng, d, 2, false)?;
    let mut reg = Registry::for_tuple(&tuple);
    let mut entries = Vec::with_capacity(side * side);
    for _ in 0..side * side {
        let h = random_function(rng, &mut reg)?;
        entries.push(&VirtualFn::constant(rng.random_range(-1.0..1.0)) + &reg.sigma(h)?);
    }
    let m = VirtualMatrix::new(side, side, entries)?;
    let mut adj = vadj(&m)?;
    if flip_adjugate {
        adj = adj.scale(&VirtualFn::constant(-1.0));
    }
    let det = vdet(&m)?;
    let lhs = adj.matmul(&m)?;
    let residual = lhs.sub(&VirtualMatrix::identity(side).scale(&det))?;
    let mut worst: f64 = 0.0;
    for _ in 0..tuples {
        let w: Vec<Vec<f64>> = tuple.sizes().iter().map(|&n| (0..n).map(|_| rng.random_range(0.1..2.0)).collect()).collect();
        let weighted = tuple.weight(&w)?;
        let res = residual.integrate(&reg, &weighted, &p)?;
        let det_val = integrate(&det, &reg, &weighted, &p)?.abs();
        for i in 0..side {
            for j in 0..side {
                let mut scale = det_val;
                for k in 0..side {
                    scale += integrate(&(adj.get(i, k) * m.get(k, j)), &reg, &weighted, &p)?.abs();
                }
                worst = worst.max(res[(i, j)].abs() / scale.max(f64::MIN_POSITIVE));
            }
        }
    }
    Ok(AdjugateCase { side, worst })
}

/// Random masses and unit-size frame perturbations; `instance(eps)` scales the
/// perturbations, so one template gives a whole `eps` ladder.
#[derive(Debug, Clone)]
pub struct NonnegTemplate {
    pub masses: Vec<Vec<f64>>,
    pub perturbations: Vec<Vec<DMatrix<f64>>>,
}

impl NonnegTemplate {
    pub fn random(rng: &mut ChaCha8Rng, d: usize, max_atoms: usize) -> Self {
        let masses = random_masses(rng, d, max_atoms);
        let perturbations = masses
            .iter()
            .map(|m| {
                m.iter()
                    .map(|_| {
                        let e = DMatrix::<f64>::from_fn(d, d - 1, |_, _| rng.random_range(-1.0f64..1.0));
                        let norm = e.norm().max(1e-300);
                        e * (rng.random_range(0.0f64..1.0) / norm)
                    })
                    .collect()
            })
            .collect();
        NonnegTemplate { masses, perturbations }
    }

    /// Frames `pi_j + eps E` with `|E|_F <= 1`.
    pub fn instance(&self, p: f64, eps: f64, kappa: f64, bound: f64) -> Result<NonnegInstance> {
        let d = self.masses.len();
        let tuple = MeasureTuple::from_masses(&self.masses)?;
        let reference: Vec<DMatrix<f64>> = (0..d).map(|j| pi_frame(d, j)).collect();
        let frames = self
            .perturbations
            .iter()
            .zip(&reference)
            .map(|(es, r)| es.iter().map(|e| r + e * eps).collect())
            .collect();
        NonnegInstance::new(tuple, ExponentVec::uniform(p, d)?, frames, reference, eps, kappa, bound)
    }
}

pub fn random_nonneg_instance(
    rng: &mut ChaCha8Rng,
    d: usize,
    p: f64,
    eps: f64,
    kappa: f64,
    bound: f64,
    max_atoms: usize,
) -> Result<NonnegInstance> {
    NonnegTemplate::random(rng, d, max_atoms).instance(p, eps, kappa, bound)
}

pub fn random_row_field(rng: &mut ChaCha8Rng, inst: &NonnegInstance) -> RowField {
    let d = inst.dim();
    inst.tuple.sizes().iter().map(|&n| (0..n).map(|_| (0..d - 1).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).collect()
}

/// `|int {h B, phi}| / scale` for random `h` and `phi`.
pub fn null_direction_case(rng: &mut ChaCha8Rng, inst: &NonnegInstance) -> Result<f64> {
    let h: Vec<f64> = (0..inst.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u = null_direction(inst, &h);
    let v = random_row_field(rng, inst);
    let (value, scale) = braket_integral(inst, &u, &v)?;
    Ok(if scale > 0.0 { value.abs() / scale } else { value.abs() })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DerivativeCase {
    /// Fixed integrand under moving Gaussian weights.
    pub fixed: f64,
    /// Time-dependent integrand under moving Gaussian weights.
    pub moving: f64,
}

/// Analytic time derivatives against Richardson differences, as relative errors.
pub fn derivative_case(rng: &mut ChaCha8Rng) -> Result<DerivativeCase> {
    let d = rng.random_range(1..=3);
    let tuple = random_tuple(rng, d, 3)?;
    let p = random_exponents(rng, d, 2, false)?;
    let distances: Vec<Vec<f64>> = tuple.sizes().iter().map(|&n| (0..n).map(|_| rng.random_range(0.0..1.5)).collect()).collect();
    let wf = GaussianFamily { distances };
    let t: f64 = rng.random_range(0.5..1.5);
    let h = 1e-3 * t;

    let mut reg = Registry::for_tuple(&tuple);
    let handles: Vec<FnId> = (0..2).map(|_| random_function(rng, &mut reg)).collect::<Result<_>>()?;
    let f = random_polynomial(rng, &handles, &reg, 3, 3)?;
    let analytic = ddt_integral(&f, &reg, &tuple, &p, &wf, t)?;
    let fd = richardson_derivative(|s| flow_integral(&f, &reg, &tuple, &p, &wf, s), t, h)?;
    let (fa, ra) = absolute(&f, &reg)?;
    let c_max = wf.distances.iter().flatten().map(|r| 2.0 * r * r / t.powi(3)).fold(0.0, f64::max);
    let scale = flow_integral(&fa, &ra, &tuple, &p, &wf, t)?.abs() * (1.0 + c_max * p.iter().sum::<f64>());
    let fixed = scaled_error(analytic, fd, scale);

    // g(t) prod Sigma(a + b sin(omega t)) with declared derivatives
    let sizes = tuple.sizes();
    let mut factors: Vec<crate::flow::FunctionPath> = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let a: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let omega: f64 = rng.random_range(0.5..2.0);
        factors.push(Arc::new(move |s: f64| {
            let v = a.iter().zip(&b).map(|(a, b)| a.iter().zip(b).map(|(a, b)| a + b * (omega * s).sin()).collect()).collect();
            let dv = b.iter().map(|b| b.iter().map(|b| b * omega * (omega * s).cos()).collect()).collect();
            (v, dv)
        }));
    }
    let k: f64 = rng.random_range(0.5..2.0);
    let fam = DerivableFamily {
        terms: vec![FamilyTerm { coefficient: Arc::new(move |s: f64| ((k * s).cos() + 2.0, -k * (k * s).sin())), factors }],
    };
    let analytic = ddt_integral_timedep(&fam, &tuple, &p, &wf, t)?;
    let fd = richardson_derivative(|s| flow_integral_timedep(&fam, &tuple, &p, &wf, s), t, h)?;
    let value = flow_integral_timedep(&fam, &tuple, &p, &wf, t)?;
    let moving = scaled_error(analytic, fd, value.abs() * (1.0 + c_max * p.iter().sum::<f64>()));
    Ok(DerivativeCase { fixed, moving })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_is_negative() {
        assert!((quartic_counterexample().unwrap() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn checks_pass_and_fault_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            assert!(oracle_case(&mut rng).unwrap().rel_error < 1e-12);
            assert!(identity_case(&mut rng).unwrap().max() < 1e-12);
            assert!(quartic_case(&mut rng).unwrap().rel_error < 1e-12);
            let dc = derivative_case(&mut rng).unwrap();
            assert!(dc.fixed < 1e-6 && dc.moving < 1e-6, "{dc:?}");
        }
        assert!(adjugate_case(&mut rng, 3, 3, false).unwrap().worst < 1e-10);
        assert!(adjugate_case(&mut rng, 2, 3, true).unwrap().worst > 1e-3);
        let inst = random_nonneg_instance(&mut rng, 3, 0.8, 1e-3, 0.05, 4.0, 3).unwrap();
        assert!(null_direction_case(&mut rng, &inst).unwrap() < 1e-10);
    }
}
