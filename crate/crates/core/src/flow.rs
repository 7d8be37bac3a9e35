//! Time derivatives of virtual integrals, continuity under total-variation
//! perturbation, and instance checks of the non-negativity result.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::MeasureTuple;
use crate::valgebra::{integrate, ConcatFn, ExponentVec, FnId, IntegrationPlan, Registry, VirtualFn};
use crate::vmatrix::{sigma_matrix, sv_margin, vdet, BilinearForm, ConcatMatrix};

/// Relative slack used by the positivity contracts.
pub const POSITIVITY_TOL: f64 = 1e-10;

/// A time-indexed family of positive weights `w[t]` with log-derivative `c[t]`.
pub trait WeightFamily: Sync {
    /// Open interval of admissible times.
    fn domain(&self) -> (f64, f64);
    fn weights(&self, t: f64) -> Vec<Vec<f64>>;
    fn log_derivative(&self, t: f64) -> Vec<Vec<f64>>;

    fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if !(t > lo && t < hi) {
            return Err(Error::OutsideDomain { t, lo, hi });
        }
        Ok(())
    }
}

/// `w[t] = w0 * exp(c t)` with constant rates `c`.
#[derive(Debug, Clone)]
pub struct ExponentialFamily {
    pub base: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
}

impl WeightFamily for ExponentialFamily {
    fn domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn weights(&self, t: f64) -> Vec<Vec<f64>> {
        self.base
            .iter()
            .zip(&self.rates)
            .map(|(w, c)| w.iter().zip(c).map(|(w, c)| w * (c * t).exp()).collect())
            .collect()
    }

    fn log_derivative(&self, _t: f64) -> Vec<Vec<f64>> {
        self.rates.clone()
    }
}

/// `w[t] = exp(-r^2 / t^2)` for per-atom distances `r`; `c[t] = 2 r^2 / t^3`.
#[derive(Debug, Clone)]
pub struct GaussianFamily {
    pub distances: Vec<Vec<f64>>,
}

impl WeightFamily for GaussianFamily {
    fn domain(&self) -> (f64, f64) {
        (0.0, f64::INFINITY)
    }

    fn weights(&self, t: f64) -> Vec<Vec<f64>> {
        self.distances.iter().map(|r| r.iter().map(|r| (-(r * r) / (t * t)).exp()).collect()).collect()
    }

    fn log_derivative(&self, t: f64) -> Vec<Vec<f64>> {
        self.distances.iter().map(|r| r.iter().map(|r| 2.0 * r * r / (t * t * t)).collect()).collect()
    }
}

/// Largest relative violation of `d/dt w = c w`, with `d/dt` by Richardson differences.
pub fn weight_ode_residual(wf: &dyn WeightFamily, t: f64, h: f64) -> Result<f64> {
    wf.check_time(t)?;
    let c = wf.log_derivative(t);
    let w = wf.weights(t);
    let mut worst: f64 = 0.0;
    for j in 0..w.len() {
        for i in 0..w[j].len() {
            let dw = richardson_derivative(|s| Ok(wf.weights(s)[j][i]), t, h)?;
            let expect = c[j][i] * w[j][i];
            worst = worst.max((dw - expect).abs() / expect.abs().max(w[j][i]).max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}

/// Central difference `(f(t+h) - f(t-h)) / 2h` refined once by Richardson extrapolation.
pub fn richardson_derivative(mut f: impl FnMut(f64) -> Result<f64>, t: f64, h: f64) -> Result<f64> {
    let mut central = |h: f64| -> Result<f64> { Ok((f(t + h)? - f(t - h)?) / (2.0 * h)) };
    let coarse = central(h)?;
    let fine = central(h / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

fn weighted(tuple: &MeasureTuple, w: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if w.len() != tuple.dim() {
        return Err(Error::ShapeMismatch(format!("{} weight components for {} spaces", w.len(), tuple.dim())));
    }
    tuple
        .spaces()
        .iter()
        .zip(w)
        .map(|(s, wj)| {
            if wj.len() != s.len() {
                return Err(Error::ShapeMismatch("weight component length differs from space size".into()));
            }
            Ok(s.masses().iter().zip(wj).map(|(m, w)| m * w).collect())
        })
        .collect()
}

/// `int F d(mu_w)^p`.
pub fn integrate_weighted(f: &VirtualFn, reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec, w: &[Vec<f64>]) -> Result<f64> {
    let masses = weighted(tuple, w)?;
    IntegrationPlan::new(f, p)?.evaluate_masses(reg, &masses)
}

/// `t -> int F d(mu_{w[t]})^p`.
pub fn flow_integral(f: &VirtualFn, reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec, wf: &dyn WeightFamily, t: f64) -> Result<f64> {
    wf.check_time(t)?;
    integrate_weighted(f, reg, tuple, p, &wf.weights(t))
}

/// Analytic derivative `int F Sigma(c[t]) d(mu_{w[t]})^p` of a time-independent integrand.
pub fn ddt_integral(f: &VirtualFn, reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec, wf: &dyn WeightFamily, t: f64) -> Result<f64> {
    wf.check_time(t)?;
    let mut reg = reg.clone();
    let c = reg.insert_values(wf.log_derivative(t))?;
    let integrand = f * &reg.sigma(c)?;
    integrate_weighted(&integrand, &reg, tuple, p, &wf.weights(t))
}

/// `t -> (g(t), g'(t))`.
pub type ScalarPath = Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>;
/// `t -> (f(t), f'(t))` on the disjoint union, as per-space value tables.
pub type FunctionPath = Arc<dyn Fn(f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) + Send + Sync>;

/// One summand `g(t) prod_i Sigma(f_i[t])` with declared derivatives.
#[derive(Clone)]
pub struct FamilyTerm {
    pub coefficient: ScalarPath,
    pub factors: Vec<FunctionPath>,
}

/// A time-indexed virtual function given by a finite representation with declared derivatives.
#[derive(Clone, Default)]
pub struct DerivableFamily {
    pub terms: Vec<FamilyTerm>,
}

impl DerivableFamily {
    /// `(registry, F[t], F'[t])` with `F'` from the Leibniz rule.
    pub fn at(&self, sizes: &[usize], t: f64) -> Result<(Registry, VirtualFn, VirtualFn)> {
        let mut reg = Registry::new(sizes.to_vec());
        let mut value = VirtualFn::zero();
        let mut deriv = VirtualFn::zero();
        for term in &self.terms {
            let (g, dg) = (term.coefficient)(t);
            let mut handles: Vec<(FnId, FnId)> = Vec::with_capacity(term.factors.len());
            for f in &term.factors {
                let (v, dv) = f(t);
                let a = reg.insert(ConcatFn::new(v)?)?;
                let b = reg.insert(ConcatFn::new(dv)?)?;
                handles.push((a, b));
            }
            let mut prod = VirtualFn::unit();
            for &(a, _) in &handles {
                prod = &prod * &reg.sigma(a)?;
            }
            let leibniz = prod.derivative(|h| {
                let &(_, b) = handles.iter().find(|(a, _)| *a == h).expect("factor handle");
                reg.sigma(b)
            })?;
            value = &value + &prod.scale(g);
            deriv = &(&deriv + &prod.scale(dg)) + &leibniz.scale(g);
        }
        Ok((reg, value, deriv))
    }
}

/// `t -> int F[t] d(mu_{w[t]})^p`.
pub fn flow_integral_timedep(fam: &DerivableFamily, tuple: &MeasureTuple, p: &ExponentVec, wf: &dyn WeightFamily, t: f64) -> Result<f64> {
    wf.check_time(t)?;
    let (reg, f, _) = fam.at(&tuple.sizes(), t)?;
    integrate_weighted(&f, &reg, tuple, p, &wf.weights(t))
}

/// Analytic derivative `int (F[t] Sigma(c[t]) + F'[t]) d(mu_{w[t]})^p`.
pub fn ddt_integral_timedep(fam: &DerivableFamily, tuple: &MeasureTuple, p: &ExponentVec, wf: &dyn WeightFamily, t: f64) -> Result<f64> {
    wf.check_time(t)?;
    let (mut reg, f, df) = fam.at(&tuple.sizes(), t)?;
    let c = reg.insert_values(wf.log_derivative(t))?;
    let integrand = &(&f * &reg.sigma(c)?) + &df;
    integrate_weighted(&integrand, &reg, tuple, p, &wf.weights(t))
}

/// Setting of the non-negativity result: frames `B(j, w)` near reference frames `B_j^0`.
#[derive(Debug, Clone)]
pub struct NonnegInstance {
    pub tuple: MeasureTuple,
    pub p: ExponentVec,
    /// `frames[j][i]`: the `d x (d-1)` frame at atom `i` of space `j`.
    pub frames: Vec<Vec<DMatrix<f64>>>,
    pub reference: Vec<DMatrix<f64>>,
    pub eps: f64,
    pub kappa: f64,
    /// Bound `A` with `1/A <= p_j <= A`.
    pub bound: f64,
}

impl NonnegInstance {
    pub fn new(
        tuple: MeasureTuple,
        p: ExponentVec,
        frames: Vec<Vec<DMatrix<f64>>>,
        reference: Vec<DMatrix<f64>>,
        eps: f64,
        kappa: f64,
        bound: f64,
    ) -> Result<Self> {
        let d = tuple.dim();
        if d < 2 || p.len() != d || reference.len() != d || frames.len() != d {
            return Err(Error::ShapeMismatch(format!("instance data does not match d = {d}")));
        }
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::Hypothesis(format!("kappa = {kappa} not in (0, 1)")));
        }
        if !(eps >= 0.0) {
            return Err(Error::Hypothesis(format!("eps = {eps} is negative")));
        }
        if let Some(pj) = p.iter().find(|&&pj| pj < 1.0 / bound || pj > bound) {
            return Err(Error::Hypothesis(format!("exponent {pj} outside [1/{bound}, {bound}]")));
        }
        for j in 0..d {
            if reference[j].shape() != (d, d - 1) {
                return Err(Error::ShapeMismatch(format!("reference frame {j} is not {d}x{}", d - 1)));
            }
            if frames[j].len() != tuple.space(j).len() {
                return Err(Error::ShapeMismatch(format!("space {j} needs one frame per atom")));
            }
            for (i, b) in frames[j].iter().enumerate() {
                if b.shape() != (d, d - 1) {
                    return Err(Error::ShapeMismatch(format!("frame ({j},{i}) is not {d}x{}", d - 1)));
                }
                let dev = (b - &reference[j]).norm();
                if dev > eps * (1.0 + 1e-12) + 1e-15 {
                    return Err(Error::Hypothesis(format!("frame ({j},{i}) is {dev} from its reference, above eps = {eps}")));
                }
            }
        }
        Ok(NonnegInstance { tuple, p, frames, reference, eps, kappa, bound })
    }

    pub fn dim(&self) -> usize {
        self.tuple.dim()
    }

    /// `M^0 = sum_j p_j B_j^0 (B_j^0)^T`.
    pub fn m0(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.reference.iter().zip(self.p.iter()).fold(DMatrix::zeros(d, d), |acc, (b, &pj)| acc + b * b.transpose() * pj)
    }

    /// Register the frame function in `reg` as a `d x (d-1)` matrix function.
    pub fn register_frame(&self, reg: &mut Registry) -> Result<ConcatMatrix> {
        let d = self.dim();
        ConcatMatrix::register(reg, d, d - 1, |j, i| {
            let b = &self.frames[j][i];
            (0..d).flat_map(|r| (0..d - 1).map(move |c| (r, c))).map(|(r, c)| b[(r, c)]).collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeterminantReport {
    pub lhs: f64,
    pub det_m0: f64,
    pub mass_pow: f64,
    pub residual: f64,
}

/// `int det(M)` with `M = Sigma(B B^T)`, against `det(M^0) mu(Omega)^p`.
pub fn nonneg_check_i(inst: &NonnegInstance) -> Result<DeterminantReport> {
    let mut reg = Registry::for_tuple(&inst.tuple);
    let b = inst.register_frame(&mut reg)?;
    let gram = b.mul_transpose(&b, &mut reg)?;
    let m = sigma_matrix(&reg, &gram)?;
    let lhs = integrate(&vdet(&m)?, &reg, &inst.tuple, &inst.p)?;
    let det_m0 = inst.m0().determinant();
    let mass_pow = inst.tuple.mass_power(&inst.p)?;
    Ok(DeterminantReport { lhs, det_m0, mass_pow, residual: (lhs - det_m0 * mass_pow).abs() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLadder {
    /// `(eps, residual, residual / eps)`.
    pub rows: Vec<(f64, f64, f64)>,
    /// Largest ratio between slopes at consecutive decades.
    pub max_drift: f64,
    pub pass: bool,
}

/// Residual of part (i) along `eps` values; the slope `residual / eps` must not
/// drift by a factor 2 or more between consecutive entries.
pub fn residual_ladder(build: impl Fn(f64) -> Result<NonnegInstance>, eps: &[f64]) -> Result<ResidualLadder> {
    let mut rows = Vec::with_capacity(eps.len());
    for &e in eps {
        let r = nonneg_check_i(&build(e)?)?;
        rows.push((e, r.residual, r.residual / e));
    }
    let mut max_drift: f64 = 1.0;
    for w in rows.windows(2) {
        let (a, b) = (w[0].2, w[1].2);
        let drift = if a > 0.0 && b > 0.0 { (a / b).max(b / a) } else { f64::INFINITY };
        max_drift = max_drift.max(drift);
    }
    Ok(ResidualLadder { rows, max_drift, pass: max_drift < 2.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    /// Top singular value of `(M^0)^(-1/2) B_j^0` for each `j`.
    pub margins: Vec<f64>,
    pub threshold: f64,
    /// Extreme singular values of `M^0`.
    pub m0_singular: (f64, f64),
    pub pass: bool,
}

/// Operative hypothesis of part (ii): every `(M^0)^(-1/2) B_j^0` has top singular value
/// at most `sqrt(1 - kappa)`, and the spectrum of `M^0` lies in `[1/A, A]`.
pub fn hypothesis_margin(inst: &NonnegInstance) -> Result<MarginReport> {
    let m0 = inst.m0();
    let asym = (&m0 - m0.transpose()).amax();
    let (lo, hi) = sv_margin(&m0);
    if asym > 1e-12 * hi.max(1.0) || !(lo > 0.0) {
        return Err(Error::Hypothesis(format!("M0 is not symmetric positive definite (sigma_min = {lo})")));
    }
    let eig = SymmetricEigen::new(m0);
    let inv_sqrt_diag = eig.eigenvalues.map(|e| 1.0 / e.sqrt());
    let inv_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt_diag) * eig.eigenvectors.transpose();
    let margins: Vec<f64> = inst.reference.iter().map(|b| sv_margin(&(&inv_sqrt * b)).1).collect();
    let threshold = (1.0 - inst.kappa).sqrt();
    let in_bounds = lo >= 1.0 / inst.bound && hi <= inst.bound;
    let pass = in_bounds && margins.iter().all(|&m| m <= threshold);
    Ok(MarginReport { margins, threshold, m0_singular: (lo, hi), pass })
}

/// A row-vector function of width `d - 1`: `phi[j][i]` is its value at atom `(j, i)`.
pub type RowField = Vec<Vec<Vec<f64>>>;

fn register_row(reg: &mut Registry, width: usize, phi: &RowField) -> Result<ConcatMatrix> {
    ConcatMatrix::register(reg, 1, width, |j, i| phi[j][i].clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityReport {
    pub values: Vec<f64>,
    pub scales: Vec<f64>,
    /// Smallest `value / scale` (zero-scale samples count as 0).
    pub min_normalized: f64,
    pub min_value: f64,
    pub hypothesis: MarginReport,
    /// Indices of samples below `-tol * scale`.
    pub violations: Vec<usize>,
    /// False only when the hypothesis holds and some sample is a violation.
    pub contract_holds: bool,
}

/// `int {phi, phi}` for each sample, checked against `-tol * int Sigma(phi phi^T)`.
pub fn nonneg_check_ii(inst: &NonnegInstance, samples: &[RowField]) -> Result<PositivityReport> {
    let hypothesis = hypothesis_margin(inst)?;
    let d = inst.dim();
    let mut base = Registry::for_tuple(&inst.tuple);
    let b = inst.register_frame(&mut base)?;
    let form = BilinearForm::from_frame(b, &mut base)?;
    let results: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|phi| {
            let mut reg = base.clone();
            let u = register_row(&mut reg, d - 1, phi)?;
            let value = integrate(&form.eval(&mut reg, &u, &u)?, &reg, &inst.tuple, &inst.p)?;
            let sq = u.mul_transpose(&u, &mut reg)?;
            let scale = integrate(&reg.sigma(sq.id(0, 0))?, &reg, &inst.tuple, &inst.p)?.abs();
            Ok((value, scale))
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let scales: Vec<f64> = results.iter().map(|r| r.1).collect();
    let violations: Vec<usize> =
        (0..values.len()).filter(|&k| values[k] < -POSITIVITY_TOL * scales[k]).collect();
    let min_normalized = values
        .iter()
        .zip(&scales)
        .map(|(&v, &s)| if s > 0.0 { v / s } else { 0.0 })
        .fold(f64::INFINITY, f64::min);
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    let contract_holds = !hypothesis.pass || violations.is_empty();
    Ok(PositivityReport { values, scales, min_normalized, min_value, hypothesis, violations, contract_holds })
}

/// The row function `h B` for a constant row vector `h` of length `d`.
pub fn null_direction(inst: &NonnegInstance, h: &[f64]) -> RowField {
    let d = inst.dim();
    inst.frames
        .iter()
        .map(|space| {
            space.iter().map(|b| (0..d - 1).map(|c| (0..d).map(|r| h[r] * b[(r, c)]).sum()).collect()).collect()
        })
        .collect()
}

/// `(int {u, v}, scale)` where `scale = sqrt(int Sigma(u u^T) * int Sigma(v v^T))`.
pub fn braket_integral(inst: &NonnegInstance, u: &RowField, v: &RowField) -> Result<(f64, f64)> {
    let d = inst.dim();
    let mut reg = Registry::for_tuple(&inst.tuple);
    let b = inst.register_frame(&mut reg)?;
    let form = BilinearForm::from_frame(b, &mut reg)?;
    let uu = register_row(&mut reg, d - 1, u)?;
    let vv = register_row(&mut reg, d - 1, v)?;
    let value = integrate(&form.eval(&mut reg, &uu, &vv)?, &reg, &inst.tuple, &inst.p)?;
    let mut norm = |w: &ConcatMatrix| -> Result<f64> {
        let sq = w.mul_transpose(w, &mut reg)?;
        Ok(integrate(&reg.sigma(sq.id(0, 0))?, &reg, &inst.tuple, &inst.p)?.abs())
    };
    let scale = (norm(&uu)? * norm(&vv)?).sqrt();
    Ok((value, scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityReport {
    /// `(eps, D(eps))`.
    pub rows: Vec<(f64, f64)>,
    pub pass: bool,
}

/// `D(eps) = |int G d mu^p - int G d nu_eps^p|` with `nu_eps = (1 + eps delta) mu`; the
/// ladder must halve `eps` and `D` must shrink by at least a factor 0.75 per step.
pub fn tv_continuity_probe(
    g: &VirtualFn,
    reg: &Registry,
    tuple: &MeasureTuple,
    p: &ExponentVec,
    delta: &[Vec<f64>],
    ladder: &[f64],
) -> Result<ContinuityReport> {
    let plan = IntegrationPlan::new(g, p)?;
    let base = plan.evaluate(reg, tuple)?;
    let mut rows = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let w: Vec<Vec<f64>> = delta.iter().map(|dj| dj.iter().map(|x| 1.0 + eps * x).collect()).collect();
        if w.iter().flatten().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("perturbed weight not positive at eps = {eps}")));
        }
        let masses = weighted(tuple, &w)?;
        rows.push((eps, (plan.evaluate_masses(reg, &masses)? - base).abs()));
    }
    let pass = rows.windows(2).all(|w| w[1].1 <= 0.75 * w[0].1 || (w[0].1 == 0.0 && w[1].1 == 0.0));
    Ok(ContinuityReport { rows, pass })
}

/// `eps_0, eps_0 / 2, ...` down to `eps_min` inclusive-ish.
pub fn halving_ladder(eps_0: f64, eps_min: f64) -> Vec<f64> {
    let mut out = vec![eps_0];
    while *out.last().expect("non-empty") / 2.0 >= eps_min * (1.0 - 1e-12) {
        out.push(out.last().expect("non-empty") / 2.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pi_frames(d: usize) -> Vec<DMatrix<f64>> {
        // pi_j: identity with column j removed
        (0..d).map(|j| DMatrix::from_fn(d, d - 1, |r, c| if r == if c < j { c } else { c + 1 } { 1.0 } else { 0.0 })).collect()
    }

    fn pi_instance(d: usize, p: f64, kappa: f64) -> NonnegInstance {
        let tuple = MeasureTuple::from_masses(&vec![vec![0.5, 1.5]; d]).unwrap();
        let refs = pi_frames(d);
        let frames = refs.iter().map(|b| vec![b.clone(), b.clone()]).collect();
        NonnegInstance::new(tuple, ExponentVec::uniform(p, d).unwrap(), frames, refs, 0.0, kappa, 4.0).unwrap()
    }

    #[test]
    fn exponential_family_derivative() {
        let t = MeasureTuple::from_masses(&[vec![1.0, 2.0]]).unwrap();
        let reg = Registry::for_tuple(&t);
        let wf = ExponentialFamily { base: vec![vec![1.0, 1.0]], rates: vec![vec![1.0, 1.0]] };
        let p = ExponentVec::new(vec![1.0]).unwrap();
        let d = ddt_integral(&VirtualFn::unit(), &reg, &t, &p, &wf, 0.3).unwrap();
        assert!((d - 3.0 * 0.3f64.exp()).abs() < 1e-12);
        let still = ExponentialFamily { base: vec![vec![1.0, 1.0]], rates: vec![vec![0.0, 0.0]] };
        assert_eq!(ddt_integral(&VirtualFn::unit(), &reg, &t, &p, &still, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_family_matches_finite_differences() {
        let t = MeasureTuple::from_masses(&[vec![0.7, 1.1, 0.4], vec![1.0, 0.2]]).unwrap();
        let mut reg = Registry::for_tuple(&t);
        let f = reg.insert_fn(|j, i| 0.3 + (j + 2 * i) as f64 * 0.25).unwrap();
        let g = reg.insert_fn(|j, i| ((j * 5 + i) as f64).cos()).unwrap();
        let integrand = &reg.sigma(f).unwrap().pow(2) * &reg.sigma(g).unwrap();
        let wf = GaussianFamily { distances: vec![vec![0.1, 0.5, 0.9], vec![0.3, 1.2]] };
        let p = ExponentVec::new(vec![1.3, 0.7]).unwrap();
        let tt = 0.8;
        let analytic = ddt_integral(&integrand, &reg, &t, &p, &wf, tt).unwrap();
        let fd = richardson_derivative(|s| flow_integral(&integrand, &reg, &t, &p, &wf, s), tt, 1e-4 * tt).unwrap();
        assert!((analytic - fd).abs() <= 1e-6 * analytic.abs(), "{analytic} vs {fd}");
        assert!(weight_ode_residual(&wf, tt, 1e-4).unwrap() < 1e-6);
    }

    #[test]
    fn outside_domain_rejected() {
        let t = MeasureTuple::from_masses(&[vec![1.0]]).unwrap();
        let reg = Registry::for_tuple(&t);
        let wf = GaussianFamily { distances: vec![vec![1.0]] };
        let p = ExponentVec::new(vec![1.0]).unwrap();
        assert!(matches!(ddt_integral(&VirtualFn::unit(), &reg, &t, &p, &wf, -1.0), Err(Error::OutsideDomain { .. })));
    }

    #[test]
    fn scalar_family_product_rule() {
        // F[t] = t^2 * unit, w = e^t: d/dt (t^2 (3 e^t)^p) = (2t + p t^2) (3e^t)^p
        let t = MeasureTuple::from_masses(&[vec![1.0, 2.0]]).unwrap();
        let fam = DerivableFamily {
            terms: vec![FamilyTerm { coefficient: Arc::new(|s: f64| (s * s, 2.0 * s)), factors: vec![] }],
        };
        let wf = ExponentialFamily { base: vec![vec![1.0, 1.0]], rates: vec![vec![1.0, 1.0]] };
        let p = 0.6;
        let pv = ExponentVec::new(vec![p]).unwrap();
        let s = 0.4f64;
        let got = ddt_integral_timedep(&fam, &t, &pv, &wf, s).unwrap();
        let expect = (2.0 * s + p * s * s) * (3.0 * s.exp()).powf(p);
        assert!((got - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn pi_frames_have_unit_determinant_at_p1() {
        let inst = pi_instance(2, 1.0, 0.1);
        let r = nonneg_check_i(&inst).unwrap();
        assert!((r.det_m0 - 1.0).abs() < 1e-15);
        assert!((r.lhs - r.mass_pow).abs() < 1e-12);
        assert!(r.residual < 1e-12);
    }

    #[test]
    fn margins_for_pi_frames() {
        let m = hypothesis_margin(&pi_instance(2, 1.0, 0.01)).unwrap();
        assert!(m.margins.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert!(!m.pass);
        let m = hypothesis_margin(&pi_instance(2, 1.5, 1.0 / 3.0 - 1e-9)).unwrap();
        assert!(m.margins.iter().all(|&x| (x - 1.5f64.powf(-0.5)).abs() < 1e-12));
        assert!(m.pass);
        let m = hypothesis_margin(&pi_instance(3, 0.8, 0.05)).unwrap();
        assert!(m.margins.iter().all(|&x| (x - 1.0 / 1.6f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn null_direction_integrates_to_zero() {
        let inst = pi_instance(3, 0.8, 0.1);
        let h = null_direction(&inst, &[0.3, -1.2, 0.5]);
        let v: RowField = vec![vec![vec![0.2, -0.4], vec![1.0, 0.3]]; 3];
        let (val, scale) = braket_integral(&inst, &h, &v).unwrap();
        assert!(val.abs() <= 1e-10 * scale.max(1.0), "{val}");
    }

    #[test]
    fn zero_field_gives_zero() {
        let inst = pi_instance(2, 1.5, 0.1);
        let zero: RowField = vec![vec![vec![0.0], vec![0.0]]; 2];
        let r = nonneg_check_ii(&inst, &[zero]).unwrap();
        assert_eq!(r.values, vec![0.0]);
        assert!(r.contract_holds);
    }

    #[test]
    fn continuity_probe_constant_delta() {
        let t = MeasureTuple::from_masses(&[vec![1.0, 2.0]]).unwrap();
        let reg = Registry::for_tuple(&t);
        let p = ExponentVec::new(vec![0.5]).unwrap();
        // nu = (1 + eps) mu: D = 3^0.5 ((1+eps)^0.5 - 1)
        let r = tv_continuity_probe(&VirtualFn::unit(), &reg, &t, &p, &[vec![1.0, 1.0]], &[1e-2, 5e-3]).unwrap();
        for (eps, dv) in &r.rows {
            assert!((dv - 3f64.sqrt() * ((1.0 + eps).sqrt() - 1.0)).abs() < 1e-14);
        }
        assert!(r.pass);
        let z = tv_continuity_probe(&VirtualFn::unit(), &reg, &t, &p, &[vec![0.0, 0.0]], &[1e-2, 5e-3]).unwrap();
        assert!(z.rows.iter().all(|r| r.1 == 0.0) && z.pass);
    }

    #[test]
    fn ladder_construction() {
        let l = halving_ladder(1e-2, 1e-5);
        assert_eq!(l.len(), 10);
        assert!(l[9] >= 1e-5);
    }
}
