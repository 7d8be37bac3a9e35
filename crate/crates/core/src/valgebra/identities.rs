//! Closed-form integration identities, the Hölder-type bound and pullbacks.

use std::collections::BTreeMap;

use super::integrate::falling_factorial;
use super::{ExponentVec, FnId, Registry, VirtualFn, MAX_DEGREE};
use crate::error::{Error, Result};
use crate::measure::{DiscreteMeasure, MeasureTuple};

/// `prod_j binom(p_j, k_j)` for real `p_j`.
pub fn multi_binom(p: &[f64], k: &[usize]) -> f64 {
    assert_eq!(p.len(), k.len(), "multi_binom: length mismatch");
    p.iter()
        .zip(k)
        .map(|(&pj, &kj)| {
            let fact: f64 = (1..=kj).map(|i| i as f64).product();
            falling_factorial(pj, kj) / fact
        })
        .product()
}

fn components<'a>(reg: &'a Registry, tuple: &MeasureTuple, f: FnId) -> Result<&'a [Vec<f64>]> {
    let v = reg.get(f)?.values();
    if v.len() != tuple.dim() {
        return Err(Error::ShapeMismatch("function and tuple disagree on d".into()));
    }
    Ok(v)
}

fn mean_sum(tuple: &MeasureTuple, p: &ExponentVec, f: &[Vec<f64>]) -> f64 {
    tuple.spaces().iter().zip(p.iter()).zip(f).map(|((s, &pj), fj)| pj * s.expect(fj)).sum()
}

/// `(sum_j p_j E f_j) * mu(Omega)^p`, the integral of a single summed function.
pub fn closed_form_linear(tuple: &MeasureTuple, p: &ExponentVec, reg: &Registry, f: FnId) -> Result<f64> {
    let fv = components(reg, tuple, f)?;
    Ok(mean_sum(tuple, p, fv) * tuple.mass_power(p)?)
}

/// `[(sum p_j E f_j)(sum p_j E g_j) + sum p_j Cov(f_j, g_j)] * mu(Omega)^p`.
pub fn closed_form_bilinear(tuple: &MeasureTuple, p: &ExponentVec, reg: &Registry, f: FnId, g: FnId) -> Result<f64> {
    let fv = components(reg, tuple, f)?;
    let gv = components(reg, tuple, g)?;
    let cov: f64 = tuple
        .spaces()
        .iter()
        .zip(p.iter())
        .enumerate()
        .map(|(j, (s, &pj))| pj * s.covariance(&fv[j], &gv[j]))
        .sum();
    Ok((mean_sum(tuple, p, fv) * mean_sum(tuple, p, gv) + cov) * tuple.mass_power(p)?)
}

/// The integral of `Sigma(f) Sigma(g)` as the three sums over two distinct spaces,
/// two copies of one space, and one shared coordinate.
pub fn fgs_expansion(tuple: &MeasureTuple, p: &ExponentVec, reg: &Registry, f: FnId, g: FnId) -> Result<f64> {
    let fv = components(reg, tuple, f)?;
    let gv = components(reg, tuple, g)?;
    let d = tuple.dim();
    let masses = tuple.masses();
    let totals = tuple.total_masses();
    let integral = |j: usize, h: &[f64]| -> f64 { masses[j].iter().zip(h).map(|(m, v)| m * v).sum() };
    let mass_pow = |shift: &dyn Fn(usize) -> f64| -> f64 {
        (0..d).map(|j| ((p[j] - shift(j)) * totals[j].ln()).exp()).product()
    };

    let mut distinct = 0.0;
    for j1 in 0..d {
        for j2 in j1 + 1..d {
            let cross = integral(j1, &fv[j1]) * integral(j2, &gv[j2]) + integral(j2, &fv[j2]) * integral(j1, &gv[j1]);
            let shift = |j: usize| (j == j1) as usize as f64 + (j == j2) as usize as f64;
            distinct += p[j1] * p[j2] * cross * mass_pow(&shift);
        }
    }
    let mut same = 0.0;
    let mut diag = 0.0;
    for j1 in 0..d {
        let binom2 = p[j1] * (p[j1] - 1.0) / 2.0;
        let cross = 2.0 * integral(j1, &fv[j1]) * integral(j1, &gv[j1]);
        same += binom2 * cross * mass_pow(&|j: usize| if j == j1 { 2.0 } else { 0.0 });
        let fg: Vec<f64> = fv[j1].iter().zip(&gv[j1]).map(|(a, b)| a * b).collect();
        diag += p[j1] * integral(j1, &fg) * mass_pow(&|j: usize| if j == j1 { 1.0 } else { 0.0 });
    }
    Ok(distinct + same + diag)
}

/// `p Var(f^2) + p (3p - 2) (E f^2)^2`: the fourth virtual moment of a centred
/// function on a probability space.
pub fn quartic_centered_closed_form(mu: &DiscreteMeasure, p: f64, f: &[f64]) -> f64 {
    let f2: Vec<f64> = f.iter().map(|v| v * v).collect();
    let m2 = mu.expect(&f2);
    p * mu.variance(&f2) + p * (3.0 * p - 2.0) * m2 * m2
}

/// Choice of Hölder exponents `q_i` for the factors of each term.
#[derive(Debug, Clone, PartialEq)]
pub enum HolderExponents {
    /// `q_i = n` for a term with `n` factors.
    Equal,
    /// One exponent list per term, in the canonical term order; `f64::INFINITY` means sup norm.
    PerTerm(Vec<Vec<f64>>),
}

/// Number of surjections from an `n`-set onto an `s`-set.
fn surjection_count(n: usize, s: usize) -> f64 {
    // inclusion-exclusion: sum_k (-1)^k C(s,k) (s-k)^n
    let mut total = 0.0;
    let mut binom = 1.0;
    for k in 0..=s {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binom * ((s - k) as f64).powi(n as i32);
        binom = binom * (s - k) as f64 / (k + 1) as f64;
    }
    total
}

fn lq_norm(mu: &DiscreteMeasure, f: &[f64], q: f64) -> f64 {
    if q.is_infinite() {
        return mu.atoms().iter().zip(f).filter(|(a, _)| a.mass > 0.0).fold(0.0, |m, (_, v)| m.max(v.abs()));
    }
    let powered: Vec<f64> = f.iter().map(|v| v.abs().powf(q)).collect();
    mu.expect(&powered).powf(1.0 / q)
}

/// Explicit upper bound for `|integral of F|`.
///
/// Each surjection integral is bounded by Hölder on the product of the spaces it
/// uses, which leaves `prod_i sum_j ||f_{i,j}||_{q_i}` times `prod_j m_j^p_j`;
/// the combinatorial constant is `sum_a |binom(p, a)| * #surjections([n] -> [a])`.
pub fn holder_bound(f: &VirtualFn, tuple: &MeasureTuple, p: &ExponentVec, reg: &Registry, q: &HolderExponents) -> Result<f64> {
    let d = tuple.dim();
    let mass_pow = tuple.mass_power(p)?;
    if let HolderExponents::PerTerm(list) = q {
        if list.len() != f.num_terms() {
            return Err(Error::Config(format!("{} exponent lists for {} terms", list.len(), f.num_terms())));
        }
    }
    let mut constants: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (t, (mono, coeff)) in f.terms().enumerate() {
        let n = mono.len();
        if n > MAX_DEGREE {
            return Err(Error::DegreeTooLarge { degree: n, limit: MAX_DEGREE });
        }
        let qs: Vec<f64> = match q {
            HolderExponents::Equal => vec![n as f64; n],
            HolderExponents::PerTerm(list) => list[t].clone(),
        };
        if qs.len() != n {
            return Err(Error::Config(format!("term {t}: {} exponents for {n} factors", qs.len())));
        }
        if n > 0 {
            let recip: f64 = qs.iter().map(|&qi| if qi.is_infinite() { 0.0 } else { 1.0 / qi }).sum();
            if qs.iter().any(|&qi| !(qi >= 1.0)) || (recip - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("term {t}: exponents {qs:?} are not Hölder conjugate")));
            }
        }
        let combinatorial = *constants.entry(n).or_insert_with(|| {
            let mut c = 0.0;
            let mut a = vec![0usize; d];
            loop {
                let s: usize = a.iter().sum();
                if s <= n {
                    c += multi_binom(p.as_slice(), &a).abs() * surjection_count(n, s);
                }
                let mut k = d;
                let mut done = true;
                while k > 0 {
                    k -= 1;
                    if a[k] < n {
                        a[k] += 1;
                        done = false;
                        break;
                    }
                    a[k] = 0;
                }
                if done {
                    break c;
                }
            }
        });
        let mut norms = 1.0;
        for (&h, &qi) in mono.iter().zip(&qs) {
            let fv = reg.get(h)?.values();
            norms *= (0..d).map(|j| lq_norm(tuple.space(j), &fv[j], qi)).sum::<f64>();
        }
        total += coeff.abs() * combinatorial * norms;
    }
    Ok(total * mass_pow)
}

/// Pull a virtual function back along per-space atom maps.
///
/// `maps[j][i]` is the index in target space `j` of source atom `i`. Each factor
/// `Sigma(f')` becomes `Sigma(f' o pi)`, registered in `source`.
pub fn pullback(f: &VirtualFn, target: &Registry, source: &mut Registry, maps: &[Vec<usize>]) -> Result<VirtualFn> {
    if maps.len() != source.sizes().len() || maps.len() != target.sizes().len() {
        return Err(Error::ShapeMismatch("one map per space required".into()));
    }
    for (j, m) in maps.iter().enumerate() {
        if m.len() != source.sizes()[j] || m.iter().any(|&k| k >= target.sizes()[j]) {
            return Err(Error::ShapeMismatch(format!("map for space {j} is not total into the target")));
        }
    }
    f.substitute(|h| {
        let fv = target.get(h)?.values().to_vec();
        let id = source.insert_fn(|j, i| fv[j][maps[j][i]])?;
        source.sigma(id)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::valgebra::integrate;

    #[test]
    fn binomials() {
        assert!((multi_binom(&[2.5], &[2]) - 1.875).abs() < 1e-15);
        assert_eq!(multi_binom(&[0.3, 7.0], &[0, 0]), 1.0);
        assert!((multi_binom(&[0.5], &[3]) - 0.0625).abs() < 1e-15);
        assert_eq!(multi_binom(&[2.0], &[3]), 0.0);
    }

    #[test]
    fn surjection_counts() {
        assert_eq!(surjection_count(0, 0), 1.0);
        assert_eq!(surjection_count(3, 0), 0.0);
        assert_eq!(surjection_count(3, 2), 6.0);
        assert_eq!(surjection_count(4, 4), 24.0);
        assert_eq!(surjection_count(2, 3), 0.0);
    }

    #[test]
    fn second_moment_at_unit_exponent() {
        let t = MeasureTuple::from_masses(&[vec![0.25, 0.75]]).unwrap();
        let mut reg = Registry::for_tuple(&t);
        let f = reg.insert_values(vec![vec![2.0, -1.0]]).unwrap();
        let p = ExponentVec::new(vec![1.0]).unwrap();
        let v = closed_form_bilinear(&t, &p, &reg, f, f).unwrap();
        // E f^2 = 0.25*4 + 0.75*1
        assert!((v - 1.75).abs() < 1e-15);
    }

    #[test]
    fn three_sum_expansion_matches_general_formula() {
        let t = MeasureTuple::from_masses(&[vec![0.4, 1.2], vec![0.9], vec![0.3, 0.3, 2.0]]).unwrap();
        let mut reg = Registry::for_tuple(&t);
        let f = reg.insert_fn(|j, i| (j as f64 + 1.0) * 0.3 - i as f64 * 0.7).unwrap();
        let g = reg.insert_fn(|j, i| ((j * 3 + i) as f64).sin()).unwrap();
        let p = ExponentVec::new(vec![0.6, 1.7, 2.4]).unwrap();
        let prod = &reg.sigma(f).unwrap() * &reg.sigma(g).unwrap();
        let general = integrate(&prod, &reg, &t, &p).unwrap();
        let fgs = fgs_expansion(&t, &p, &reg, f, g).unwrap();
        let paj = closed_form_bilinear(&t, &p, &reg, f, g).unwrap();
        assert!((general - fgs).abs() < 1e-12 * general.abs().max(1.0));
        assert!((general - paj).abs() < 1e-12 * general.abs().max(1.0));
    }

    #[test]
    fn holder_bound_of_unit_is_mass_power() {
        let t = MeasureTuple::from_masses(&[vec![2.0, 1.0]]).unwrap();
        let reg = Registry::for_tuple(&t);
        let p = ExponentVec::new(vec![0.7]).unwrap();
        let b = holder_bound(&VirtualFn::unit(), &t, &p, &reg, &HolderExponents::Equal).unwrap();
        assert!((b - 3f64.powf(0.7)).abs() < 1e-14);
    }

    #[test]
    fn holder_rejects_bad_exponents() {
        let t = MeasureTuple::from_masses(&[vec![1.0]]).unwrap();
        let mut reg = Registry::for_tuple(&t);
        let f = reg.insert_values(vec![vec![1.0]]).unwrap();
        let sf = reg.sigma(f).unwrap();
        let p = ExponentVec::new(vec![1.0]).unwrap();
        let r = holder_bound(&(&sf * &sf), &t, &p, &reg, &HolderExponents::PerTerm(vec![vec![3.0, 3.0]]));
        assert!(matches!(r, Err(Error::Config(_))));
        let ok = holder_bound(&(&sf * &sf), &t, &p, &reg, &HolderExponents::PerTerm(vec![vec![1.0, f64::INFINITY]]));
        assert!(ok.is_ok());
    }

    #[test]
    fn pullback_along_identity_is_trivial_in_value() {
        let t = MeasureTuple::from_masses(&[vec![1.0, 2.0]]).unwrap();
        let mut target = Registry::for_tuple(&t);
        let f = target.insert_values(vec![vec![3.0, -1.0]]).unwrap();
        let sf = target.sigma(f).unwrap().pow(2);
        let mut source = Registry::for_tuple(&t);
        let pulled = pullback(&sf, &target, &mut source, &[vec![0, 1]]).unwrap();
        let p = ExponentVec::new(vec![0.8]).unwrap();
        let a = integrate(&sf, &target, &t, &p).unwrap();
        let b = integrate(&pulled, &source, &t, &p).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}
