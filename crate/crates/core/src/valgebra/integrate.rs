//! Evaluation of virtual integrals.
//!
//! For a monomial `Sigma(f_1) ... Sigma(f_n)` the virtual integral is
//!
//! ```text
//!   sum_a binom(p, a) sum_{surjections [n] -> [a]} int prod_i f_i d mu^a * prod_j m_j^(p_j - a_j)
//! ```
//!
//! A surjection onto the slots `[a]` is a set partition of the factors into
//! `sum_j a_j` blocks together with an injective labelling of the blocks by slots.
//! Summing over the `a_j!` labellings turns `binom(p_j, a_j)` into the falling
//! factorial `p_j (p_j - 1) ... (p_j - a_j + 1)`, so [`IntegrationPlan`] enumerates
//! (partition, space assignment) pairs instead. [`integrate_surjections`] keeps the
//! literal slot enumeration for cross-checking.

use std::collections::BTreeMap;

use super::identities::multi_binom;
use super::{ExponentVec, FnId, Registry, VirtualFn};
use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, MeasureTuple, MIN_TOTAL_MASS};

/// Largest monomial size accepted by the evaluators.
pub const MAX_DEGREE: usize = 12;

/// Default limit on the number of points of the classical product space.
pub const BRUTEFORCE_CAP: f64 = 1e7;

/// `p (p - 1) ... (p - k + 1)`.
pub fn falling_factorial(p: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (p - i as f64))
}

fn check_degree(f: &VirtualFn) -> Result<()> {
    let n = f.degree();
    if n > MAX_DEGREE {
        return Err(Error::DegreeTooLarge { degree: n, limit: MAX_DEGREE });
    }
    Ok(())
}

fn check_binding(reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec) -> Result<()> {
    if p.len() != tuple.dim() {
        return Err(Error::ShapeMismatch(format!("{} exponents for {} spaces", p.len(), tuple.dim())));
    }
    if reg.sizes() != tuple.sizes().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "registry shape {:?} does not match tuple shape {:?}",
            reg.sizes(),
            tuple.sizes()
        )));
    }
    Ok(())
}

/// A virtual integral compiled for a fixed symbolic integrand and exponent vector.
///
/// The plan depends only on the structure of the integrand, so it can be reused
/// across measures and across registries that bind the same handles to other
/// values (the per-point registries of the heat-flow functional).
#[derive(Debug, Clone)]
pub struct IntegrationPlan {
    exponents: ExponentVec,
    /// Distinct blocks: a space index and the sorted factors integrated together.
    blocks: Vec<(usize, Vec<FnId>)>,
    /// `(coefficient, sorted block indices)`; the coefficient absorbs the falling factorials.
    leaves: Vec<(f64, Vec<u32>)>,
}

struct Builder<'a> {
    p: &'a [f64],
    block_index: BTreeMap<(usize, Vec<FnId>), u32>,
    blocks: Vec<(usize, Vec<FnId>)>,
    leaves: BTreeMap<Vec<u32>, f64>,
}

impl Builder<'_> {
    fn intern(&mut self, key: (usize, Vec<FnId>)) -> u32 {
        if let Some(&k) = self.block_index.get(&key) {
            return k;
        }
        let k = self.blocks.len() as u32;
        self.blocks.push(key.clone());
        self.block_index.insert(key, k);
        k
    }

    /// Place factor `i` either into an open block or into a new block on some space.
    fn recurse(
        &mut self,
        coeff: f64,
        factors: &[FnId],
        i: usize,
        open: &mut Vec<(usize, Vec<FnId>)>,
        counts: &mut Vec<usize>,
    ) {
        if i == factors.len() {
            let weight: f64 = counts.iter().zip(self.p).map(|(&a, &pj)| falling_factorial(pj, a)).product();
            let c = coeff * weight;
            if c == 0.0 {
                return;
            }
            let mut ids: Vec<u32> = open
                .iter()
                .map(|(j, fs)| {
                    let mut fs = fs.clone();
                    fs.sort_unstable();
                    self.intern((*j, fs))
                })
                .collect();
            ids.sort_unstable();
            *self.leaves.entry(ids).or_insert(0.0) += c;
            return;
        }
        for b in 0..open.len() {
            open[b].1.push(factors[i]);
            self.recurse(coeff, factors, i + 1, open, counts);
            open[b].1.pop();
        }
        for j in 0..self.p.len() {
            // an integer exponent p_j admits at most p_j blocks on space j
            if falling_factorial(self.p[j], counts[j] + 1) == 0.0 {
                continue;
            }
            counts[j] += 1;
            open.push((j, vec![factors[i]]));
            self.recurse(coeff, factors, i + 1, open, counts);
            open.pop();
            counts[j] -= 1;
        }
    }
}

impl IntegrationPlan {
    pub fn new(f: &VirtualFn, p: &ExponentVec) -> Result<Self> {
        check_degree(f)?;
        let mut b = Builder { p: p.as_slice(), block_index: BTreeMap::new(), blocks: Vec::new(), leaves: BTreeMap::new() };
        for (mono, coeff) in f.terms() {
            b.recurse(coeff, mono, 0, &mut Vec::new(), &mut vec![0; p.len()]);
        }
        let leaves = b.leaves.into_iter().filter(|(_, c)| *c != 0.0).map(|(k, c)| (c, k)).collect();
        Ok(IntegrationPlan { exponents: p.clone(), blocks: b.blocks, leaves })
    }

    pub fn exponents(&self) -> &ExponentVec {
        &self.exponents
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn evaluate(&self, reg: &Registry, tuple: &MeasureTuple) -> Result<f64> {
        check_binding(reg, tuple, &self.exponents)?;
        self.evaluate_masses(reg, &tuple.masses())
    }

    /// Evaluate against per-space atom masses (for instance a weighted measure).
    ///
    /// Each block integral is taken against the normalized measure `mu_j / m_j`, and
    /// the overall factor `prod_j m_j^p_j` is applied once; this is the same sum
    /// as the defining formula but stays finite when the masses are tiny.
    pub fn evaluate_masses(&self, reg: &Registry, masses: &[Vec<f64>]) -> Result<f64> {
        if masses.len() != self.exponents.len() {
            return Err(Error::ShapeMismatch(format!("{} spaces for {} exponents", masses.len(), self.exponents.len())));
        }
        let totals: Vec<f64> = masses.iter().map(|m| pairwise_sum(m)).collect();
        if let Some((j, t)) = totals.iter().enumerate().find(|(_, t)| !(**t > MIN_TOTAL_MASS && t.is_finite())) {
            return Err(Error::Domain(format!("space {j} has total mass {t}")));
        }
        let mut scratch = Vec::new();
        let mut block_vals = Vec::with_capacity(self.blocks.len());
        for (j, fs) in &self.blocks {
            let j = *j;
            let comps: Vec<&[f64]> = fs.iter().map(|&h| reg.get(h).map(|f| f.component(j))).collect::<Result<_>>()?;
            scratch.clear();
            for (i, &m) in masses[j].iter().enumerate() {
                let mut v = m / totals[j];
                for c in &comps {
                    v *= c[i];
                }
                scratch.push(v);
            }
            block_vals.push(pairwise_sum(&scratch));
        }
        let mut sum = 0.0;
        for (c, ids) in &self.leaves {
            sum += ids.iter().fold(*c, |acc, &k| acc * block_vals[k as usize]);
        }
        let mass_pow: f64 =
            totals.iter().zip(self.exponents.iter()).map(|(&m, &pj)| (pj * m.ln()).exp()).product();
        Ok(sum * mass_pow)
    }
}

/// The virtual integral of `f` against `tuple^p`.
pub fn integrate(f: &VirtualFn, reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec) -> Result<f64> {
    check_binding(reg, tuple, p)?;
    IntegrationPlan::new(f, p)?.evaluate(reg, tuple)
}

/// Compositions `a` with `a_j <= n` and `sum a <= n`, in lexicographic order.
fn exponent_tuples(d: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a = vec![0usize; d];
    loop {
        if a.iter().sum::<usize>() <= n {
            out.push(a.clone());
        }
        let mut k = d;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if a[k] < n {
                a[k] += 1;
                break;
            }
            a[k] = 0;
        }
    }
}

/// Literal evaluation: every `a` and every surjection `[n] -> [a]`, both in lexicographic order.
///
/// Exponential in the degree; meant for cross-checking [`integrate`].
pub fn integrate_surjections(f: &VirtualFn, reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec) -> Result<f64> {
    check_binding(reg, tuple, p)?;
    check_degree(f)?;
    let d = tuple.dim();
    let masses = tuple.masses();
    let totals = tuple.total_masses();
    let mut total = 0.0;
    for (mono, coeff) in f.terms() {
        let n = mono.len();
        let comps: Vec<&super::ConcatFn> = mono.iter().map(|&h| reg.get(h)).collect::<Result<_>>()?;
        let mut term = 0.0;
        for a in exponent_tuples(d, n) {
            let slots: Vec<usize> = a.iter().enumerate().flat_map(|(j, &aj)| std::iter::repeat_n(j, aj)).collect();
            let s = slots.len();
            let mut surj_sum = 0.0;
            if s == 0 {
                if n == 0 {
                    surj_sum = 1.0;
                }
            } else {
                let mut map = vec![0usize; n];
                loop {
                    let mut hit = vec![false; s];
                    for &m in &map {
                        hit[m] = true;
                    }
                    if hit.iter().all(|&h| h) {
                        let mut prod = 1.0;
                        for (slot, &j) in slots.iter().enumerate() {
                            let mut acc = 0.0;
                            for (w, &m) in masses[j].iter().enumerate() {
                                let mut v = m;
                                for (i, &target) in map.iter().enumerate() {
                                    if target == slot {
                                        v *= comps[i].get(j, w);
                                    }
                                }
                                acc += v;
                            }
                            prod *= acc;
                        }
                        surj_sum += prod;
                    }
                    let mut k = n;
                    let mut done = true;
                    while k > 0 {
                        k -= 1;
                        if map[k] + 1 < s {
                            map[k] += 1;
                            done = false;
                            break;
                        }
                        map[k] = 0;
                    }
                    if done {
                        break;
                    }
                }
            }
            if surj_sum == 0.0 {
                continue;
            }
            let binom = multi_binom(p.as_slice(), &a);
            let mass_factor: f64 =
                (0..d).map(|j| ((p[j] - a[j] as f64) * totals[j].ln()).exp()).product();
            term += binom * surj_sum * mass_factor;
        }
        total += coeff * term;
    }
    Ok(total)
}

/// Classical integral over the genuine product space `Omega^p` for natural-number `p`.
pub fn integrate_bruteforce(f: &VirtualFn, reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec) -> Result<f64> {
    integrate_bruteforce_capped(f, reg, tuple, p, BRUTEFORCE_CAP)
}

pub fn integrate_bruteforce_capped(
    f: &VirtualFn,
    reg: &Registry,
    tuple: &MeasureTuple,
    p: &ExponentVec,
    cap: f64,
) -> Result<f64> {
    check_binding(reg, tuple, p)?;
    let counts = p.to_natural().ok_or_else(|| Error::Domain("brute force needs natural-number exponents".into()))?;
    let sizes = tuple.sizes();
    let size: f64 = sizes.iter().zip(&counts).map(|(&n, &k)| (n as f64).powi(k as i32)).product();
    if size > cap {
        return Err(Error::CapExceeded { size, cap });
    }
    // one coordinate slot per copy of each space
    let slots: Vec<usize> = counts.iter().enumerate().flat_map(|(j, &k)| std::iter::repeat_n(j, k)).collect();
    let masses = tuple.masses();
    let handles = f.handles();
    let funcs: Vec<&super::ConcatFn> = handles.iter().map(|&h| reg.get(h)).collect::<Result<_>>()?;
    let terms: Vec<(Vec<usize>, f64)> = f
        .terms()
        .map(|(m, c)| (m.iter().map(|h| handles.binary_search(h).expect("handle listed")).collect(), c))
        .collect();

    let mut idx = vec![0usize; slots.len()];
    let mut sigma = vec![0.0; handles.len()];
    let mut total = 0.0;
    loop {
        let mut weight = 1.0;
        for (s, &j) in slots.iter().enumerate() {
            weight *= masses[j][idx[s]];
        }
        for (k, g) in funcs.iter().enumerate() {
            sigma[k] = slots.iter().enumerate().map(|(s, &j)| g.get(j, idx[s])).sum();
        }
        let value: f64 = terms.iter().map(|(m, c)| m.iter().fold(*c, |acc, &k| acc * sigma[k])).sum();
        total += weight * value;

        let mut s = slots.len();
        loop {
            if s == 0 {
                return Ok(total);
            }
            s -= 1;
            if idx[s] + 1 < sizes[slots[s]] {
                idx[s] += 1;
                break;
            }
            idx[s] = 0;
        }
    }
}
