use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use super::FnId;

/// Sorted multiset of factor handles; the empty monomial is the unit.
pub type Monomial = Vec<FnId>;

/// An element of the commutative unital algebra generated by the symbols `Sigma_p(f)`.
///
/// Canonical form: factors inside a monomial are sorted, equal monomials are merged
/// and exact-zero coefficients are removed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VirtualFn {
    terms: BTreeMap<Monomial, f64>,
}

fn merge_sorted(a: &[FnId], b: &[FnId]) -> Monomial {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

impl VirtualFn {
    pub fn zero() -> Self {
        VirtualFn::default()
    }

    pub fn unit() -> Self {
        Self::constant(1.0)
    }

    pub fn constant(c: f64) -> Self {
        let mut v = VirtualFn::zero();
        v.add_term(c, Vec::new());
        v
    }

    /// A single monomial `coeff * Sigma(f_1) ... Sigma(f_n)`.
    pub fn monomial(coeff: f64, factors: &[FnId]) -> Self {
        let mut v = VirtualFn::zero();
        v.add_term(coeff, factors.to_vec());
        v
    }

    pub(crate) fn add_term(&mut self, coeff: f64, mut factors: Monomial) {
        if coeff == 0.0 {
            return;
        }
        factors.sort_unstable();
        match self.terms.entry(factors) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(coeff);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                *e.get_mut() += coeff;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Maximal monomial size.
    pub fn degree(&self) -> usize {
        self.terms.keys().map(|m| m.len()).max().unwrap_or(0)
    }

    /// Every factor handle used, sorted and deduplicated.
    pub fn handles(&self) -> Vec<FnId> {
        let mut h: Vec<FnId> = self.terms.keys().flatten().copied().collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = VirtualFn::zero();
        for (m, k) in self.terms() {
            out.add_term(c * k, m.clone());
        }
        out
    }

    pub fn pow(&self, n: u32) -> Self {
        (0..n).fold(VirtualFn::unit(), |acc, _| &acc * self)
    }

    /// Apply the algebra homomorphism determined by `Sigma(f) -> image(f)`.
    pub fn substitute<E>(&self, mut image: impl FnMut(FnId) -> Result<VirtualFn, E>) -> Result<VirtualFn, E> {
        let mut cache: BTreeMap<FnId, VirtualFn> = BTreeMap::new();
        let mut out = VirtualFn::zero();
        for (m, c) in self.terms() {
            let mut prod = VirtualFn::constant(c);
            for &f in m {
                if let Entry::Vacant(slot) = cache.entry(f) {
                    slot.insert(image(f)?);
                }
                prod = &prod * &cache[&f];
            }
            out = &out + &prod;
        }
        Ok(out)
    }

    /// Leibniz rule: `d(prod Sigma(f_i)) = sum_i Sigma(f_i') prod_{k != i} Sigma(f_k)`,
    /// with `derivative(f)` the virtual derivative of `Sigma(f)`.
    pub fn derivative<E>(&self, mut derivative: impl FnMut(FnId) -> Result<VirtualFn, E>) -> Result<VirtualFn, E> {
        let mut cache: BTreeMap<FnId, VirtualFn> = BTreeMap::new();
        let mut out = VirtualFn::zero();
        for (m, c) in self.terms() {
            for i in 0..m.len() {
                let f = m[i];
                if let Entry::Vacant(slot) = cache.entry(f) {
                    slot.insert(derivative(f)?);
                }
                let rest: Vec<FnId> = m.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, h)| *h).collect();
                let piece = &VirtualFn::monomial(c, &rest) * &cache[&f];
                out = &out + &piece;
            }
        }
        Ok(out)
    }
}

impl Add for &VirtualFn {
    type Output = VirtualFn;
    fn add(self, rhs: &VirtualFn) -> VirtualFn {
        let mut out = self.clone();
        for (m, c) in rhs.terms() {
            out.add_term(c, m.clone());
        }
        out
    }
}

impl Sub for &VirtualFn {
    type Output = VirtualFn;
    fn sub(self, rhs: &VirtualFn) -> VirtualFn {
        let mut out = self.clone();
        for (m, c) in rhs.terms() {
            out.add_term(-c, m.clone());
        }
        out
    }
}

impl Mul for &VirtualFn {
    type Output = VirtualFn;
    fn mul(self, rhs: &VirtualFn) -> VirtualFn {
        let mut out = VirtualFn::zero();
        for (ma, ca) in self.terms() {
            for (mb, cb) in rhs.terms() {
                out.add_term(ca * cb, merge_sorted(ma, mb));
            }
        }
        out
    }
}

impl Neg for &VirtualFn {
    type Output = VirtualFn;
    fn neg(self) -> VirtualFn {
        self.scale(-1.0)
    }
}

impl Add for VirtualFn {
    type Output = VirtualFn;
    fn add(self, rhs: VirtualFn) -> VirtualFn {
        &self + &rhs
    }
}

impl Sub for VirtualFn {
    type Output = VirtualFn;
    fn sub(self, rhs: VirtualFn) -> VirtualFn {
        &self - &rhs
    }
}

impl Mul for VirtualFn {
    type Output = VirtualFn;
    fn mul(self, rhs: VirtualFn) -> VirtualFn {
        &self * &rhs
    }
}

impl Neg for VirtualFn {
    type Output = VirtualFn;
    fn neg(self) -> VirtualFn {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(k: u32) -> FnId {
        FnId(k)
    }

    #[test]
    fn product_concatenates_multisets() {
        let f = VirtualFn::monomial(1.0, &[id(0)]);
        let g = VirtualFn::monomial(1.0, &[id(1)]);
        let fg = &f * &g;
        assert_eq!(fg.terms().collect::<Vec<_>>(), vec![(&vec![id(0), id(1)], 1.0)]);
        assert_eq!(fg, &g * &f);
    }

    #[test]
    fn additive_inverse_and_unit() {
        let f = &VirtualFn::monomial(2.0, &[id(3), id(1)]) + &VirtualFn::constant(0.5);
        assert!((&f + &f.scale(-1.0)).is_zero());
        assert!((&f - &f).is_zero());
        assert_eq!(&VirtualFn::unit() * &f, f);
    }

    #[test]
    fn canonical_form_sorts_and_merges() {
        let a = VirtualFn::monomial(1.0, &[id(2), id(0), id(2)]);
        let b = VirtualFn::monomial(3.0, &[id(0), id(2), id(2)]);
        let s = &a + &b;
        assert_eq!(s.num_terms(), 1);
        assert_eq!(s.terms().next().unwrap(), (&vec![id(0), id(2), id(2)], 4.0));
        assert_eq!(s.degree(), 3);
    }

    #[test]
    fn zero_coefficients_are_pruned() {
        let mut v = VirtualFn::zero();
        v.add_term(1.0, vec![id(0)]);
        v.add_term(2.0, vec![id(1)]);
        v.add_term(-1.0, vec![id(0)]);
        assert_eq!(v.num_terms(), 1);
        assert_eq!(VirtualFn::monomial(0.0, &[id(0)]), VirtualFn::zero());
    }

    #[test]
    fn binomial_square() {
        let x = VirtualFn::monomial(1.0, &[id(0)]);
        let y = VirtualFn::monomial(1.0, &[id(1)]);
        let sq = (&x + &y).pow(2);
        let expect = &(&x.pow(2) + &y.pow(2)) + &(&x * &y).scale(2.0);
        assert_eq!(sq, expect);
    }

    #[test]
    fn leibniz_derivative() {
        // d(x^2 y) with x' = z, y' = 1
        let x = VirtualFn::monomial(1.0, &[id(0)]);
        let y = VirtualFn::monomial(1.0, &[id(1)]);
        let f = &x.pow(2) * &y;
        let d = f
            .derivative(|h| -> Result<_, ()> {
                Ok(if h == id(0) { VirtualFn::monomial(1.0, &[id(2)]) } else { VirtualFn::unit() })
            })
            .unwrap();
        let expect = &VirtualFn::monomial(2.0, &[id(0), id(1), id(2)]) + &VirtualFn::monomial(1.0, &[id(0), id(0)]);
        assert_eq!(d, expect);
    }

    #[test]
    fn substitution_is_a_homomorphism() {
        let x = VirtualFn::monomial(1.0, &[id(0)]);
        let f = &(&x * &x) + &VirtualFn::constant(3.0);
        let g = f
            .substitute(|_| -> Result<_, ()> { Ok(&VirtualFn::monomial(1.0, &[id(5)]) + &VirtualFn::unit()) })
            .unwrap();
        let y = &VirtualFn::monomial(1.0, &[id(5)]) + &VirtualFn::unit();
        assert_eq!(g, &(&y * &y) + &VirtualFn::constant(3.0));
    }
}
