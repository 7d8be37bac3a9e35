//! The virtual-function algebra and the virtual integral.
//!
//! A [`VirtualFn`] is a finite real linear combination of commutative products of
//! summed functions `Sigma_p(f)`, where each `f` is a [`ConcatFn`] on the disjoint
//! union of the spaces of a [`MeasureTuple`](crate::measure::MeasureTuple). Factors
//! are referenced by [`FnId`] handles into an append-only [`Registry`]; identity of
//! factors is handle identity.
//!
//! Integration against a fractional power `mu^p` is defined by the surjection
//! expansion, see [`integrate`].

mod algebra;
mod identities;
mod integrate;

pub use algebra::{Monomial, VirtualFn};
pub use identities::{
    closed_form_bilinear, closed_form_linear, fgs_expansion, holder_bound, multi_binom, pullback,
    quartic_centered_closed_form, HolderExponents,
};
pub use integrate::{
    falling_factorial, integrate, integrate_bruteforce, integrate_bruteforce_capped, integrate_surjections,
    IntegrationPlan, BRUTEFORCE_CAP, MAX_DEGREE,
};

use crate::error::{Error, Result};
use crate::measure::MeasureTuple;

/// A tuple of strictly positive real exponents `p = (p_1, ..., p_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentVec(Vec<f64>);

impl ExponentVec {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Domain("empty exponent vector".into()));
        }
        if let Some(bad) = entries.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Domain(format!("exponent {bad} is not a positive real")));
        }
        Ok(ExponentVec(entries))
    }

    /// Natural-number exponents, zero allowed. Only meaningful for the brute-force oracle.
    pub fn natural(entries: &[usize]) -> Self {
        ExponentVec(entries.iter().map(|&k| k as f64).collect())
    }

    pub fn uniform(p: f64, d: usize) -> Result<Self> {
        Self::new(vec![p; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// True when every entry is a natural number.
    pub fn is_integer(&self) -> bool {
        self.0.iter().all(|p| *p >= 0.0 && p.fract() == 0.0)
    }

    pub fn to_natural(&self) -> Option<Vec<usize>> {
        self.is_integer().then(|| self.0.iter().map(|&p| p as usize).collect())
    }
}

impl std::ops::Index<usize> for ExponentVec {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Handle of a function in a [`Registry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FnId(pub(crate) u32);

impl FnId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A real function on the disjoint union: `values[j][i]` is its value at atom `i` of space `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatFn {
    values: Vec<Vec<f64>>,
}

impl ConcatFn {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        for (j, comp) in values.iter().enumerate() {
            if let Some(bad) = comp.iter().find(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite value {bad} in component {j}")));
            }
        }
        Ok(ConcatFn { values })
    }

    /// Build from a closure `(space, atom index) -> value` over the shape `sizes`.
    pub fn from_fn(sizes: &[usize], mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(
            sizes
                .iter()
                .enumerate()
                .map(|(j, &n)| (0..n).map(|i| f(j, i)).collect())
                .collect(),
        )
    }

    pub fn constant(sizes: &[usize], c: f64) -> Result<Self> {
        Self::from_fn(sizes, |_, _| c)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// The component `f_j` on space `j`.
    pub fn component(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j][i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.len()).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ConcatFn {
        ConcatFn { values: self.values.iter().map(|c| c.iter().map(|&v| f(v)).collect()).collect() }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    f: ConcatFn,
    /// Linear decomposition into base handles, when the entry was registered as one.
    expansion: Option<Vec<(f64, FnId)>>,
}

/// Append-only store of concatenated functions bound to one tuple shape.
#[derive(Debug, Clone)]
pub struct Registry {
    sizes: Vec<usize>,
    entries: Vec<Entry>,
}

impl Registry {
    pub fn new(sizes: Vec<usize>) -> Self {
        Registry { sizes, entries: Vec::new() }
    }

    pub fn for_tuple(tuple: &MeasureTuple) -> Self {
        Self::new(tuple.sizes())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_shape(&self, f: &ConcatFn) -> Result<()> {
        if f.sizes() != self.sizes {
            return Err(Error::ShapeMismatch(format!(
                "function of shape {:?} in a registry of shape {:?}",
                f.sizes(),
                self.sizes
            )));
        }
        Ok(())
    }

    /// Register a base function.
    pub fn insert(&mut self, f: ConcatFn) -> Result<FnId> {
        self.check_shape(&f)?;
        self.entries.push(Entry { f, expansion: None });
        Ok(FnId(self.entries.len() as u32 - 1))
    }

    pub fn insert_values(&mut self, values: Vec<Vec<f64>>) -> Result<FnId> {
        self.insert(ConcatFn::new(values)?)
    }

    pub fn insert_fn(&mut self, f: impl FnMut(usize, usize) -> f64) -> Result<FnId> {
        let f = ConcatFn::from_fn(&self.sizes, f)?;
        self.insert(f)
    }

    pub fn get(&self, id: FnId) -> Result<&ConcatFn> {
        self.entries.get(id.index()).map(|e| &e.f).ok_or(Error::UnboundFunction(id.index()))
    }

    fn base_expansion(&self, id: FnId) -> Result<Vec<(f64, FnId)>> {
        let e = self.entries.get(id.index()).ok_or(Error::UnboundFunction(id.index()))?;
        Ok(e.expansion.clone().unwrap_or_else(|| vec![(1.0, id)]))
    }

    /// Register the pointwise combination `sum_k c_k f_k`.
    ///
    /// The new handle remembers its decomposition into base handles, so that
    /// [`Registry::sigma`] expands it linearly.
    pub fn linear_combination(&mut self, parts: &[(f64, FnId)]) -> Result<FnId> {
        let mut acc: std::collections::BTreeMap<FnId, f64> = Default::default();
        for &(c, id) in parts {
            for (c2, base) in self.base_expansion(id)? {
                *acc.entry(base).or_insert(0.0) += c * c2;
            }
        }
        let expansion: Vec<(f64, FnId)> = acc.into_iter().filter(|(_, c)| *c != 0.0).map(|(id, c)| (c, id)).collect();
        let mut values: Vec<Vec<f64>> = self.sizes.iter().map(|&n| vec![0.0; n]).collect();
        for &(c, id) in parts {
            let f = &self.entries[id.index()].f;
            for (out, comp) in values.iter_mut().zip(f.values()) {
                for (o, v) in out.iter_mut().zip(comp) {
                    *o += c * v;
                }
            }
        }
        self.entries.push(Entry { f: ConcatFn::new(values)?, expansion: Some(expansion) });
        Ok(FnId(self.entries.len() as u32 - 1))
    }

    pub fn sum(&mut self, a: FnId, b: FnId) -> Result<FnId> {
        self.linear_combination(&[(1.0, a), (1.0, b)])
    }

    pub fn scaled(&mut self, c: f64, a: FnId) -> Result<FnId> {
        self.linear_combination(&[(c, a)])
    }

    /// The zero function, expanding to the zero virtual function.
    pub fn zero(&mut self) -> Result<FnId> {
        self.linear_combination(&[])
    }

    /// Register the pointwise product of two functions (a new base function).
    pub fn product(&mut self, a: FnId, b: FnId) -> Result<FnId> {
        let fa = self.get(a)?;
        let fb = self.get(b)?;
        let values = fa
            .values()
            .iter()
            .zip(fb.values())
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).collect())
            .collect();
        self.insert_values(values)
    }

    /// `Sigma_p(f)` as a virtual function, expanded linearly over base handles.
    pub fn sigma(&self, id: FnId) -> Result<VirtualFn> {
        let mut out = VirtualFn::zero();
        for (c, base) in self.base_expansion(id)? {
            out.add_term(c, vec![base]);
        }
        Ok(out)
    }
}
