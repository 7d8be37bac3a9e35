//! Finite atomic measure spaces and d-tuples of them.
//!
//! Every virtual integral in this crate lives on a [`MeasureTuple`]: a list of
//! [`DiscreteMeasure`]s with strictly positive total mass. Atoms may carry an
//! opaque numeric payload (a point, a flattened matrix, ...) which this layer
//! stores but never interprets.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::valgebra::ExponentVec;

/// Smallest admissible total mass; keeps `m^(p - a)` finite for negative exponents.
pub const MIN_TOTAL_MASS: f64 = 1e-300;

/// Deterministic pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub label: String,
    pub mass: f64,
    pub payload: Option<Vec<f64>>,
}

impl Atom {
    pub fn new(label: impl Into<String>, mass: f64) -> Self {
        Atom { label: label.into(), mass, payload: None }
    }

    pub fn with_payload(mut self, payload: Vec<f64>) -> Self {
        self.payload = Some(payload);
        self
    }
}

/// A finite measure on a labelled set of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
    total: f64,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        let mut seen = HashSet::with_capacity(atoms.len());
        for atom in &atoms {
            if !atom.mass.is_finite() || atom.mass < 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "atom {:?} has mass {}",
                    atom.label, atom.mass
                )));
            }
            if !seen.insert(atom.label.as_str()) {
                return Err(Error::InvalidMeasure(format!("duplicate label {:?}", atom.label)));
            }
        }
        let masses: Vec<f64> = atoms.iter().map(|a| a.mass).collect();
        let total = pairwise_sum(&masses);
        if !(total > MIN_TOTAL_MASS) || !total.is_finite() {
            return Err(Error::InvalidMeasure(format!("total mass {total} is not positive and finite")));
        }
        Ok(DiscreteMeasure { atoms, total })
    }

    /// Atoms labelled `a0, a1, ...` with the given masses.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        Self::new(
            masses
                .iter()
                .enumerate()
                .map(|(i, &m)| Atom::new(format!("a{i}"), m))
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.mass).collect()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.atoms.iter().map(|a| a.label.as_str())
    }

    /// Sum of atom masses, which is also the total variation norm.
    pub fn total_mass(&self) -> f64 {
        self.total
    }

    /// The weighted measure `mu_w` with `mu_w(a) = w(a) mu(a)`; payloads are kept.
    pub fn weight(&self, w: &[f64]) -> Result<Self> {
        if w.len() != self.atoms.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} atoms",
                w.len(),
                self.atoms.len()
            )));
        }
        if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::Domain(format!("weight {bad} is not a nonnegative real")));
        }
        let atoms = self
            .atoms
            .iter()
            .zip(w)
            .map(|(a, &wi)| Atom { label: a.label.clone(), mass: a.mass * wi, payload: a.payload.clone() })
            .collect();
        Self::new(atoms).map_err(|e| match e {
            Error::InvalidMeasure(msg) => Error::Domain(format!("weighted measure degenerate: {msg}")),
            other => other,
        })
    }

    /// Total variation distance: the l1 distance of the mass vectors, matched by label.
    pub fn tv_distance(&self, other: &DiscreteMeasure) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::LabelMismatch(format!("{} vs {} atoms", self.len(), other.len())));
        }
        let index: HashMap<&str, f64> = other.atoms.iter().map(|a| (a.label.as_str(), a.mass)).collect();
        let mut diffs = Vec::with_capacity(self.len());
        for a in &self.atoms {
            let m = index
                .get(a.label.as_str())
                .ok_or_else(|| Error::LabelMismatch(format!("label {:?} missing", a.label)))?;
            diffs.push((a.mass - m).abs());
        }
        Ok(pairwise_sum(&diffs))
    }

    fn integral(&self, f: &[f64]) -> f64 {
        assert_eq!(f.len(), self.len(), "function length must match the atom count");
        let terms: Vec<f64> = self.atoms.iter().zip(f).map(|(a, &v)| a.mass * v).collect();
        pairwise_sum(&terms)
    }

    /// `E_mu f`. Panics if `f` does not have one value per atom.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.integral(f) / self.total
    }

    pub fn variance(&self, f: &[f64]) -> f64 {
        self.covariance(f, f)
    }

    pub fn covariance(&self, f: &[f64], g: &[f64]) -> f64 {
        let fg: Vec<f64> = f.iter().zip(g).map(|(a, b)| a * b).collect();
        self.expect(&fg) - self.expect(f) * self.expect(g)
    }

    /// Push the measure forward along a label map (`targets[i]` is the image of atom `i`).
    ///
    /// Target atoms appear in order of first occurrence and carry no payload.
    pub fn pushforward<S: AsRef<str>>(&self, targets: &[S]) -> Result<Self> {
        if targets.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "label map has {} entries for {} atoms",
                targets.len(),
                self.len()
            )));
        }
        let mut order: Vec<String> = Vec::new();
        let mut fibres: HashMap<&str, Vec<f64>> = HashMap::new();
        for (a, t) in self.atoms.iter().zip(targets) {
            let t = t.as_ref();
            fibres
                .entry(t)
                .or_insert_with(|| {
                    order.push(t.to_string());
                    Vec::new()
                })
                .push(a.mass);
        }
        let atoms = order
            .into_iter()
            .map(|label| {
                let mass = pairwise_sum(&fibres[label.as_str()]);
                Atom::new(label, mass)
            })
            .collect();
        Self::new(atoms)
    }

    /// Index of the atom with the given label.
    pub fn position(&self, label: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.label == label)
    }
}

/// The d-tuple of spaces `(Omega_1, mu_1), ..., (Omega_d, mu_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureTuple {
    spaces: Vec<DiscreteMeasure>,
}

impl MeasureTuple {
    pub fn new(spaces: Vec<DiscreteMeasure>) -> Result<Self> {
        if spaces.is_empty() {
            return Err(Error::InvalidMeasure("a measure tuple needs at least one space".into()));
        }
        Ok(MeasureTuple { spaces })
    }

    pub fn from_masses(masses: &[Vec<f64>]) -> Result<Self> {
        Self::new(masses.iter().map(|m| DiscreteMeasure::from_masses(m)).collect::<Result<_>>()?)
    }

    pub fn dim(&self) -> usize {
        self.spaces.len()
    }

    pub fn spaces(&self) -> &[DiscreteMeasure] {
        &self.spaces
    }

    pub fn space(&self, j: usize) -> &DiscreteMeasure {
        &self.spaces[j]
    }

    /// Atom counts per space.
    pub fn sizes(&self) -> Vec<usize> {
        self.spaces.iter().map(|s| s.len()).collect()
    }

    pub fn masses(&self) -> Vec<Vec<f64>> {
        self.spaces.iter().map(|s| s.masses()).collect()
    }

    pub fn total_masses(&self) -> Vec<f64> {
        self.spaces.iter().map(|s| s.total_mass()).collect()
    }

    /// `prod_j mu_j(Omega_j)^{p_j}` with real exponents.
    pub fn mass_power(&self, p: &ExponentVec) -> Result<f64> {
        if p.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("{} exponents for {} spaces", p.len(), self.dim())));
        }
        Ok(self
            .spaces
            .iter()
            .zip(p.iter())
            .map(|(s, &pj)| (pj * s.total_mass().ln()).exp())
            .product())
    }

    /// Weight every space by its own per-atom weight vector.
    pub fn weight(&self, w: &[Vec<f64>]) -> Result<Self> {
        if w.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("{} weight vectors for {} spaces", w.len(), self.dim())));
        }
        Self::new(self.spaces.iter().zip(w).map(|(s, wj)| s.weight(wj)).collect::<Result<_>>()?)
    }

    /// Push every space forward along its own label map.
    pub fn pushforward<S: AsRef<str>>(&self, maps: &[Vec<S>]) -> Result<Self> {
        if maps.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("{} label maps for {} spaces", maps.len(), self.dim())));
        }
        Self::new(self.spaces.iter().zip(maps).map(|(s, m)| s.pushforward(m)).collect::<Result<_>>()?)
    }

    /// `max_j tv(mu_j, nu_j)`-style per-space distances.
    pub fn tv_distances(&self, other: &MeasureTuple) -> Result<Vec<f64>> {
        if other.dim() != self.dim() {
            return Err(Error::ShapeMismatch("tuples of different dimension".into()));
        }
        self.spaces.iter().zip(&other.spaces).map(|(a, b)| a.tv_distance(b)).collect()
    }
}
