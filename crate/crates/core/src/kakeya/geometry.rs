use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::vmatrix::{orthonormal_complement, sv_margin, wedge_norm};

/// One atom of a map family: `phi(x) = x B - v + 1/2 q(x, x)`.
///
/// The quadratic part is stored as one symmetric `d x d` matrix per output
/// component, `phi_c(x) = (x B)_c - v_c + 1/2 x H_c x^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomMap {
    pub b: DMatrix<f64>,
    pub v: Vec<f64>,
    pub hessians: Option<Vec<DMatrix<f64>>>,
    pub mass: f64,
}

impl AtomMap {
    pub fn affine(b: DMatrix<f64>, v: Vec<f64>, mass: f64) -> Result<Self> {
        Self::new(b, v, None, mass)
    }

    pub fn new(b: DMatrix<f64>, v: Vec<f64>, hessians: Option<Vec<DMatrix<f64>>>, mass: f64) -> Result<Self> {
        let (d, k) = b.shape();
        if d < 2 || k != d - 1 || v.len() != k {
            return Err(Error::ShapeMismatch(format!("map with B of shape {d}x{k} and offset of length {}", v.len())));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidMeasure(format!("atom mass {mass} must be positive")));
        }
        if let Some(hs) = &hessians {
            if hs.len() != k || hs.iter().any(|h| h.shape() != (d, d)) {
                return Err(Error::ShapeMismatch("one d x d Hessian per output component required".into()));
            }
        }
        // only the symmetric part of q(x, x) matters
        let hessians = hessians.map(|hs| hs.into_iter().map(|h| (&h + h.transpose()) * 0.5).collect());
        Ok(AtomMap { b, v, hessians, mass })
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn is_affine(&self) -> bool {
        self.hessians.as_ref().is_none_or(|hs| hs.iter().all(|h| h.iter().all(|&v| v == 0.0)))
    }

    pub fn phi(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d - 1)
            .map(|c| {
                let mut s = -self.v[c];
                for a in 0..d {
                    s += x[a] * self.b[(a, c)];
                }
                if let Some(hs) = &self.hessians {
                    let h = &hs[c];
                    for a in 0..d {
                        for b in 0..d {
                            s += 0.5 * x[a] * h[(a, b)] * x[b];
                        }
                    }
                }
                s
            })
            .collect()
    }

    /// `grad_x^T phi`, the `d x (d-1)` matrix with rows `d phi / d x_a`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut j = self.b.clone();
        if let Some(hs) = &self.hessians {
            for (c, h) in hs.iter().enumerate() {
                for a in 0..d {
                    j[(a, c)] += (0..d).map(|b| h[(a, b)] * x[b]).sum::<f64>();
                }
            }
        }
        j
    }

    /// `d B_{bc} / d x_a = H_c[a][b]`; zero for affine maps.
    pub fn jacobian_derivative(&self, a: usize, b: usize, c: usize) -> f64 {
        self.hessians.as_ref().map_or(0.0, |hs| hs[c][(a, b)])
    }

    /// Frobenius norm of the second-derivative tensor.
    pub fn hessian_norm(&self) -> f64 {
        self.hessians.as_ref().map_or(0.0, |hs| hs.iter().map(|h| h.norm_squared()).sum::<f64>().sqrt())
    }
}

/// The atoms of one space `Omega_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFamily {
    pub atoms: Vec<AtomMap>,
}

impl MapFamily {
    pub fn new(atoms: Vec<AtomMap>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("empty family".into()));
        }
        let d = atoms[0].dim();
        if atoms.iter().any(|a| a.dim() != d) {
            return Err(Error::ShapeMismatch("atoms of one family disagree on d".into()));
        }
        Ok(MapFamily { atoms })
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.mass).collect()
    }

    pub fn is_affine(&self) -> bool {
        self.atoms.iter().all(|a| a.is_affine())
    }
}

/// A straight tube `{x : |x B - v| <= t}` around the line with direction `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub direction: Vec<f64>,
    pub offset: Vec<f64>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeFamily {
    pub tubes: Vec<Tube>,
}

impl TubeFamily {
    /// Affine maps with `B = orthonormal_complement(n)`.
    pub fn to_maps(&self) -> Result<MapFamily> {
        let atoms = self
            .tubes
            .iter()
            .map(|t| AtomMap::affine(orthonormal_complement(&t.direction)?, t.offset.clone(), t.mass))
            .collect::<Result<_>>()?;
        MapFamily::new(atoms)
    }
}

/// Unit vector `n` with `n J = 0` for a full-rank `d x (d-1)` matrix `J` (generalized cross product).
pub fn left_null_vector(j: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = j.nrows();
    let n: Vec<f64> = (0..d)
        .map(|i| {
            let minor = j.clone().remove_row(i);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * minor.determinant()
        })
        .collect();
    let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Domain("rank-deficient derivative has no unique normal".into()));
    }
    Ok(n.into_iter().map(|v| v / norm).collect())
}

/// Visit every choice of one index per family.
pub fn for_each_combo(sizes: &[usize], mut f: impl FnMut(&[usize])) {
    if sizes.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; sizes.len()];
    loop {
        f(&idx);
        let mut k = sizes.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if idx[k] + 1 < sizes[k] {
                idx[k] += 1;
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Minimum over one tube per family of `|n_1 ^ ... ^ n_d|`.
pub fn transversality_margin(families: &[TubeFamily]) -> Result<f64> {
    if families.is_empty() || families.iter().any(|f| f.tubes.is_empty()) {
        return Err(Error::InvalidMeasure("every family needs at least one tube".into()));
    }
    let sizes: Vec<usize> = families.iter().map(|f| f.tubes.len()).collect();
    let mut worst = f64::INFINITY;
    let mut err = None;
    for_each_combo(&sizes, |idx| {
        let dirs: Vec<Vec<f64>> = idx.iter().zip(families).map(|(&i, f)| f.tubes[i].direction.clone()).collect();
        match wedge_norm(&dirs) {
            Ok(w) => worst = worst.min(w),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

/// Minimum transversality of the normals of `grad^T phi` at `x`, over all atom combinations.
pub fn map_transversality_at(families: &[MapFamily], x: &[f64]) -> Result<f64> {
    let normals: Vec<Vec<Vec<f64>>> = families
        .iter()
        .map(|f| f.atoms.iter().map(|a| left_null_vector(&a.jacobian(x))).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = normals.iter().map(|n| n.len()).collect();
    let mut worst = f64::INFINITY;
    for_each_combo(&sizes, |idx| {
        let dirs: Vec<Vec<f64>> = idx.iter().zip(&normals).map(|(&i, n)| n[i].clone()).collect();
        worst = worst.min(wedge_norm(&dirs).expect("d normals of length d"));
    });
    Ok(worst)
}

/// Map families with a bound `A` and a ball domain, as in the curved estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvedMapFamily {
    pub families: Vec<MapFamily>,
    pub bound: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    /// Sampling points per axis across the domain ball's bounding box.
    pub samples_per_axis: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    /// Largest `|grad phi|` seen and the closed-form bound on `|grad^2 phi|`.
    pub max_first_derivative: f64,
    pub max_second_derivative: f64,
    pub regularity: bool,
    /// Extreme singular values of `grad^T phi` over all samples.
    pub singular_range: (f64, f64),
    pub submersion: bool,
    pub min_wedge: f64,
    pub transversality: bool,
    pub samples: usize,
}

impl CurvedMapFamily {
    /// Grid points of the domain ball, center included.
    pub fn sample_points(&self) -> Vec<Vec<f64>> {
        let d = self.center.len();
        let n = self.samples_per_axis.max(1);
        let mut out = vec![self.center.clone()];
        for_each_combo(&vec![n; d], |idx| {
            let x: Vec<f64> = idx
                .iter()
                .zip(&self.center)
                .map(|(&i, &c)| if n == 1 { c } else { c - self.radius + 2.0 * self.radius * i as f64 / (n - 1) as f64 })
                .collect();
            let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
            if r2 <= self.radius * self.radius * (1.0 + 1e-12) && x != self.center {
                out.push(x);
            }
        });
        out
    }
}

/// Check regularity, submersion and transversality on a sampling grid.
pub fn curved_axiom_check(fam: &CurvedMapFamily) -> Result<AxiomReport> {
    let a = fam.bound;
    let points = fam.sample_points();
    let max_second = fam.families.iter().flat_map(|f| &f.atoms).map(|m| m.hessian_norm()).fold(0.0, f64::max);
    let mut max_first: f64 = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let mut min_wedge = f64::INFINITY;
    for x in &points {
        for m in fam.families.iter().flat_map(|f| &f.atoms) {
            let j = m.jacobian(x);
            max_first = max_first.max(j.norm());
            let (s_lo, s_hi) = sv_margin(&j);
            lo = lo.min(s_lo);
            hi = hi.max(s_hi);
        }
        min_wedge = min_wedge.min(map_transversality_at(&fam.families, x).unwrap_or(0.0));
    }
    Ok(AxiomReport {
        max_first_derivative: max_first,
        max_second_derivative: max_second,
        regularity: max_first <= a && max_second <= a,
        singular_range: (lo, hi),
        submersion: lo >= 1.0 / a && hi <= a,
        min_wedge,
        transversality: min_wedge >= 1.0 / a,
        samples: points.len(),
    })
}

/// `B R` with `R` orthogonal chosen to minimise `|B R - B0|_F`.
///
/// Everything downstream depends on a frame only through `B B^T` and `B phi^T`,
/// both invariant under `B -> B R, v -> v R`.
pub fn align_frame(b: &DMatrix<f64>, b0: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = (b.transpose() * b0).svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    b * (u * vt)
}

/// `pi_j`: the identity with column `j` removed.
pub fn pi_frame(d: usize, j: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d - 1, |r, c| if r == if c < j { c } else { c + 1 } { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tube(direction: Vec<f64>) -> Tube {
        let d = direction.len();
        Tube { direction, offset: vec![0.0; d - 1], mass: 1.0 }
    }

    #[test]
    fn margin_examples() {
        let axis = |d: usize| -> Vec<TubeFamily> {
            (0..d)
                .map(|j| TubeFamily { tubes: vec![tube((0..d).map(|k| if k == j { 1.0 } else { 0.0 }).collect())] })
                .collect()
        };
        assert!((transversality_margin(&axis(3)).unwrap() - 1.0).abs() < 1e-15);
        let same = vec![TubeFamily { tubes: vec![tube(vec![1.0, 0.0])] }; 2];
        assert_eq!(transversality_margin(&same).unwrap(), 0.0);
        let th: f64 = 0.7;
        let fams = vec![
            TubeFamily { tubes: vec![tube(vec![1.0, 0.0])] },
            TubeFamily { tubes: vec![tube(vec![th.cos(), th.sin()])] },
        ];
        assert!((transversality_margin(&fams).unwrap() - th.sin()).abs() < 1e-15);
        assert!(transversality_margin(&[TubeFamily { tubes: vec![] }]).is_err());
    }

    #[test]
    fn null_vector_is_orthogonal() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.0, 1.0, 0.3, -0.4]);
        let n = left_null_vector(&j).unwrap();
        let nj = DMatrix::from_row_slice(1, 3, &n) * &j;
        assert!(nj.amax() < 1e-15);
    }

    #[test]
    fn quadratic_map_derivatives() {
        let h = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, -0.2]);
        let m = AtomMap::new(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), vec![0.3], Some(vec![h]), 1.0).unwrap();
        let x = [0.5, -0.7];
        let eps = 1e-6;
        let jac = m.jacobian(&x);
        for a in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += eps;
            xm[a] -= eps;
            let fd = (m.phi(&xp)[0] - m.phi(&xm)[0]) / (2.0 * eps);
            assert!((fd - jac[(a, 0)]).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_axioms_and_violation() {
        let d = 2;
        let fams: Vec<MapFamily> =
            (0..d).map(|j| MapFamily::new(vec![AtomMap::affine(pi_frame(d, j), vec![0.0], 1.0).unwrap()]).unwrap()).collect();
        let cf = CurvedMapFamily { families: fams.clone(), bound: 2.0, center: vec![0.0, 0.0], radius: 1.0, samples_per_axis: 5 };
        let r = curved_axiom_check(&cf).unwrap();
        assert!(r.regularity && r.submersion && r.transversality);
        assert!((r.singular_range.0 - 1.0).abs() < 1e-14 && (r.min_wedge - 1.0).abs() < 1e-14);

        // |grad^2 phi| = 2A
        let mut bad = fams;
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        bad[0].atoms[0] = AtomMap::new(pi_frame(d, 0), vec![0.0], Some(vec![h]), 1.0).unwrap();
        let cf = CurvedMapFamily { families: bad, bound: 2.0, center: vec![0.0, 0.0], radius: 0.1, samples_per_axis: 3 };
        let r = curved_axiom_check(&cf).unwrap();
        assert_eq!(r.max_second_derivative, 4.0);
        assert!(!r.regularity);
    }

    #[test]
    fn aligned_frame_is_close_to_reference() {
        let b = orthonormal_complement(&[1.0, 0.0, 0.0]).unwrap();
        let aligned = align_frame(&b, &pi_frame(3, 0));
        assert!((aligned - pi_frame(3, 0)).amax() < 1e-14);
    }
}
