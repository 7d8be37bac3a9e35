//! Matrices over the virtual algebra (determinant, adjugate, the bilinear form
//! `{u, v}`) and small numeric helpers for direction frames.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::measure::MeasureTuple;
use crate::valgebra::{integrate, ExponentVec, FnId, Registry, VirtualFn};

/// Largest side accepted by [`vdet`] and [`vadj`].
pub const MAX_SIDE: usize = 5;

/// Dense row-major matrix of virtual functions.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<VirtualFn>,
}

impl VirtualMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<VirtualFn>) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} entries for a {rows}x{cols} matrix", entries.len())));
        }
        Ok(VirtualMatrix { rows, cols, entries })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> VirtualFn) -> Self {
        let entries = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        VirtualMatrix { rows, cols, entries }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { VirtualFn::unit() } else { VirtualFn::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &VirtualFn {
        &self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> &[VirtualFn] {
        &self.entries
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    pub fn matmul(&self, other: &VirtualMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_fn(self.rows, other.cols, |i, k| {
            (0..self.cols).fold(VirtualFn::zero(), |acc, j| &acc + &(self.get(i, j) * other.get(j, k)))
        }))
    }

    pub fn sub(&self, other: &VirtualMatrix) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::ShapeMismatch("matrix difference of unequal shapes".into()));
        }
        Ok(Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) - other.get(i, j)))
    }

    /// Multiply every entry by the virtual scalar `s`.
    pub fn scale(&self, s: &VirtualFn) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * s)
    }

    /// Integrate each entry.
    pub fn integrate(&self, reg: &Registry, tuple: &MeasureTuple, p: &ExponentVec) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = integrate(self.get(i, j), reg, tuple, p)?;
            }
        }
        Ok(out)
    }
}

/// A matrix-valued function on the disjoint union, stored as one registered handle per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatMatrix {
    rows: usize,
    cols: usize,
    ids: Vec<FnId>,
}

impl ConcatMatrix {
    pub fn from_ids(rows: usize, cols: usize, ids: Vec<FnId>) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} handles for a {rows}x{cols} matrix", ids.len())));
        }
        Ok(ConcatMatrix { rows, cols, ids })
    }

    /// Register a matrix function given per atom as a row-major `rows * cols` array.
    pub fn register(
        reg: &mut Registry,
        rows: usize,
        cols: usize,
        mut value: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let sizes = reg.sizes().to_vec();
        let mut cache: Vec<Vec<Vec<f64>>> = Vec::with_capacity(sizes.len());
        for (j, &n) in sizes.iter().enumerate() {
            let mut comp = Vec::with_capacity(n);
            for i in 0..n {
                let v = value(j, i);
                if v.len() != rows * cols {
                    return Err(Error::ShapeMismatch(format!(
                        "atom ({j},{i}) gives {} values for a {rows}x{cols} matrix",
                        v.len()
                    )));
                }
                comp.push(v);
            }
            cache.push(comp);
        }
        let mut ids = Vec::with_capacity(rows * cols);
        for k in 0..rows * cols {
            ids.push(reg.insert_fn(|j, i| cache[j][i][k])?);
        }
        Ok(ConcatMatrix { rows, cols, ids })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn id(&self, i: usize, j: usize) -> FnId {
        self.ids[i * self.cols + j]
    }

    pub fn ids(&self) -> &[FnId] {
        &self.ids
    }

    /// Values at atom `(j, i)` as a row-major array.
    pub fn at(&self, reg: &Registry, j: usize, i: usize) -> Result<Vec<f64>> {
        self.ids.iter().map(|&h| reg.get(h).map(|f| f.get(j, i))).collect()
    }

    /// The pointwise product `self * other^T`. When both operands are the same
    /// matrix the result reuses one handle per symmetric pair.
    pub fn mul_transpose(&self, other: &ConcatMatrix, reg: &mut Registry) -> Result<ConcatMatrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "cannot form a {}x{} times ({}x{})^T product",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let symmetric = self == other;
        let mut ids = vec![None; self.rows * other.rows];
        for a in 0..self.rows {
            for b in 0..other.rows {
                if symmetric && b < a {
                    ids[a * other.rows + b] = ids[b * other.rows + a];
                    continue;
                }
                let lhs: Vec<&crate::valgebra::ConcatFn> =
                    (0..self.cols).map(|c| reg.get(self.id(a, c))).collect::<Result<_>>()?;
                let rhs: Vec<&crate::valgebra::ConcatFn> =
                    (0..self.cols).map(|c| reg.get(other.id(b, c))).collect::<Result<_>>()?;
                let values: Vec<Vec<f64>> = reg
                    .sizes()
                    .iter()
                    .enumerate()
                    .map(|(j, &n)| {
                        (0..n).map(|i| lhs.iter().zip(&rhs).map(|(x, y)| x.get(j, i) * y.get(j, i)).sum()).collect()
                    })
                    .collect();
                ids[a * other.rows + b] = Some(reg.insert_values(values)?);
            }
        }
        Ok(ConcatMatrix { rows: self.rows, cols: other.rows, ids: ids.into_iter().map(|h| h.expect("filled")).collect() })
    }
}

/// Componentwise `Sigma_p` of a matrix function.
pub fn sigma_matrix(reg: &Registry, m: &ConcatMatrix) -> Result<VirtualMatrix> {
    let entries = m.ids.iter().map(|&h| reg.sigma(h)).collect::<Result<_>>()?;
    VirtualMatrix::new(m.rows, m.cols, entries)
}

fn check_square(m: &VirtualMatrix) -> Result<usize> {
    if m.rows != m.cols {
        return Err(Error::ShapeMismatch(format!("{}x{} matrix is not square", m.rows, m.cols)));
    }
    if m.rows > MAX_SIDE {
        return Err(Error::ShapeMismatch(format!("side {} exceeds {MAX_SIDE}", m.rows)));
    }
    Ok(m.rows)
}

/// Permutations of `0..n` with their signs, in lexicographic order.
fn signed_permutations(n: usize) -> Vec<(Vec<usize>, f64)> {
    fn go(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<(Vec<usize>, f64)>) {
        let n = used.len();
        if prefix.len() == n {
            let inversions = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| prefix[i] > prefix[j]).count();
            out.push((prefix.clone(), if inversions % 2 == 0 { 1.0 } else { -1.0 }));
            return;
        }
        for k in 0..n {
            if !used[k] {
                used[k] = true;
                prefix.push(k);
                go(prefix, used, out);
                prefix.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn det_of(n: usize, entry: impl Fn(usize, usize) -> VirtualFn) -> VirtualFn {
    let mut total = VirtualFn::zero();
    for (perm, sign) in signed_permutations(n) {
        let mut prod = VirtualFn::constant(sign);
        for (i, &s) in perm.iter().enumerate() {
            prod = &prod * &entry(i, s);
            if prod.is_zero() {
                break;
            }
        }
        total = &total + &prod;
    }
    total
}

/// Determinant by permutation expansion.
pub fn vdet(m: &VirtualMatrix) -> Result<VirtualFn> {
    let n = check_square(m)?;
    Ok(det_of(n, |i, j| m.get(i, j).clone()))
}

/// Adjugate: `adj[i][j] = (-1)^(i+j) det(M without row j and column i)`.
pub fn vadj(m: &VirtualMatrix) -> Result<VirtualMatrix> {
    let n = check_square(m)?;
    Ok(VirtualMatrix::from_fn(n, n, |i, j| {
        let rows: Vec<usize> = (0..n).filter(|&r| r != j).collect();
        let cols: Vec<usize> = (0..n).filter(|&c| c != i).collect();
        let minor = det_of(n - 1, |a, b| m.get(rows[a], cols[b]).clone());
        if (i + j) % 2 == 0 {
            minor
        } else {
            -minor
        }
    }))
}

/// `{u, v} = det(M) Sigma(u v^T) - Sigma(u B^T) adj(M) Sigma(B v^T)` with the
/// determinant and adjugate of `M` computed once.
#[derive(Debug, Clone)]
pub struct BilinearForm {
    b: ConcatMatrix,
    det: VirtualFn,
    adj: VirtualMatrix,
}

impl BilinearForm {
    /// `b` is `d x (d-1)`, `m` is `d x d`.
    pub fn new(b: ConcatMatrix, m: &VirtualMatrix) -> Result<Self> {
        let d = check_square(m)?;
        if b.rows != d {
            return Err(Error::ShapeMismatch(format!("B has {} rows, M has side {d}", b.rows)));
        }
        Ok(BilinearForm { det: vdet(m)?, adj: vadj(m)?, b })
    }

    /// The standard form with `M = Sigma(B B^T)`.
    pub fn from_frame(b: ConcatMatrix, reg: &mut Registry) -> Result<Self> {
        let gram = b.mul_transpose(&b, reg)?;
        let m = sigma_matrix(reg, &gram)?;
        Self::new(b, &m)
    }

    pub fn det(&self) -> &VirtualFn {
        &self.det
    }

    pub fn adj(&self) -> &VirtualMatrix {
        &self.adj
    }

    pub fn frame(&self) -> &ConcatMatrix {
        &self.b
    }

    /// Evaluate `{u, v}` for row-vector functions of width `d - 1`.
    pub fn eval(&self, reg: &mut Registry, u: &ConcatMatrix, v: &ConcatMatrix) -> Result<VirtualFn> {
        for w in [u, v] {
            if w.rows != 1 || w.cols != self.b.cols {
                return Err(Error::ShapeMismatch(format!(
                    "expected a 1x{} row function, got {}x{}",
                    self.b.cols, w.rows, w.cols
                )));
            }
        }
        let uv = u.mul_transpose(v, reg)?;
        let ub = u.mul_transpose(&self.b, reg)?; // 1 x d
        let bv = if u == v { ub.clone() } else { v.mul_transpose(&self.b, reg)? };
        let first = &self.det * &reg.sigma(uv.id(0, 0))?;
        let left: Vec<VirtualFn> = (0..self.b.rows).map(|a| reg.sigma(ub.id(0, a))).collect::<Result<_>>()?;
        let right: Vec<VirtualFn> = (0..self.b.rows).map(|a| reg.sigma(bv.id(0, a))).collect::<Result<_>>()?;
        let mut second = VirtualFn::zero();
        for (a, la) in left.iter().enumerate() {
            for (b, rb) in right.iter().enumerate() {
                let adj = self.adj.get(a, b);
                if adj.is_zero() {
                    continue;
                }
                second = &second + &(&(la * adj) * rb);
            }
        }
        Ok(&first - &second)
    }
}

/// `{u, v}` for `M = Sigma(B B^T)`.
pub fn braket(reg: &mut Registry, u: &ConcatMatrix, v: &ConcatMatrix, b: &ConcatMatrix) -> Result<VirtualFn> {
    BilinearForm::from_frame(b.clone(), reg)?.eval(reg, u, v)
}

/// `|n_1 ^ ... ^ n_d|`, the absolute determinant of the stacked vectors.
pub fn wedge_norm(vectors: &[Vec<f64>]) -> Result<f64> {
    let d = vectors.len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch(format!("wedge of {d} vectors needs each of length {d}")));
    }
    let m = DMatrix::from_fn(d, d, |i, j| vectors[i][j]);
    Ok(m.determinant().abs())
}

/// Extreme singular values `(sigma_min, sigma_max)` from the eigenvalues of `X^T X`.
pub fn sv_margin(x: &DMatrix<f64>) -> (f64, f64) {
    let gram = x.transpose() * x;
    let eig = SymmetricEigen::new(gram);
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    (lo.max(0.0).sqrt(), hi.max(0.0).sqrt())
}

/// `d x (d-1)` matrix with orthonormal columns orthogonal to the unit vector `n`.
///
/// Householder reflection taking `e_d` to `n`; the first `d - 1` columns of the
/// reflection are returned (the identity columns when `n = e_d`).
pub fn orthonormal_complement(n: &[f64]) -> Result<DMatrix<f64>> {
    let d = n.len();
    if d < 2 {
        return Err(Error::ShapeMismatch("orthonormal complement needs d >= 2".into()));
    }
    let nv = DVector::from_column_slice(n);
    if (nv.norm() - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("direction has norm {}, expected 1", nv.norm())));
    }
    let mut w = -nv;
    w[d - 1] += 1.0;
    let w2 = w.norm_squared();
    let h = if w2 == 0.0 { DMatrix::identity(d, d) } else { DMatrix::identity(d, d) - (&w * w.transpose()) * (2.0 / w2) };
    Ok(h.columns(0, d - 1).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg_with(sizes: Vec<usize>, k: usize) -> (Registry, Vec<FnId>) {
        let mut reg = Registry::new(sizes);
        let ids = (0..k).map(|s| reg.insert_fn(|j, i| ((s * 7 + j * 3 + i) as f64 * 0.37).sin()).unwrap()).collect();
        (reg, ids)
    }

    #[test]
    fn one_by_one() {
        let (reg, ids) = reg_with(vec![2], 1);
        let m = VirtualMatrix::new(1, 1, vec![reg.sigma(ids[0]).unwrap()]).unwrap();
        assert_eq!(vdet(&m).unwrap(), reg.sigma(ids[0]).unwrap());
        assert_eq!(vadj(&m).unwrap().get(0, 0), &VirtualFn::unit());
    }

    #[test]
    fn identity_determinant() {
        assert_eq!(vdet(&VirtualMatrix::identity(4)).unwrap(), VirtualFn::unit());
    }

    #[test]
    fn two_by_two_adjugate() {
        let (reg, ids) = reg_with(vec![2], 4);
        let s: Vec<VirtualFn> = ids.iter().map(|&h| reg.sigma(h).unwrap()).collect();
        let m = VirtualMatrix::new(2, 2, s.clone()).unwrap();
        let adj = vadj(&m).unwrap();
        assert_eq!(adj.get(0, 0), &s[3]);
        assert_eq!(adj.get(0, 1), &-&s[1]);
        assert_eq!(adj.get(1, 0), &-&s[2]);
        assert_eq!(adj.get(1, 1), &s[0]);
    }

    #[test]
    fn adjugate_law_is_symbolic() {
        let (reg, ids) = reg_with(vec![2, 3], 9);
        let m = VirtualMatrix::new(3, 3, ids.iter().map(|&h| reg.sigma(h).unwrap()).collect()).unwrap();
        let det = vdet(&m).unwrap();
        let lhs = vadj(&m).unwrap().matmul(&m).unwrap();
        let rhs = VirtualMatrix::identity(3).scale(&det);
        // exact cancellation up to floating-point coefficient arithmetic
        let diff = lhs.sub(&rhs).unwrap();
        for e in diff.entries() {
            assert!(e.terms().all(|(_, c)| c.abs() < 1e-12), "{e:?}");
        }
    }

    #[test]
    fn equal_rows_give_zero_determinant() {
        let (reg, ids) = reg_with(vec![2], 2);
        let a = reg.sigma(ids[0]).unwrap();
        let b = reg.sigma(ids[1]).unwrap();
        let m = VirtualMatrix::new(2, 2, vec![a.clone(), b.clone(), a, b]).unwrap();
        assert!(vdet(&m).unwrap().is_zero());
    }

    #[test]
    fn non_square_rejected() {
        let m = VirtualMatrix::from_fn(2, 3, |_, _| VirtualFn::unit());
        assert!(vdet(&m).is_err());
        assert!(vadj(&m).is_err());
    }

    #[test]
    fn wedge_examples() {
        assert!((wedge_norm(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(wedge_norm(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap(), 0.0);
        let th: f64 = 0.3;
        let w = wedge_norm(&[vec![1.0, 0.0], vec![th.cos(), th.sin()]]).unwrap();
        assert!((w - th.sin()).abs() < 1e-15);
    }

    #[test]
    fn singular_value_examples() {
        let (lo, hi) = sv_margin(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5])));
        assert!((lo - 0.5).abs() < 1e-14 && (hi - 2.0).abs() < 1e-14);
        let (lo, hi) = sv_margin(&DMatrix::identity(3, 3));
        assert!((lo - 1.0).abs() < 1e-14 && (hi - 1.0).abs() < 1e-14);
    }

    #[test]
    fn complement_examples() {
        let b = orthonormal_complement(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let b = orthonormal_complement(&[1.0, 0.0]).unwrap();
        assert!((b[(0, 0)]).abs() < 1e-15 && (b[(1, 0)].abs() - 1.0).abs() < 1e-15);
        let n = [0.48, -0.6, 0.64];
        let b = orthonormal_complement(&n).unwrap();
        let nb = DMatrix::from_row_slice(1, 3, &n) * &b;
        assert!(nb.amax() < 1e-15);
        assert!((b.transpose() * &b - DMatrix::identity(2, 2)).amax() < 1e-15);
        assert!(orthonormal_complement(&[1.0, 1.0]).is_err());
    }
}
