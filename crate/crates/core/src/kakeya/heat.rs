//! The Gaussian heat-flow functional `Q(t)` and the terms of its derivative.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::geometry::{align_frame, for_each_combo, pi_frame, MapFamily};
use crate::error::{Error, Result};
use crate::flow::{hypothesis_margin, MarginReport, NonnegInstance, POSITIVITY_TOL};
use crate::measure::{MeasureTuple, MIN_TOTAL_MASS};
use crate::valgebra::{ExponentVec, FnId, IntegrationPlan, Registry, VirtualFn};
use crate::vmatrix::{sigma_matrix, vadj, vdet, ConcatMatrix};

/// Points per parallel work unit; partial sums are combined in chunk order.
const CHUNK: usize = 4096;
/// Largest dimension handled by the lattice code.
pub const MAX_DIM: usize = 5;
/// Relative quadrature error above which a value is flagged as under-resolved.
pub const COARSE_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum Cutoff {
    /// `eta = 1`; the integral over all of space, truncated where the weights fall below `tau`.
    Global,
    /// `eta((x - center) / radius)`: 1 on the unit ball, 0 outside the ball of radius 2.
    Bump { center: Vec<f64>, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spacing {
    /// `h = t / k`.
    PerT(f64),
    Fixed(f64),
}

impl Spacing {
    pub fn at(self, t: f64) -> f64 {
        match self {
            Spacing::PerT(k) => t / k,
            Spacing::Fixed(h) => h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QConfig {
    pub families: Vec<MapFamily>,
    pub p: ExponentVec,
    /// Scaling exponent; the prefactor is `t^(-alpha * mean(p))`.
    pub alpha: f64,
    pub cutoff: Cutoff,
    pub spacing: Spacing,
    pub tau: f64,
    pub max_points: usize,
}

impl QConfig {
    /// Uniform exponent `p`, `alpha = d / p`, global cutoff, `h = t / 8`, `tau = 1e-16`.
    pub fn new(families: Vec<MapFamily>, p: f64) -> Result<Self> {
        let d = families.len();
        let cfg = QConfig {
            p: ExponentVec::uniform(p, d)?,
            alpha: d as f64 / p,
            families,
            cutoff: Cutoff::Global,
            spacing: Spacing::PerT(8.0),
            tau: 1e-16,
            max_points: 10_000_000,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.families.len()
    }

    fn p_mean(&self) -> f64 {
        self.p.iter().sum::<f64>() / self.p.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(2..=MAX_DIM).contains(&d) {
            return Err(Error::Config(format!("d = {d} families; supported range is 2..={MAX_DIM}")));
        }
        if self.families.iter().any(|f| f.dim() != d) {
            return Err(Error::ShapeMismatch(format!("{d} families must all live in dimension {d}")));
        }
        if self.p.len() != d {
            return Err(Error::ShapeMismatch(format!("{} exponents for {d} families", self.p.len())));
        }
        if !(self.tau > 0.0 && self.tau <= 1e-8) {
            return Err(Error::Config(format!("tau = {} not in (0, 1e-8]", self.tau)));
        }
        let h_ok = match self.spacing {
            Spacing::PerT(k) => k > 0.0 && k.is_finite(),
            Spacing::Fixed(h) => h > 0.0 && h.is_finite(),
        };
        if !h_ok {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        match &self.cutoff {
            Cutoff::Global if self.families.iter().any(|f| !f.is_affine()) => {
                Err(Error::Config("curved families need a bump cutoff".into()))
            }
            Cutoff::Bump { center, radius } if center.len() != d || !(*radius > 0.0) => {
                Err(Error::Config("bump needs a center in R^d and a positive radius".into()))
            }
            _ => Ok(()),
        }
    }

    /// Exponents outside the range where the estimate is stated.
    pub fn warnings(&self) -> Vec<String> {
        let lo = 1.0 / (self.dim() as f64 - 1.0);
        self.p
            .iter()
            .filter(|&&pj| !(pj > lo && pj <= 2.0))
            .map(|pj| format!("exponent {pj} outside ({lo}, 2]"))
            .collect()
    }

    pub fn is_affine(&self) -> bool {
        self.families.iter().all(|f| f.is_affine())
    }
}

/// `eta(s)` and `eta'(s)` for the plateau-and-decay profile.
pub fn bump_profile(s: f64) -> (f64, f64) {
    if s <= 1.0 {
        (1.0, 0.0)
    } else if s < 2.0 {
        let u = s - 1.0;
        let q = 1.0 - u * u;
        let v = (1.0 - 1.0 / q).exp();
        (v, -2.0 * u / (q * q) * v)
    } else {
        (0.0, 0.0)
    }
}

/// `eta(x)` and its gradient.
pub fn cutoff_value(cutoff: &Cutoff, x: &[f64]) -> (f64, Vec<f64>) {
    match cutoff {
        Cutoff::Global => (1.0, vec![0.0; x.len()]),
        Cutoff::Bump { center, radius } => {
            let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
            let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (v, dv) = bump_profile(r / radius);
            let grad = if dv == 0.0 { vec![0.0; x.len()] } else { diff.iter().map(|c| dv * c / (r * radius)).collect() };
            (v, grad)
        }
    }
}

/// `exp(-|phi|^2 / t^2)` per atom, with values below `tau` set to zero.
pub fn gaussian_weight(families: &[MapFamily], t: f64, x: &[f64], tau: f64) -> Result<Vec<Vec<f64>>> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("t = {t} must be positive")));
    }
    Ok(families
        .iter()
        .map(|f| {
            f.atoms
                .iter()
                .map(|a| {
                    let r2: f64 = a.phi(x).iter().map(|v| v * v).sum();
                    let w = (-r2 / (t * t)).exp();
                    if w < tau {
                        0.0
                    } else {
                        w
                    }
                })
                .collect()
        })
        .collect())
}

/// Handles of the per-point functions; identical for every point.
struct Layout {
    gram: ConcatMatrix,
    phiphi: ConcatMatrix,
    bphi: ConcatMatrix,
    bending: Option<ConcatMatrix>,
    gram_derivs: Vec<ConcatMatrix>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect()
}

fn build_registry(families: &[MapFamily], x: &[f64], curved: bool) -> Result<(Registry, Layout)> {
    let d = families.len();
    let sizes: Vec<usize> = families.iter().map(|f| f.atoms.len()).collect();
    let mut reg = Registry::new(sizes);
    let b = ConcatMatrix::register(&mut reg, d, d - 1, |j, i| row_major(&families[j].atoms[i].jacobian(x)))?;
    let gram = b.mul_transpose(&b, &mut reg)?;
    let phi = ConcatMatrix::register(&mut reg, 1, d - 1, |j, i| families[j].atoms[i].phi(x))?;
    let phiphi = phi.mul_transpose(&phi, &mut reg)?;
    let bphi = b.mul_transpose(&phi, &mut reg)?;
    let mut bending = None;
    let mut gram_derivs = Vec::new();
    if curved {
        // k_ab = sum_c d_a B_bc phi_c
        bending = Some(ConcatMatrix::register(&mut reg, d, d, |j, i| {
            let atom = &families[j].atoms[i];
            let ph = atom.phi(x);
            (0..d)
                .flat_map(|a| (0..d).map(move |b| (a, b)))
                .map(|(a, b)| (0..d - 1).map(|c| atom.jacobian_derivative(a, b, c) * ph[c]).sum())
                .collect()
        })?);
        for a in 0..d {
            gram_derivs.push(ConcatMatrix::register(&mut reg, d, d, |j, i| {
                let atom = &families[j].atoms[i];
                let jac = atom.jacobian(x);
                (0..d)
                    .flat_map(|b| (0..d).map(move |c| (b, c)))
                    .map(|(b, c)| {
                        (0..d - 1)
                            .map(|k| atom.jacobian_derivative(a, b, k) * jac[(c, k)] + jac[(b, k)] * atom.jacobian_derivative(a, c, k))
                            .sum()
                    })
                    .collect()
            })?);
        }
    }
    Ok((reg, Layout { gram, phiphi, bphi, bending, gram_derivs }))
}

/// Per-point virtual integrals, all against `(mu_{w[t,x]})^p`.
#[derive(Debug, Clone, Default, PartialEq)]
struct PointValues {
    det: f64,
    det_phiphi: f64,
    f_adj_f: f64,
    adj_f: Vec<f64>,
    dadj_f: f64,
    adj_bending: f64,
}

/// Compiled integrands over the symbolic `M = Sigma(B B^T)`, `F = Sigma(B phi^T)`.
struct Model {
    families: Vec<MapFamily>,
    masses: Vec<Vec<f64>>,
    curved: bool,
    full: bool,
    /// Registry at the origin, reused wherever only `B` matters and `B` is constant.
    fixed: Registry,
    det: IntegrationPlan,
    det_phiphi: Option<IntegrationPlan>,
    f_adj_f: Option<IntegrationPlan>,
    adj_f: Vec<IntegrationPlan>,
    dadj_f: Option<IntegrationPlan>,
    adj_bending: Option<IntegrationPlan>,
}

impl Model {
    fn new(cfg: &QConfig, full: bool) -> Result<Self> {
        let d = cfg.dim();
        let curved = !cfg.is_affine();
        let (reg, layout) = build_registry(&cfg.families, &vec![0.0; d], curved)?;
        let m = sigma_matrix(&reg, &layout.gram)?;
        let det = vdet(&m)?;
        let p = &cfg.p;
        let mut model = Model {
            families: cfg.families.clone(),
            masses: cfg.families.iter().map(|f| f.masses()).collect(),
            curved,
            full,
            fixed: reg.clone(),
            det: IntegrationPlan::new(&det, p)?,
            det_phiphi: None,
            f_adj_f: None,
            adj_f: Vec::new(),
            dadj_f: None,
            adj_bending: None,
        };
        if !full {
            return Ok(model);
        }
        let adj = vadj(&m)?;
        let f: Vec<VirtualFn> = (0..d).map(|a| reg.sigma(layout.bphi.id(a, 0))).collect::<Result<_>>()?;
        let adj_f: Vec<VirtualFn> = (0..d)
            .map(|a| (0..d).fold(VirtualFn::zero(), |acc, b| &acc + &(adj.get(a, b) * &f[b])))
            .collect();
        let f_adj_f = (0..d).fold(VirtualFn::zero(), |acc, a| &acc + &(&f[a] * &adj_f[a]));
        let det_phiphi = &det * &reg.sigma(layout.phiphi.id(0, 0))?;
        model.det_phiphi = Some(IntegrationPlan::new(&det_phiphi, p)?);
        model.f_adj_f = Some(IntegrationPlan::new(&f_adj_f, p)?);
        model.adj_f = adj_f.iter().map(|g| IntegrationPlan::new(g, p)).collect::<Result<_>>()?;
        if curved {
            // d_a acts on the Gram handles only; F is held fixed
            let gram_pos = |h: FnId| -> Option<(usize, usize)> {
                (0..d).flat_map(|b| (0..d).map(move |c| (b, c))).find(|&(b, c)| layout.gram.id(b, c) == h)
            };
            let mut dadj_f = VirtualFn::zero();
            for a in 0..d {
                for b in 0..d {
                    let da = adj.get(a, b).derivative(|h| -> Result<VirtualFn> {
                        match gram_pos(h) {
                            Some((r, c)) => reg.sigma(layout.gram_derivs[a].id(r, c)),
                            None => Ok(VirtualFn::zero()),
                        }
                    })?;
                    dadj_f = &dadj_f + &(&da * &f[b]);
                }
            }
            let bending = layout.bending.as_ref().expect("curved layout");
            let mut adj_bending = VirtualFn::zero();
            for a in 0..d {
                for b in 0..d {
                    adj_bending = &adj_bending + &(adj.get(a, b) * &reg.sigma(bending.id(a, b))?);
                }
            }
            model.dadj_f = Some(IntegrationPlan::new(&dadj_f, p)?);
            model.adj_bending = Some(IntegrationPlan::new(&adj_bending, p)?);
        }
        Ok(model)
    }

    /// Atom masses times Gaussian weights, or `None` when some family has no mass left.
    fn weighted_masses(&self, x: &[f64], t: f64, tau: f64) -> Result<Option<Vec<Vec<f64>>>> {
        let w = gaussian_weight(&self.families, t, x, tau)?;
        let out: Vec<Vec<f64>> =
            self.masses.iter().zip(&w).map(|(m, w)| m.iter().zip(w).map(|(m, w)| m * w).collect()).collect();
        if out.iter().any(|m| m.iter().sum::<f64>() <= MIN_TOTAL_MASS) {
            return Ok(None);
        }
        Ok(Some(out))
    }

    fn eval(&self, x: &[f64], t: f64, tau: f64) -> Result<Option<PointValues>> {
        let Some(masses) = self.weighted_masses(x, t, tau)? else {
            return Ok(None);
        };
        if !self.full {
            let reg = if self.curved { build_registry(&self.families, x, true)?.0 } else { self.fixed.clone() };
            let det = self.det.evaluate_masses(if self.curved { &reg } else { &self.fixed }, &masses)?;
            return Ok(Some(PointValues { det, ..Default::default() }));
        }
        let (reg, _) = build_registry(&self.families, x, self.curved)?;
        let run = |plan: &Option<IntegrationPlan>| -> Result<f64> {
            plan.as_ref().map_or(Ok(0.0), |p| p.evaluate_masses(&reg, &masses))
        };
        Ok(Some(PointValues {
            det: self.det.evaluate_masses(&reg, &masses)?,
            det_phiphi: run(&self.det_phiphi)?,
            f_adj_f: run(&self.f_adj_f)?,
            adj_f: self.adj_f.iter().map(|p| p.evaluate_masses(&reg, &masses)).collect::<Result<_>>()?,
            dadj_f: run(&self.dadj_f)?,
            adj_bending: run(&self.adj_bending)?,
        }))
    }
}

type Cell = [i32; MAX_DIM];

fn index_range(lo: f64, hi: f64, h: f64) -> Result<(i32, i32)> {
    let a = ((lo / h) - 0.5).floor();
    let b = ((hi / h) - 0.5).ceil();
    if !(a.is_finite() && b.is_finite()) || a < i32::MIN as f64 || b > i32::MAX as f64 {
        return Err(Error::Config(format!("grid range [{lo}, {hi}] at h = {h} is not representable")));
    }
    Ok((a as i32, b as i32))
}

/// Centres and truncation radii of the Gaussian products, one per atom combination.
fn combo_boxes(cfg: &QConfig, t: f64) -> Result<Vec<(Vec<f64>, f64)>> {
    let d = cfg.dim();
    let p_min = cfg.p.iter().copied().fold(f64::INFINITY, f64::min);
    let log_tau = (1.0 / cfg.tau).ln();
    let sizes: Vec<usize> = cfg.families.iter().map(|f| f.atoms.len()).collect();
    let mut out = Vec::new();
    let mut err = None;
    for_each_combo(&sizes, |idx| {
        let mut g = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DMatrix::<f64>::zeros(d, 1);
        for (j, &i) in idx.iter().enumerate() {
            let a = &cfg.families[j].atoms[i];
            g += &a.b * a.b.transpose();
            rhs += &a.b * DMatrix::from_column_slice(d - 1, 1, &a.v);
        }
        let eig = g.clone().symmetric_eigen();
        let lam = eig.eigenvalues.min();
        if !(lam > 1e-12) {
            err = Some(Error::Domain(format!("atom combination {idx:?} is not transversal; the global integral diverges")));
            return;
        }
        let center = g.cholesky().expect("positive definite").solve(&rhs);
        out.push((center.iter().copied().collect(), t * (log_tau / (p_min * lam)).sqrt()));
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Least-squares centres of the Gaussian products, one per atom combination.
pub fn combo_centers(cfg: &QConfig) -> Result<Vec<Vec<f64>>> {
    Ok(combo_boxes(cfg, 1.0)?.into_iter().map(|(c, _)| c).collect())
}

/// Midpoint lattice `(i + 1/2) h` over the support of the integrand.
fn lattice(cfg: &QConfig, t: f64, h: f64) -> Result<Vec<Cell>> {
    let d = cfg.dim();
    let boxes: Vec<Vec<(f64, f64)>> = match (&cfg.cutoff, cfg.is_affine()) {
        (Cutoff::Global, _) => {
            combo_boxes(cfg, t)?.into_iter().map(|(c, r)| c.iter().map(|&x| (x - r, x + r)).collect()).collect()
        }
        (Cutoff::Bump { center, radius }, affine) => {
            let ball: Vec<(f64, f64)> = center.iter().map(|&c| (c - 2.0 * radius, c + 2.0 * radius)).collect();
            if affine {
                combo_boxes(cfg, t)?
                    .into_iter()
                    .filter_map(|(c, r)| {
                        let b: Vec<(f64, f64)> =
                            c.iter().zip(&ball).map(|(&x, &(lo, hi))| ((x - r).max(lo), (x + r).min(hi))).collect();
                        b.iter().all(|(lo, hi)| lo <= hi).then_some(b)
                    })
                    .collect()
            } else {
                vec![ball]
            }
        }
    };
    let ranges: Vec<Vec<(i32, i32)>> =
        boxes.iter().map(|b| b.iter().map(|&(lo, hi)| index_range(lo, hi, h)).collect::<Result<_>>()).collect::<Result<_>>()?;
    let total: f64 = ranges.iter().map(|r| r.iter().map(|&(a, b)| (b - a + 1) as f64).product::<f64>()).sum();
    if total > cfg.max_points as f64 {
        return Err(Error::CapExceeded { size: total, cap: cfg.max_points as f64 });
    }
    let mut cells = Vec::with_capacity(total as usize);
    for r in &ranges {
        let sizes: Vec<usize> = r.iter().map(|&(a, b)| (b - a + 1) as usize).collect();
        for_each_combo(&sizes, |idx| {
            let mut cell = [0i32; MAX_DIM];
            for k in 0..d {
                cell[k] = r[k].0 + idx[k] as i32;
            }
            cells.push(cell);
        });
    }
    if ranges.len() > 1 {
        cells.sort_unstable();
        cells.dedup();
    }
    Ok(cells)
}

fn cell_point(cell: &Cell, d: usize, h: f64) -> Vec<f64> {
    (0..d).map(|k| (cell[k] as f64 + 0.5) * h).collect()
}

/// `h^d * sum_x f(x)` for a vector-valued `f`, reduced in a fixed order.
fn grid_sum(cells: &[Cell], d: usize, h: f64, width: usize, f: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync) -> Result<Vec<f64>> {
    let partial: Vec<Vec<f64>> = cells
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; width];
            for cell in chunk {
                let v = f(&cell_point(cell, d, h))?;
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let vol = h.powi(d as i32);
    let mut total = vec![0.0; width];
    for part in partial {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    Ok(total.into_iter().map(|v| v * vol).collect())
}

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("t = {t} must be positive")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QValue {
    pub t: f64,
    pub value: f64,
    /// `|Q_h - Q_2h|`.
    pub quad_err: f64,
    pub coarse: bool,
    pub points: usize,
}

fn q_at_spacing(model: &Model, cfg: &QConfig, t: f64, h: f64) -> Result<(f64, usize)> {
    let d = cfg.dim();
    let cells = lattice(cfg, t, h)?;
    let sums = grid_sum(&cells, d, h, 1, |x| {
        let eta = cutoff_value(&cfg.cutoff, x).0;
        if eta == 0.0 {
            return Ok(vec![0.0]);
        }
        Ok(vec![model.eval(x, t, cfg.tau)?.map_or(0.0, |v| eta * v.det)])
    })?;
    Ok((sums[0] * t.powf(-cfg.alpha * cfg.p_mean()), cells.len()))
}

fn q_with(model: &Model, cfg: &QConfig, t: f64) -> Result<QValue> {
    check_t(t)?;
    let h = cfg.spacing.at(t);
    let (value, points) = q_at_spacing(model, cfg, t, h)?;
    let (coarse_value, _) = q_at_spacing(model, cfg, t, 2.0 * h)?;
    let quad_err = (value - coarse_value).abs();
    Ok(QValue { t, value, quad_err, coarse: quad_err > COARSE_LIMIT * value.abs(), points })
}

/// `Q(t) = t^(-alpha p) int eta(x) int det M d(mu_{w[t,x]})^p dx` by midpoint quadrature.
pub fn q_functional(cfg: &QConfig, t: f64) -> Result<QValue> {
    cfg.validate()?;
    q_with(&Model::new(cfg, false)?, cfg, t)
}

/// `n` geometrically spaced values from `from` to `to`.
pub fn geometric_ladder(from: f64, to: f64, n: usize) -> Result<Vec<f64>> {
    if !(from > 0.0 && to > from) || n < 2 {
        return Err(Error::Config(format!("ladder needs 0 < from < to and at least 2 points (got {from}, {to}, {n})")));
    }
    let r = (to / from).ln() / (n - 1) as f64;
    Ok((0..n).map(|k| if k == n - 1 { to } else { from * (r * k as f64).exp() }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QScan {
    pub rows: Vec<QValue>,
    /// Steps `k` with `Q(t_{k+1}) < Q(t_k)` beyond the combined quadrature error.
    pub violations: Vec<usize>,
    pub pass: bool,
}

/// `Q` along an increasing ladder; passes when no step decreases beyond the quadrature error.
pub fn q_scan(cfg: &QConfig, ladder: &[f64]) -> Result<QScan> {
    cfg.validate()?;
    if ladder.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("t ladder must be strictly increasing".into()));
    }
    let model = Model::new(cfg, false)?;
    let rows: Vec<QValue> = ladder.iter().map(|&t| q_with(&model, cfg, t)).collect::<Result<_>>()?;
    let violations: Vec<usize> = (0..rows.len().saturating_sub(1))
        .filter(|&k| {
            let (a, b) = (&rows[k], &rows[k + 1]);
            let tol = a.quad_err + b.quad_err + 1e-12 * a.value.abs().max(b.value.abs());
            b.value < a.value - tol
        })
        .collect();
    Ok(QScan { pass: violations.is_empty(), rows, violations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct S0Value {
    pub value: f64,
    /// `|int det(M) Sigma(phi phi^T)| + |int F^T adj(M) F|`.
    pub scale: f64,
    /// False when every atom of some family has negligible weight at `x`.
    pub supported: bool,
}

fn s0_with(model: &Model, t: f64, x: &[f64], tau: f64) -> Result<S0Value> {
    check_t(t)?;
    Ok(match model.eval(x, t, tau)? {
        Some(v) => S0Value { value: v.det_phiphi - v.f_adj_f, scale: v.det_phiphi.abs() + v.f_adj_f.abs(), supported: true },
        None => S0Value { value: 0.0, scale: 0.0, supported: false },
    })
}

/// `int S_0 d(mu_{w[t,x]})^p` with `S_0 = det(M) Sigma(phi phi^T) - F^T adj(M) F`.
pub fn s0_integral(cfg: &QConfig, t: f64, x: &[f64]) -> Result<S0Value> {
    cfg.validate()?;
    if x.len() != cfg.dim() {
        return Err(Error::ShapeMismatch(format!("point of length {} in dimension {}", x.len(), cfg.dim())));
    }
    s0_with(&Model::new(cfg, true)?, t, x, cfg.tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct S0Report {
    pub samples: Vec<(f64, Vec<f64>, S0Value)>,
    pub min_normalized: f64,
    pub violations: Vec<usize>,
}

/// `S_0` at the given `(t, x)` samples, checked against `-tol * scale`.
pub fn s0_check(cfg: &QConfig, samples: &[(f64, Vec<f64>)]) -> Result<S0Report> {
    cfg.validate()?;
    let model = Model::new(cfg, true)?;
    let values: Vec<S0Value> = samples.par_iter().map(|(t, x)| s0_with(&model, *t, x, cfg.tau)).collect::<Result<_>>()?;
    let violations = (0..values.len()).filter(|&k| values[k].value < -POSITIVITY_TOL * values[k].scale).collect();
    let min_normalized = values
        .iter()
        .map(|v| if v.scale > 0.0 { v.value / v.scale } else { 0.0 })
        .fold(f64::INFINITY, f64::min);
    let samples = samples.iter().cloned().zip(values).map(|((t, x), v)| (t, x, v)).collect();
    Ok(S0Report { samples, min_normalized, violations })
}

/// Random `(t, x)` with `t` log-uniform in `[t_lo, t_hi]` and `x` within a few `t` of a
/// random least-squares centre, so that the weights are not negligible.
pub fn s0_sample_points(cfg: &QConfig, t_lo: f64, t_hi: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, Vec<f64>)>> {
    let centers = combo_boxes(cfg, 1.0)?;
    Ok((0..n)
        .map(|_| {
            let t = t_lo * (t_hi / t_lo).powf(rng.random::<f64>());
            let (c, _) = &centers[rng.random_range(0..centers.len())];
            let x = c.iter().map(|&c| c + t * rng.random_range(-1.5..1.5)).collect();
            (t, x)
        })
        .collect())
}

/// The hypothesis of the positivity step for affine families: frames aligned to `pi_j`.
pub fn frame_hypothesis(cfg: &QConfig, kappa: f64, bound: f64) -> Result<(MarginReport, f64)> {
    if !cfg.is_affine() {
        return Err(Error::Config("frame hypothesis needs affine families".into()));
    }
    let d = cfg.dim();
    let reference: Vec<DMatrix<f64>> = (0..d).map(|j| pi_frame(d, j)).collect();
    let frames: Vec<Vec<DMatrix<f64>>> = cfg
        .families
        .iter()
        .zip(&reference)
        .map(|(f, r)| f.atoms.iter().map(|a| align_frame(&a.b, r)).collect())
        .collect();
    let eps = frames
        .iter()
        .zip(&reference)
        .flat_map(|(fs, r)| fs.iter().map(move |b| (b - r).norm()))
        .fold(0.0, f64::max);
    let tuple = MeasureTuple::from_masses(&cfg.families.iter().map(|f| f.masses()).collect::<Vec<_>>())?;
    let inst = NonnegInstance::new(tuple, cfg.p.clone(), frames, reference, eps, kappa, bound)?;
    Ok((hypothesis_margin(&inst)?, eps))
}

/// Pieces of `t dQ/dt`, each already multiplied by `t^(-alpha p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub t: f64,
    pub q: f64,
    /// `E(-alpha p eta det M + (2/t^2) eta det(M) Sigma(phi phi^T))`.
    pub t_dq: f64,
    /// `E((2/t^2) eta S_0)`.
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    /// `(d - alpha p) Q`.
    pub shift: f64,
    /// `E(div W)`, zero in exact arithmetic.
    pub divergence: f64,
    /// `t_dq - (s0 + s1 + s2 + shift)`.
    pub residual: f64,
    /// Sum of absolute values of the grid-summed pieces, for relative comparisons.
    pub scale: f64,
}

/// Quantities: `[det, det_phiphi, f_adj_f, s1, s2, div]`, each times `eta`.
fn derivative_sums(model: &Model, cfg: &QConfig, t: f64, h: f64) -> Result<Vec<f64>> {
    let d = cfg.dim();
    let cells = lattice(cfg, t, h)?;
    let inv_t2 = 1.0 / (t * t);
    grid_sum(&cells, d, h, 6, |x| {
        let (eta, grad) = cutoff_value(&cfg.cutoff, x);
        if eta == 0.0 {
            return Ok(vec![0.0; 6]);
        }
        let Some(v) = model.eval(x, t, cfg.tau)? else {
            return Ok(vec![0.0; 6]);
        };
        let s1 = grad.iter().zip(&v.adj_f).map(|(g, a)| g * a).sum::<f64>() + eta * v.dadj_f;
        let s2 = eta * v.adj_bending;
        let div = s1 + s2 + d as f64 * eta * v.det - 2.0 * inv_t2 * eta * v.f_adj_f;
        Ok(vec![eta * v.det, eta * v.det_phiphi, eta * v.f_adj_f, s1, s2, div])
    })
}

fn derivative_with(model: &Model, cfg: &QConfig, t: f64, h: f64) -> Result<DerivativeReport> {
    check_t(t)?;
    let d = cfg.dim() as f64;
    let ap = cfg.alpha * cfg.p_mean();
    let pre = t.powf(-ap);
    let s = derivative_sums(model, cfg, t, h)?;
    let inv_t2 = 1.0 / (t * t);
    let q = pre * s[0];
    let t_dq = pre * (-ap * s[0] + 2.0 * inv_t2 * s[1]);
    let s0 = pre * 2.0 * inv_t2 * (s[1] - s[2]);
    let (s1, s2, divergence) = (pre * s[3], pre * s[4], pre * s[5]);
    let shift = (d - ap) * q;
    let scale = pre * (ap * s[0].abs() + 2.0 * inv_t2 * (s[1].abs() + s[2].abs()) + s[3].abs() + s[4].abs() + d * s[0].abs());
    Ok(DerivativeReport { t, q, t_dq, s0, s1, s2, shift, divergence, residual: t_dq - (s0 + s1 + s2 + shift), scale })
}

/// `t dQ/dt` from the weight law next to its decomposition into `S_0, S_1, S_2` terms.
pub fn derivative_decomposition(cfg: &QConfig, t: f64) -> Result<DerivativeReport> {
    cfg.validate()?;
    derivative_with(&Model::new(cfg, true)?, cfg, t, cfg.spacing.at(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTerms {
    pub t: f64,
    pub s1: f64,
    pub s2: f64,
}

/// `E_t(S_1)` and `E_t(S_2)`.
pub fn error_terms(cfg: &QConfig, t: f64) -> Result<ErrorTerms> {
    let r = derivative_decomposition(cfg, t)?;
    Ok(ErrorTerms { t, s1: r.s1, s2: r.s2 })
}

/// Error terms along a ladder with one compiled model.
pub fn error_term_scan(cfg: &QConfig, ladder: &[f64]) -> Result<Vec<ErrorTerms>> {
    cfg.validate()?;
    let model = Model::new(cfg, true)?;
    ladder
        .iter()
        .map(|&t| derivative_with(&model, cfg, t, cfg.spacing.at(t)).map(|r| ErrorTerms { t, s1: r.s1, s2: r.s2 }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceProbe {
    pub t: f64,
    pub h: f64,
    /// `int div W dx` at spacing `h` and at `2h`.
    pub value: f64,
    pub coarse_value: f64,
    /// `|coarse_value| / |value|`.
    pub refinement_ratio: f64,
    /// Integral of the absolute size of the summands, for scale.
    pub scale: f64,
}

/// Quadrature of the divergence of `W = int eta adj(M) F d(mu_w)^p`; zero in exact arithmetic.
pub fn divergence_probe(cfg: &QConfig, t: f64) -> Result<DivergenceProbe> {
    cfg.validate()?;
    if matches!(cfg.cutoff, Cutoff::Global) {
        return Err(Error::Config("the divergence probe needs a bump cutoff".into()));
    }
    let model = Model::new(cfg, true)?;
    let h = cfg.spacing.at(t);
    let fine = derivative_with(&model, cfg, t, h)?;
    let coarse = derivative_with(&model, cfg, t, 2.0 * h)?;
    let pre = t.powf(-cfg.alpha * cfg.p_mean());
    let (value, coarse_value) = (fine.divergence / pre, coarse.divergence / pre);
    Ok(DivergenceProbe {
        t,
        h,
        value,
        coarse_value,
        refinement_ratio: coarse_value.abs() / value.abs(),
        scale: fine.scale / pre,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFit {
    pub exponent: f64,
    pub prefactor: f64,
    /// 95% bootstrap interval for the exponent.
    pub band: (f64, f64),
}

fn least_squares(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Fit `|y| ~ c t^k` in log-log coordinates, with a bootstrap band over the points.
pub fn fit_power_law(ts: &[f64], ys: &[f64], resamples: usize, seed: u64) -> Result<PowerFit> {
    let pts: Vec<(f64, f64)> =
        ts.iter().zip(ys).filter(|(t, y)| **t > 0.0 && y.abs() > 0.0).map(|(t, y)| (t.ln(), y.abs().ln())).collect();
    let (xs, ls): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
    let (exponent, icpt) =
        least_squares(&xs, &ls).ok_or_else(|| Error::Domain("power fit needs two distinct nonzero points".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let idx: Vec<usize> = (0..pts.len()).map(|_| rng.random_range(0..pts.len())).collect();
        let bx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let by: Vec<f64> = idx.iter().map(|&i| ls[i]).collect();
        if let Some((s, _)) = least_squares(&bx, &by) {
            slopes.push(s);
        }
    }
    slopes.sort_by(f64::total_cmp);
    let band = if slopes.is_empty() {
        (exponent, exponent)
    } else {
        let q = |f: f64| slopes[((slopes.len() - 1) as f64 * f).round() as usize];
        (q(0.025), q(0.975))
    };
    Ok(PowerFit { exponent, prefactor: icpt.exp(), band })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kakeya::geometry::AtomMap;
    use std::f64::consts::PI;

    fn axis_family(d: usize, j: usize, offsets: &[(Vec<f64>, f64)]) -> MapFamily {
        MapFamily::new(offsets.iter().map(|(v, m)| AtomMap::affine(pi_frame(d, j), v.clone(), *m).unwrap()).collect()).unwrap()
    }

    fn loomis_whitney() -> Vec<MapFamily> {
        (0..2).map(|j| axis_family(2, j, &[(vec![0.0], 1.0)])).collect()
    }

    #[test]
    fn loomis_whitney_is_pi() {
        let cfg = QConfig::new(loomis_whitney(), 1.0).unwrap();
        for t in [0.1, 0.7, 2.0] {
            let q = q_functional(&cfg, t).unwrap();
            assert!((q.value - PI).abs() < 1e-10, "{q:?}");
            assert!(!q.coarse);
        }
    }

    #[test]
    fn alpha_zero_closed_form() {
        let mut cfg = QConfig::new(loomis_whitney(), 1.5).unwrap();
        cfg.alpha = 0.0;
        for t in [0.3, 1.1] {
            // det M = p^2 and each Gaussian slab gives sqrt(pi / p) t
            let expect = 1.5f64.powi(2) * PI / 1.5 * t * t;
            assert!((q_functional(&cfg, t).unwrap().value - expect).abs() < 1e-10 * expect);
        }
    }

    #[test]
    fn scaling_covariance() {
        let fams = |s: f64| -> Vec<MapFamily> {
            vec![
                axis_family(2, 0, &[(vec![0.3 * s], 1.0), (vec![-0.5 * s], 2.0)]),
                axis_family(2, 1, &[(vec![0.1 * s], 1.0)]),
            ]
        };
        let a = q_functional(&QConfig::new(fams(1.0), 1.3).unwrap(), 0.4).unwrap().value;
        let b = q_functional(&QConfig::new(fams(2.0), 1.3).unwrap(), 0.8).unwrap().value;
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn weights_and_truncation() {
        let fams = loomis_whitney();
        let w = gaussian_weight(&fams, 0.5, &[0.5, 0.0], 1e-16).unwrap();
        assert!((w[0][0] - 1.0).abs() < 1e-15 && (w[1][0] - (-1.0f64).exp()).abs() < 1e-15);
        // exp(-36) is just above 1e-16; exp(-49) is below it
        let w = gaussian_weight(&fams, 0.5, &[3.0, 0.0], 1e-16).unwrap();
        assert!(w[1][0] > 0.0);
        let w = gaussian_weight(&fams, 0.5, &[3.5, 0.0], 1e-16).unwrap();
        assert_eq!(w[1][0], 0.0);
    }

    #[test]
    fn bump_profile_is_c1() {
        assert_eq!(bump_profile(1.0), (1.0, 0.0));
        assert_eq!(bump_profile(2.0), (0.0, 0.0));
        let (v, dv) = bump_profile(1.5);
        let fd = (bump_profile(1.5 + 1e-6).0 - bump_profile(1.5 - 1e-6).0) / 2e-6;
        assert!(v > 0.0 && (dv - fd).abs() < 1e-7);
        assert!(bump_profile(1.0 + 1e-9).1.abs() < 1e-8);
    }

    #[test]
    fn s0_single_atom_p1_vanishes() {
        let fams = vec![axis_family(2, 0, &[(vec![0.2], 1.0)]), axis_family(2, 1, &[(vec![-0.4], 1.0)])];
        let cfg = QConfig::new(fams, 1.0).unwrap();
        for x in [[0.3, 0.9], [-1.0, 0.25]] {
            let s = s0_integral(&cfg, 0.8, &x).unwrap();
            assert!(s.value.abs() < 1e-12 * s.scale.max(1.0), "{s:?}");
        }
        // phi = 0 at the crossing point
        let s = s0_integral(&cfg, 0.8, &[-0.4, 0.2]).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn derivative_identity_affine_global() {
        let fams = vec![
            axis_family(2, 0, &[(vec![0.3], 1.0), (vec![-0.2], 0.5)]),
            axis_family(2, 1, &[(vec![0.1], 1.0), (vec![0.4], 2.0)]),
        ];
        let cfg = QConfig::new(fams, 1.3).unwrap();
        let model = Model::new(&cfg, true).unwrap();
        let t = 0.5;
        let r = derivative_with(&model, &cfg, t, t / 8.0).unwrap();
        assert_eq!((r.s1, r.s2), (0.0, 0.0));
        assert!(r.residual.abs() < 1e-9 * r.scale, "{r:?}");
        assert!(r.shift.abs() < 1e-12 * r.scale);
        let fd = crate::flow::richardson_derivative(|s| Ok(q_with(&model, &cfg, s)?.value), t, 1e-3).unwrap();
        assert!((t * fd - r.t_dq).abs() < 1e-6 * r.scale, "{} vs {}", t * fd, r.t_dq);
        assert!(r.s0 >= 0.0);
    }

    #[test]
    fn power_fit_recovers_exponent() {
        let ts: Vec<f64> = (1..8).map(|k| 0.1 * k as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 3.0 * t.powf(0.87)).collect();
        let fit = fit_power_law(&ts, &ys, 200, 7).unwrap();
        assert!((fit.exponent - 0.87).abs() < 1e-12 && (fit.prefactor - 3.0).abs() < 1e-12);
        assert!((fit.band.0 - 0.87).abs() < 1e-9 && (fit.band.1 - 0.87).abs() < 1e-9);
    }

    #[test]
    fn global_cutoff_rejects_curved() {
        let h = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.0]);
        let curved = MapFamily::new(vec![AtomMap::new(pi_frame(2, 0), vec![0.0], Some(vec![h]), 1.0).unwrap()]).unwrap();
        assert!(QConfig::new(vec![curved, axis_family(2, 1, &[(vec![0.0], 1.0)])], 1.0).is_err());
    }

    fn curved_pair() -> Vec<MapFamily> {
        let h0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
        let h1 = DMatrix::from_row_slice(2, 2, &[-0.1, 0.2, 0.2, 0.25]);
        vec![
            MapFamily::new(vec![
                AtomMap::new(pi_frame(2, 0), vec![0.1], Some(vec![h0.clone()]), 1.0).unwrap(),
                AtomMap::new(pi_frame(2, 0), vec![-0.3], Some(vec![h0 * 0.5]), 0.7).unwrap(),
            ])
            .unwrap(),
            MapFamily::new(vec![AtomMap::new(pi_frame(2, 1), vec![0.2], Some(vec![h1]), 1.0).unwrap()]).unwrap(),
        ]
    }

    #[test]
    fn curved_decomposition_matches_finite_differences() {
        let mut cfg = QConfig::new(loomis_whitney(), 1.3).unwrap();
        cfg.families = curved_pair();
        cfg.cutoff = Cutoff::Bump { center: vec![0.05, -0.1], radius: 0.6 };
        cfg.spacing = Spacing::PerT(16.0);
        let model = Model::new(&cfg, true).unwrap();
        for t in [0.2, 0.4] {
            let h = t / 16.0;
            let r = derivative_with(&model, &cfg, t, h).unwrap();
            let fd = crate::flow::richardson_derivative(|s| Ok(derivative_with(&model, &cfg, s, h)?.q), t, 1e-3).unwrap();
            assert!((t * fd - r.t_dq).abs() < 1e-8 * r.scale, "{} vs {}", t * fd, r.t_dq);
            assert!(r.s1 != 0.0 && r.s2 != 0.0);
            assert!(r.divergence.abs() < 1e-6 * r.scale, "{r:?}");
            assert!((r.residual + r.divergence).abs() < 1e-12 * r.scale);
        }
    }

    #[test]
    fn affine_bump_has_no_bending_term() {
        let mut cfg = QConfig::new(
            vec![axis_family(2, 0, &[(vec![0.3], 1.0), (vec![-0.2], 0.5)]), axis_family(2, 1, &[(vec![0.1], 1.0)])],
            1.3,
        )
        .unwrap();
        let global = error_terms(&cfg, 0.5).unwrap();
        assert_eq!((global.s1, global.s2), (0.0, 0.0));
        cfg.cutoff = Cutoff::Bump { center: vec![0.05, -0.1], radius: 0.6 };
        let e = error_terms(&cfg, 0.5).unwrap();
        assert_eq!(e.s2, 0.0);
        assert!(e.s1.is_finite() && e.s1 != 0.0);
    }

    #[test]
    fn divergence_probe_refines() {
        let mut cfg = QConfig::new(
            vec![axis_family(2, 0, &[(vec![0.3], 1.0), (vec![-0.2], 0.5)]), axis_family(2, 1, &[(vec![0.1], 1.0)])],
            1.3,
        )
        .unwrap();
        cfg.cutoff = Cutoff::Bump { center: vec![0.05, -0.1], radius: 0.6 };
        cfg.spacing = Spacing::PerT(16.0);
        let r = divergence_probe(&cfg, 2.0).unwrap();
        assert!(r.refinement_ratio >= 3.0, "{r:?}");
        assert!(r.value.abs() < 1e-3 * r.scale);
    }
}
