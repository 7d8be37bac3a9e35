//! Direct quadrature of the multilinear Kakeya ratio for indicator tubes.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::geometry::{for_each_combo, MapFamily};
use super::heat::MAX_DIM;
use crate::error::{Error, Result};

const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub delta: f64,
    pub exponent: f64,
    pub ratio: f64,
    /// `int prod_j (sum_T m_T 1_T)^p dx`.
    pub integral: f64,
    pub points: usize,
    /// Some tube intersection reaches outside the box, so overlap was cut off.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioConfig {
    pub p: f64,
    /// Power of `delta` in the normalisation; `d / p` when `None`.
    pub exponent: Option<f64>,
    /// Axis-aligned integration box.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Grid spacing as a fraction of `delta`.
    pub spacing: f64,
    pub max_points: usize,
}

impl RatioConfig {
    pub fn new(p: f64, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        RatioConfig { p, exponent: None, lower, upper, spacing: 1.0 / 8.0, max_points: 20_000_000 }
    }
}

type Cell = [i32; MAX_DIM];
/// Per-axis index ranges of the boxes, and whether any was clipped.
type Boxes = (Vec<Vec<(i32, i32)>>, bool);

/// Index boxes of the cells that can lie in one tube of every family at once.
fn overlap_boxes(families: &[MapFamily], delta: f64, h: f64, cfg: &RatioConfig) -> Result<Boxes> {
    let d = families.len();
    let to_idx = |lo: f64, hi: f64| -> (i32, i32) {
        (((lo / h) - 0.5).floor().max(-1e9) as i32, ((hi / h) - 0.5).ceil().min(1e9) as i32)
    };
    let clip_lo: Vec<i32> = cfg.lower.iter().map(|&l| ((l / h) - 0.5).ceil() as i32).collect();
    let clip_hi: Vec<i32> = cfg.upper.iter().map(|&u| ((u / h) - 0.5).floor() as i32).collect();
    if !families.iter().all(|f| f.is_affine()) {
        return Ok((vec![(0..d).map(|k| (clip_lo[k], clip_hi[k])).collect()], false));
    }
    let sizes: Vec<usize> = families.iter().map(|f| f.atoms.len()).collect();
    let mut boxes = Vec::new();
    let mut clipped = false;
    let mut err = None;
    for_each_combo(&sizes, |idx| {
        let mut g = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DMatrix::<f64>::zeros(d, 1);
        let mut vv = 0.0;
        for (j, &i) in idx.iter().enumerate() {
            let a = &families[j].atoms[i];
            g += &a.b * a.b.transpose();
            rhs += &a.b * DMatrix::from_column_slice(d - 1, 1, &a.v);
            vv += a.v.iter().map(|v| v * v).sum::<f64>();
        }
        let lam = g.clone().symmetric_eigen().eigenvalues.min();
        if !(lam > 1e-12) {
            err = Some(Error::Domain(format!("atom combination {idx:?} is not transversal")));
            return;
        }
        let center = g.clone().cholesky().expect("positive definite").solve(&rhs);
        // sum_j |x B_j - v_j|^2 = (x - c) G (x - c)^T + residual
        let residual = vv - (center.transpose() * &g * &center)[(0, 0)];
        let budget = d as f64 * delta * delta - residual;
        if budget < 0.0 {
            return;
        }
        let r = (budget / lam).sqrt() * (1.0 + 1e-9) + h;
        let mut b = Vec::with_capacity(d);
        for k in 0..d {
            let (lo, hi) = to_idx(center[k] - r, center[k] + r);
            if lo < clip_lo[k] || hi > clip_hi[k] {
                clipped = true;
            }
            b.push((lo.max(clip_lo[k]), hi.min(clip_hi[k])));
        }
        if b.iter().all(|(lo, hi)| lo <= hi) {
            boxes.push(b);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((boxes, clipped)),
    }
}

/// `[int_box prod_j (sum_T m_T 1_{|phi_T| <= delta})^p]^(1/p) / (delta^e prod_j sum_T m_T)`
/// by midpoint quadrature on the lattice `(i + 1/2) h` with `h = spacing * delta`.
pub fn kakeya_ratio(families: &[MapFamily], delta: f64, cfg: &RatioConfig) -> Result<RatioReport> {
    let d = families.len();
    if !(2..=MAX_DIM).contains(&d) || families.iter().any(|f| f.dim() != d) {
        return Err(Error::ShapeMismatch(format!("need d families in dimension d, got {d}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("delta = {delta} not in (0, 1]")));
    }
    if !(cfg.p > 0.0) || !(cfg.spacing > 0.0) || cfg.lower.len() != d || cfg.upper.len() != d {
        return Err(Error::Config("ratio needs p > 0, a positive spacing and a box in R^d".into()));
    }
    let h = cfg.spacing * delta;
    let (boxes, clipped) = overlap_boxes(families, delta, h, cfg)?;
    let total: f64 = boxes.iter().map(|b| b.iter().map(|&(lo, hi)| (hi - lo + 1) as f64).product::<f64>()).sum();
    if total > cfg.max_points as f64 {
        return Err(Error::CapExceeded { size: total, cap: cfg.max_points as f64 });
    }
    let mut cells: Vec<Cell> = Vec::with_capacity(total as usize);
    for b in &boxes {
        let sizes: Vec<usize> = b.iter().map(|&(lo, hi)| (hi - lo + 1) as usize).collect();
        for_each_combo(&sizes, |idx| {
            let mut c = [0i32; MAX_DIM];
            for k in 0..d {
                c[k] = b[k].0 + idx[k] as i32;
            }
            cells.push(c);
        });
    }
    if boxes.len() > 1 {
        cells.sort_unstable();
        cells.dedup();
    }
    let d2 = delta * delta;
    let partial: Vec<f64> = cells
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            let mut x = vec![0.0; d];
            for c in chunk {
                for k in 0..d {
                    x[k] = (c[k] as f64 + 0.5) * h;
                }
                let mut prod = 1.0;
                for f in families {
                    // closed tubes: boundary points count as inside
                    let count: f64 =
                        f.atoms.iter().filter(|a| a.phi(&x).iter().map(|v| v * v).sum::<f64>() <= d2).map(|a| a.mass).sum();
                    if count == 0.0 {
                        prod = 0.0;
                        break;
                    }
                    prod *= count.powf(cfg.p);
                }
                acc += prod;
            }
            acc
        })
        .collect();
    let integral = partial.iter().sum::<f64>() * h.powi(d as i32);
    let exponent = cfg.exponent.unwrap_or(d as f64 / cfg.p);
    let masses: f64 = families.iter().map(|f| f.masses().iter().sum::<f64>()).product();
    let ratio = integral.powf(1.0 / cfg.p) / (delta.powf(exponent) * masses);
    Ok(RatioReport { delta, exponent, ratio, integral, points: cells.len(), clipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioLadder {
    pub rows: Vec<RatioReport>,
    /// `ratio(delta_{k+1}) / ratio(delta_k)` for each halving.
    pub steps: Vec<f64>,
    /// Largest per-step factor `max(s, 1/s)`.
    pub max_drift: f64,
    /// Smallest per-step factor `max(s, 1/s)`.
    pub min_drift: f64,
    /// Every step moves in the same direction.
    pub monotone: bool,
}

impl RatioLadder {
    /// Bounded: no step changes the ratio by `limit` or more.
    pub fn stable(&self, limit: f64) -> bool {
        self.max_drift < limit
    }

    /// Geometric drift: every step moves the same way by more than `limit`.
    pub fn drifting(&self, limit: f64) -> bool {
        self.monotone && self.min_drift > limit
    }
}

pub fn ratio_ladder(families: &[MapFamily], deltas: &[f64], cfg: &RatioConfig) -> Result<RatioLadder> {
    let rows: Vec<RatioReport> = deltas.iter().map(|&delta| kakeya_ratio(families, delta, cfg)).collect::<Result<_>>()?;
    let steps: Vec<f64> = rows.windows(2).map(|w| w[1].ratio / w[0].ratio).collect();
    let factor = |s: f64| if s > 0.0 && s.is_finite() { s.max(1.0 / s) } else { f64::INFINITY };
    let max_drift = steps.iter().map(|&s| factor(s)).fold(1.0, f64::max);
    let min_drift = steps.iter().map(|&s| factor(s)).fold(f64::INFINITY, f64::min);
    let monotone = steps.iter().all(|&s| s > 1.0) || steps.iter().all(|&s| s < 1.0);
    Ok(RatioLadder { rows, steps, max_drift, min_drift, monotone })
}

/// `2^-from, ..., 2^-to`.
pub fn dyadic_ladder(from: i32, to: i32) -> Vec<f64> {
    (from..=to).map(|k| 2f64.powi(-k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kakeya::geometry::{pi_frame, AtomMap};

    fn slab(d: usize, j: usize, v: Vec<f64>) -> MapFamily {
        MapFamily::new(vec![AtomMap::affine(pi_frame(d, j), v, 1.0).unwrap()]).unwrap()
    }

    #[test]
    fn crossing_slabs_give_four() {
        // pi_0 keeps x_1, so family 0 is the tube along e_1
        let fams = vec![slab(2, 0, vec![0.0]), slab(2, 1, vec![0.0])];
        let cfg = RatioConfig::new(1.0, vec![-1.0, -1.0], vec![1.0, 1.0]);
        for delta in dyadic_ladder(3, 7) {
            let r = kakeya_ratio(&fams, delta, &cfg).unwrap();
            assert!((r.ratio - 4.0).abs() < 1e-12, "{r:?}");
            assert!(!r.clipped);
        }
    }

    #[test]
    fn clipping_is_reported() {
        let fams = vec![slab(2, 0, vec![0.0]), slab(2, 1, vec![0.0])];
        let cfg = RatioConfig::new(1.0, vec![0.0, 0.0], vec![1.0, 1.0]);
        let r = kakeya_ratio(&fams, 0.125, &cfg).unwrap();
        assert!(r.clipped && (r.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dilation_invariance() {
        let fams = |s: f64| vec![slab(2, 0, vec![0.3 * s]), slab(2, 1, vec![-0.2 * s])];
        let cfg = RatioConfig::new(1.5, vec![-2.0, -2.0], vec![2.0, 2.0]);
        // offsets on the lattice scale so the grids match exactly
        let a = kakeya_ratio(&fams(1.0), 0.25, &cfg).unwrap().ratio;
        let b = kakeya_ratio(&fams(0.5), 0.125, &cfg).unwrap().ratio;
        assert!((a - b).abs() < 1e-12 * a);
    }
}
