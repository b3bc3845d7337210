//! Hausdorff dimension, lattice covering estimates of the Hausdorff measure,
//! densities, approximate limits and doubling constants.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flows::coords1_forward;
use crate::sampling::{self, Region};
use crate::structure::{CCStructure, Point};

/// `nu = sum_k deg X_k`.
pub fn hausdorff_dimension(s: &CCStructure) -> usize {
    s.degrees().iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricTag {
    Cc,
    Rho,
    Infty,
}

impl MetricTag {
    /// Radius, in the tagged quasimetric, of a lattice cell of scale `r`.
    fn cell_radius(self, s: &CCStructure, r: f64) -> f64 {
        match self {
            MetricTag::Infty | MetricTag::Cc => r,
            MetricTag::Rho => {
                let mut start = 0;
                let mut worst: f64 = 1.0;
                for (i, &h) in s.filtration().iter().enumerate() {
                    let dim = (h - start) as f64;
                    worst = worst.max(dim.powf(1.0 / (2.0 * (i + 1) as f64)));
                    start = h;
                }
                worst * r
            }
        }
    }
}

pub type Indicator<'a> = dyn Fn(&[f64]) -> bool + Sync + 'a;

/// A set given by a membership test and a chart bounding box.
pub struct ChartSet<'a> {
    pub indicator: Box<Indicator<'a>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl<'a> ChartSet<'a> {
    pub fn new(indicator: impl Fn(&[f64]) -> bool + Sync + 'a, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self {
            indicator: Box::new(indicator),
            lo,
            hi,
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.lo).all(|(x, l)| x >= l)
            && p.iter().zip(&self.hi).all(|(x, h)| x <= h)
            && (self.indicator)(p)
    }

    pub fn empty(n: usize) -> Self {
        Self::new(|_| false, vec![0.0; n], vec![0.0; n])
    }

    /// `{ |x_k - c_k| <= r^{deg k} }`, the homogeneous cube of radius `r` around `c`.
    pub fn homogeneous_cube(degrees: &[usize], center: &[f64], r: f64) -> ChartSet<'static> {
        let half: Vec<f64> = degrees.iter().map(|&d| r.powi(d as i32)).collect();
        let lo = center.iter().zip(&half).map(|(c, h)| c - h).collect();
        let hi = center.iter().zip(&half).map(|(c, h)| c + h).collect();
        ChartSet::new(|_| true, lo, hi)
    }
}

/// Scales `1/2, 1/4, 1/8` whose lattice over the box `[lo, hi]` has at most
/// `max_cells` cells; the coarsest scale is always kept.
pub fn lattice_grid(degrees: &[usize], lo: &[f64], hi: &[f64], max_cells: f64) -> Vec<f64> {
    let cells = |r: f64| -> f64 {
        degrees
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(&d, (l, h))| ((h - l) / r.powi(d as i32)).max(1.0))
            .product()
    };
    let mut grid = vec![0.5];
    for r in [0.25, 0.125] {
        if cells(r) <= max_cells {
            grid.push(r);
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureEstimate {
    pub value: f64,
    pub scale_grid: Vec<f64>,
    pub per_scale: Vec<f64>,
    pub metric_tag: MetricTag,
    pub nu: usize,
}

impl MeasureEstimate {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# nu={}\nscale,value\n", self.nu);
        for (r, v) in self.scale_grid.iter().zip(&self.per_scale) {
            writeln!(out, "{r:e},{v:e}").unwrap();
        }
        out
    }
}

/// Covering sum at one scale: anisotropic chart cells of side `r^{deg k}`
/// centred at `(m + 1/2) r^{deg k}`; a cell counts when its centre lies in the set.
fn covering_sum(s: &CCStructure, set: &ChartSet<'_>, r: f64, tag: MetricTag) -> f64 {
    let n = s.dim();
    let side: Vec<f64> = s.degrees().iter().map(|&d| r.powi(d as i32)).collect();
    let ranges: Vec<(i64, i64)> = (0..n)
        .map(|k| {
            let a = (set.lo[k] / side[k] - 0.5).floor() as i64;
            let b = (set.hi[k] / side[k] - 0.5).ceil() as i64;
            (a, b)
        })
        .collect();
    if ranges.iter().any(|(a, b)| b < a) {
        return 0.0;
    }
    // parallel over the first axis, serial odometer over the rest
    let (a0, b0) = ranges[0];
    let count: u64 = (a0..=b0)
        .into_par_iter()
        .map(|m0| {
            let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
            idx[0] = m0;
            let mut p = vec![0.0; n];
            let mut c = 0u64;
            loop {
                for k in 0..n {
                    p[k] = (idx[k] as f64 + 0.5) * side[k];
                }
                if set.contains(&p) {
                    c += 1;
                }
                let mut k = n - 1;
                loop {
                    if k == 0 {
                        return c;
                    }
                    idx[k] += 1;
                    if idx[k] <= ranges[k].1 {
                        break;
                    }
                    idx[k] = ranges[k].0;
                    k -= 1;
                }
            }
        })
        .sum();
    count as f64 * tag.cell_radius(s, r).powi(hausdorff_dimension(s) as i32)
}

/// Lattice covering estimate of the `nu`-dimensional measure, up to Ball-Box constants.
pub fn measure_estimate(
    s: &CCStructure,
    set: &ChartSet<'_>,
    scale_grid: &[f64],
    metric_tag: MetricTag,
) -> MeasureEstimate {
    let mut grid = scale_grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    let per_scale: Vec<f64> = grid
        .iter()
        .map(|&r| covering_sum(s, set, r, metric_tag))
        .collect();
    MeasureEstimate {
        value: per_scale.last().copied().unwrap_or(0.0),
        scale_grid: grid,
        per_scale,
        metric_tag,
        nu: hausdorff_dimension(s),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub point: Point,
    pub r_grid: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Three-sigma Monte-Carlo error per ratio.
    pub errors: Vec<f64>,
    pub limit_guess: f64,
}

/// Uniform samples of `Box(x, r)` in first-kind coordinates, mapped to the chart.
/// Points whose flow leaves the chart are returned as `None`.
fn box_samples(s: &CCStructure, x: &Point, r: f64, unit: &[Vec<f64>]) -> Vec<Option<Point>> {
    unit.par_iter()
        .map(|w| {
            let z: Vec<f64> = w
                .iter()
                .zip(s.degrees())
                .map(|(v, &d)| v * r.powi(d as i32))
                .collect();
            coords1_forward(s, x, &z).ok()
        })
        .collect()
}

/// Fraction of `Box(x, r)` occupied by the set, per radius.
pub fn density(
    s: &CCStructure,
    indicator: &Indicator<'_>,
    x: &Point,
    r_grid: &[f64],
    n: usize,
    seed: u64,
) -> DensityEstimate {
    let mut rng = sampling::rng(seed);
    let unit: Vec<Vec<f64>> = (0..n).map(|_| sampling::unit_cube(s.dim(), &mut rng)).collect();
    let mut ratios = Vec::with_capacity(r_grid.len());
    let mut errors = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let pts = box_samples(s, x, r, &unit);
        let valid: Vec<&Point> = pts.iter().flatten().collect();
        let m = valid.len().max(1) as f64;
        let hits = valid.iter().filter(|p| indicator(p.as_slice())).count() as f64;
        let p = hits / m;
        ratios.push(p);
        errors.push(3.0 * (p * (1.0 - p) / m).sqrt());
    }
    DensityEstimate {
        point: x.clone(),
        r_grid: r_grid.to_vec(),
        limit_guess: ratios.last().copied().unwrap_or(f64::NAN),
        ratios,
        errors,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApLimit {
    pub value: f64,
    pub certified: bool,
    /// Estimates of the approximate upper and lower limits at the smallest radius.
    pub upper: f64,
    pub lower: f64,
}

/// Fraction of the sample cloud allowed in a super- or sub-level set of density zero.
pub const AP_TAIL: f64 = 0.05;
/// Largest gap between the approximate upper and lower limits accepted as a limit.
pub const AP_TOL: f64 = 0.05;

/// Approximate limit of `f` at `x0`: the upper limit is the least `t` whose
/// super-level set `{f > t}` has density at most [`AP_TAIL`] in the smallest box,
/// the lower limit symmetrically. Undefined values lie in neither level set.
pub fn ap_limit(
    s: &CCStructure,
    f: &(dyn Fn(&[f64]) -> Option<f64> + Sync),
    x0: &Point,
    r_grid: &[f64],
    n: usize,
    seed: u64,
) -> ApLimit {
    let r = r_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let mut rng = sampling::rng(seed);
    let unit: Vec<Vec<f64>> = (0..n).map(|_| sampling::unit_cube(s.dim(), &mut rng)).collect();
    let pts = box_samples(s, x0, r, &unit);
    let mut values: Vec<f64> = pts
        .iter()
        .flatten()
        .filter_map(|p| f(p.as_slice()))
        .collect();
    if values.is_empty() {
        return ApLimit {
            value: f64::NAN,
            certified: false,
            upper: f64::NAN,
            lower: f64::NAN,
        };
    }
    values.sort_by(f64::total_cmp);
    let total = pts.len() as f64;
    let allowed = (AP_TAIL * total).floor() as usize;
    let m = values.len();
    let upper = values[m - 1 - allowed.min(m - 1)];
    let lower = values[allowed.min(m - 1)];
    ApLimit {
        value: 0.5 * (upper + lower),
        certified: upper - lower <= AP_TOL,
        upper,
        lower,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoublingReport {
    pub c_hat: f64,
    /// `(point, r, vol Box(x, 2r) / vol Box(x, r))`.
    pub ratios: Vec<(Point, f64, f64)>,
}

fn chart_jacobian_det(s: &CCStructure, x: &Point, z: &[f64]) -> Result<f64> {
    let n = z.len();
    let h = s.solver().fd_step;
    let mut m = DMatrix::zeros(n, n);
    let mut zp = z.to_vec();
    for k in 0..n {
        zp[k] = z[k] + h;
        let a = coords1_forward(s, x, &zp)?;
        zp[k] = z[k] - h;
        let b = coords1_forward(s, x, &zp)?;
        zp[k] = z[k];
        m.set_column(k, &((a - b) / (2.0 * h)));
    }
    Ok(m.determinant().abs())
}

/// Chart volume of `Box(x, r)` by Monte-Carlo integration of the Jacobian of the first-kind chart.
fn box_volume(s: &CCStructure, x: &Point, r: f64, unit: &[Vec<f64>]) -> Result<f64> {
    let dets: Vec<Result<f64>> = unit
        .par_iter()
        .map(|w| {
            let z: Vec<f64> = w
                .iter()
                .zip(s.degrees())
                .map(|(v, &d)| v * r.powi(d as i32))
                .collect();
            chart_jacobian_det(s, x, &z)
        })
        .collect();
    let mut sum = 0.0;
    for d in dets {
        sum += d?;
    }
    let cube: f64 = s
        .degrees()
        .iter()
        .map(|&d| 2.0 * r.powi(d as i32))
        .product();
    Ok(cube * sum / unit.len().max(1) as f64)
}

/// Empirical doubling constant `max vol Box(x, 2r) / vol Box(x, r)`.
pub fn doubling_report(
    s: &CCStructure,
    region: &Region,
    r_grid: &[f64],
    n: usize,
    seed: u64,
) -> Result<DoublingReport> {
    let mut report = DoublingReport {
        c_hat: f64::NAN,
        ratios: Vec::new(),
    };
    if r_grid.is_empty() || n == 0 {
        return Ok(report);
    }
    let mut rng = sampling::rng(seed);
    let points: Vec<Point> = (0..n.div_ceil(16).max(1)).map(|_| region.sample(&mut rng)).collect();
    let unit: Vec<Vec<f64>> = (0..16).map(|_| sampling::unit_cube(s.dim(), &mut rng)).collect();
    let mut c: f64 = 0.0;
    for x in &points {
        for &r in r_grid {
            let ratio = box_volume(s, x, 2.0 * r, &unit)? / box_volume(s, x, r, &unit)?;
            c = c.max(ratio);
            report.ratios.push((x.clone(), r, ratio));
        }
    }
    report.c_hat = c;
    Ok(report)
}
