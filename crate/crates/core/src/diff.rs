//! Approximate derivatives of maps between CC structures, the assembled
//! differential `L_g`, its homomorphism checks, the sub-Riemannian Jacobian
//! and the area formula.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cone::{nilpotentize, GradedAlgebra};
use crate::error::{Error, Result};
use crate::flows::{coords1_forward, coords1_inverse, flow_single};
use crate::horizontal::{replay_segments, PhiSystem};
use crate::measure::{lattice_grid, measure_estimate, ChartSet, MetricTag};
use crate::report::{loglog_slope, RateTable};
use crate::sampling;
use crate::structure::{CCStructure, Point};

/// Coordinate differences below this are treated as solver noise before
/// homogeneous norms (which take roots) are applied.
pub const NOISE_FLOOR: f64 = 1e-10;
/// Residual level accepted as exact.
pub const EXACT_TOL: f64 = 1e-7;
/// Smallest accepted log-log slope of the derivative residual `r(h)`.
pub const RATE_THRESHOLD: f64 = 0.5;
/// Agreement required between a direct curve fit and the product formula.
pub const PRODUCT_TOL: f64 = 1e-6;
/// Default fitting steps `2^-3 .. 2^-10`.
pub const DEFAULT_H0: f64 = 1.0;

pub fn default_h_grid(h0: f64) -> Vec<f64> {
    (3..=10).map(|e| h0 * 0.5_f64.powi(e)).collect()
}

pub type PointMap = Arc<dyn Fn(&Point) -> Option<Point> + Send + Sync>;

/// A map `f : E -> M~` with an optional inverse; `None` marks undefined points.
#[derive(Clone)]
pub struct MapUnderTest {
    pub name: String,
    pub source: Arc<CCStructure>,
    pub target: Arc<CCStructure>,
    eval: PointMap,
    inverse: Option<PointMap>,
}

impl std::fmt::Debug for MapUnderTest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MapUnderTest")
            .field("name", &self.name)
            .field("source", &self.source.name())
            .field("target", &self.target.name())
            .field("invertible", &self.inverse.is_some())
            .finish()
    }
}

impl MapUnderTest {
    pub fn new(
        name: impl Into<String>,
        source: Arc<CCStructure>,
        target: Arc<CCStructure>,
        eval: impl Fn(&Point) -> Option<Point> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            source,
            target,
            eval: Arc::new(eval),
            inverse: None,
        }
    }

    pub fn with_inverse(mut self, inverse: impl Fn(&Point) -> Option<Point> + Send + Sync + 'static) -> Self {
        self.inverse = Some(Arc::new(inverse));
        self
    }

    /// `f(p)`, or `None` when undefined or outside the target chart.
    pub fn eval(&self, p: &Point) -> Option<Point> {
        (self.eval)(p).filter(|q| self.target.in_chart(q.as_slice()))
    }

    pub fn inverse(&self, q: &Point) -> Option<Point> {
        self.inverse
            .as_ref()
            .and_then(|inv| inv(q))
            .filter(|p| self.source.in_chart(p.as_slice()))
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// `next . self`.
    pub fn then(&self, next: &MapUnderTest) -> MapUnderTest {
        let (a, b) = (self.eval.clone(), next.eval.clone());
        let mut out = MapUnderTest::new(
            format!("{}>{}", self.name, next.name),
            self.source.clone(),
            next.target.clone(),
            move |p| a(p).and_then(|q| b(&q)),
        );
        if let (Some(ai), Some(bi)) = (self.inverse.clone(), next.inverse.clone()) {
            out.inverse = Some(Arc::new(move |q: &Point| bi(q).and_then(|p| ai(&p))));
        }
        out
    }
}

/// Returns the nilpotent algebra at 0 when the chart is already its
/// first-kind coordinate system (the fields are the model fields).
pub fn exponential_chart(s: &CCStructure) -> Option<GradedAlgebra> {
    let n = s.dim();
    let a = nilpotentize(s, &Point::zeros(n)).ok()?;
    let probes = [0.7, -0.4, 1.3];
    for (m, scale) in probes.iter().enumerate() {
        let z: Vec<f64> = (0..n).map(|k| scale * (1.0 + 0.37 * (k + m) as f64).sin()).collect();
        let diff = s.frame_unchecked(&z) - a.model_frame(&z);
        if diff.amax() > 1e-12 {
            return None;
        }
    }
    Some(a)
}

/// Names accepted by [`test_map`].
pub const MAP_NAMES: [&str; 6] = [
    "identity",
    "dilation:<t>",
    "left_translate:<p1,p2,...>",
    "swap_hom",
    "perturbed_dilation",
    "nonsmooth_lipschitz",
];

const DEFAULT_TRANSLATION: [f64; 4] = [0.25, -0.5, 0.125, 0.0625];

fn is_heisenberg_like(s: &CCStructure) -> Option<GradedAlgebra> {
    if s.filtration() != [2, 3] {
        return None;
    }
    exponential_chart(s).filter(|a| (a.c(0, 1, 2) - 1.0).abs() < 1e-12)
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("not a number: {v:?}")))
        })
        .collect()
}

/// Built-in test maps of a space to itself.
pub fn test_map(name: &str, s: Arc<CCStructure>) -> Result<MapUnderTest> {
    let n = s.dim();
    let degrees = s.degrees().to_vec();
    let (kind, arg) = match name.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (name, None),
    };
    let scaled = move |p: &Point, t: f64, deg: &[usize]| -> Point {
        Point::from_iterator(p.len(), p.iter().zip(deg).map(|(x, &d)| x * t.powi(d as i32)))
    };
    match kind {
        "identity" => Ok(MapUnderTest::new("identity", s.clone(), s, |p| Some(p.clone()))
            .with_inverse(|q| Some(q.clone()))),
        "dilation" => {
            let t: f64 = arg
                .ok_or_else(|| Error::InvalidArgument("dilation needs a factor, e.g. dilation:2".into()))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad dilation factor in {name:?}")))?;
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidArgument(format!("dilation factor must be positive, got {t}")));
            }
            let d1 = degrees.clone();
            Ok(MapUnderTest::new(name, s.clone(), s, move |p| Some(scaled(p, t, &d1)))
                .with_inverse(move |q| Some(scaled(q, 1.0 / t, &degrees))))
        }
        "left_translate" => {
            let p = match arg {
                Some(a) => parse_list(a)?,
                None => DEFAULT_TRANSLATION.iter().copied().cycle().take(n).collect(),
            };
            if p.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: p.len() });
            }
            let p = Point::from_vec(p);
            if let Some(a) = exponential_chart(&s) {
                let a = Arc::new(a);
                let (a1, p1) = (a.clone(), p.clone());
                let pinv = a.inverse(p.as_slice());
                Ok(MapUnderTest::new(name, s.clone(), s, move |u| {
                    Some(a1.product(p1.as_slice(), u.as_slice()))
                })
                .with_inverse(move |v| Some(a.product(pinv.as_slice(), v.as_slice()))))
            } else {
                // right multiplication by exp is the flow of left-invariant fields
                let origin = Point::zeros(n);
                let (s1, s2, o1, o2, p1) = (s.clone(), s.clone(), origin.clone(), origin, p.clone());
                Ok(MapUnderTest::new(name, s.clone(), s, move |u| {
                    let z = coords1_inverse(&s1, &o1, u).ok()?.x;
                    coords1_forward(&s1, &p1, z.as_slice()).ok()
                })
                .with_inverse(move |v| {
                    let z = coords1_inverse(&s2, &p, v).ok()?.x;
                    coords1_forward(&s2, &o2, z.as_slice()).ok()
                }))
            }
        }
        "swap_hom" => {
            is_heisenberg_like(&s)
                .ok_or_else(|| Error::InvalidArgument("swap_hom needs a Heisenberg chart".into()))?;
            let swap = |p: &Point| Some(Point::from_vec(vec![p[1], p[0], -p[2]]));
            Ok(MapUnderTest::new(name, s.clone(), s, swap).with_inverse(swap))
        }
        "perturbed_dilation" => {
            let last = n - 1;
            let d = degrees[last] as i32;
            let d1 = degrees.clone();
            Ok(MapUnderTest::new(name, s.clone(), s, move |p| {
                let mut q = scaled(p, 2.0, &d1);
                q[last] += p[0].powi(2 * d);
                Some(q)
            })
            .with_inverse(move |q| {
                let mut p = scaled(q, 0.5, &degrees);
                p[last] -= p[0].powi(2 * d) / 2f64.powi(d);
                Some(p)
            }))
        }
        "nonsmooth_lipschitz" => {
            is_heisenberg_like(&s)
                .ok_or_else(|| Error::InvalidArgument("nonsmooth_lipschitz needs a Heisenberg chart".into()))?;
            // identity for x1 <= 0, the shear automorphism e1 -> e1 + e2 for x1 > 0
            let fwd = |p: &Point| {
                let mut q = p.clone();
                if p[0] > 0.0 {
                    q[1] += p[0];
                }
                Some(q)
            };
            let inv = |q: &Point| {
                let mut p = q.clone();
                if q[0] > 0.0 {
                    p[1] -= q[0];
                }
                Some(p)
            };
            Ok(MapUnderTest::new(name, s.clone(), s, fwd).with_inverse(inv))
        }
        _ => Err(Error::InvalidArgument(format!(
            "unknown map {name:?}; available: {}",
            MAP_NAMES.join(", ")
        ))),
    }
}

/// Homogeneous norm of `x` with sub-noise coordinates dropped.
fn floor_norm(a: &GradedAlgebra, x: &[f64]) -> f64 {
    let y: Vec<f64> = x.iter().map(|&v| if v.abs() < NOISE_FLOOR { 0.0 } else { v }).collect();
    a.hom_norm(&y)
}

/// Quasidistance `|x^{-1} y|` in `a`, noise-floored.
fn floor_distance(a: &GradedAlgebra, x: &[f64], y: &[f64]) -> f64 {
    floor_norm(a, a.product(a.inverse(x).as_slice(), y).as_slice())
}

/// An element of the local group at `f(g)` fitted as a derivative.
#[derive(Debug, Clone)]
pub struct DerivativeElement {
    pub base_target: Arc<GradedAlgebra>,
    pub x: DVector<f64>,
    /// `(h, r(h))` with `r(h) = max_{+-h} d~(f(curve(h)), f(g) delta_h x) / h`.
    pub residual: RateTable,
}

impl DerivativeElement {
    pub fn norm(&self) -> f64 {
        self.base_target.hom_norm(self.x.as_slice())
    }

    pub fn is_exact(&self) -> bool {
        self.residual.max_deviation() <= EXACT_TOL
    }
}

/// Fits `a` with `f(curve(h)) ~ f(g) . delta_h a` from both signs of `h`,
/// Richardson-extrapolating the symmetric quotients.
fn fit_curve(
    f: &MapUnderTest,
    fg: &Point,
    alg: &Arc<GradedAlgebra>,
    curve: &(dyn Fn(f64) -> Result<Point> + Sync),
    h_grid: &[f64],
) -> Result<DerivativeElement> {
    let mut h_grid: Vec<f64> = h_grid.iter().copied().filter(|h| *h > 0.0).collect();
    h_grid.sort_by(|a, b| b.total_cmp(a));
    if h_grid.is_empty() {
        return Err(Error::InvalidArgument("empty step grid".into()));
    }
    let deg = alg.degrees().to_vec();
    let target = &f.target;
    let image = |h: f64| -> Result<DVector<f64>> {
        let p = curve(h).map_err(|_| Error::UndefinedAlongCurve(h))?;
        let q = f.eval(&p).ok_or(Error::UndefinedAlongCurve(h))?;
        coords1_inverse(target, fg, &q)
            .map(|c| c.x)
            .map_err(|_| Error::UndefinedAlongCurve(h))
    };
    let samples: Vec<(DVector<f64>, DVector<f64>)> = h_grid
        .par_iter()
        .map(|&h| Ok((image(h)?, image(-h)?)))
        .collect::<Result<_>>()?;
    // (y(h) - y(-h)) / 2 h^deg: inversion is negation in first-kind coordinates
    let quotients: Vec<DVector<f64>> = samples
        .iter()
        .zip(&h_grid)
        .map(|((yp, ym), &h)| {
            DVector::from_iterator(
                deg.len(),
                (0..deg.len()).map(|i| (yp[i] - ym[i]) / (2.0 * h.powi(deg[i] as i32))),
            )
        })
        .collect();
    let extrapolated: Vec<DVector<f64>> = (0..quotients.len().saturating_sub(1))
        .map(|k| {
            let q = h_grid[k] / h_grid[k + 1];
            (&quotients[k + 1] * q - &quotients[k]) / (q - 1.0)
        })
        .collect();
    let x = match extrapolated.len() {
        0 => quotients[0].clone(),
        1 => extrapolated[0].clone(),
        _ => {
            let best = (1..extrapolated.len())
                .min_by(|&a, &b| {
                    let da = (&extrapolated[a] - &extrapolated[a - 1]).amax();
                    let db = (&extrapolated[b] - &extrapolated[b - 1]).amax();
                    da.total_cmp(&db)
                })
                .unwrap();
            extrapolated[best].clone()
        }
    };
    let rows: Vec<(f64, f64)> = samples
        .iter()
        .zip(&h_grid)
        .map(|((yp, ym), &h)| {
            let rp = floor_distance(alg, alg.dilate(x.as_slice(), h).as_slice(), yp.as_slice());
            let rm = floor_distance(alg, alg.dilate(x.as_slice(), -h).as_slice(), ym.as_slice());
            (h, rp.max(rm) / h)
        })
        .collect();
    let residual = RateTable::new(rows);
    let exact = residual.max_deviation() <= EXACT_TOL;
    if !exact && !(residual.slope > RATE_THRESHOLD) {
        return Err(Error::NotDifferentiable(format!(
            "residual rate slope {:.3} with max residual {:.3e}",
            residual.slope,
            residual.max_deviation()
        )));
    }
    Ok(DerivativeElement {
        base_target: alg.clone(),
        x,
        residual,
    })
}

fn image_point(f: &MapUnderTest, g: &Point) -> Result<Point> {
    f.eval(g).ok_or(Error::UndefinedAlongCurve(0.0))
}

/// Derivative of `f` along the horizontal field `X_j` at `g`.
pub fn horizontal_derivative(
    f: &MapUnderTest,
    g: &Point,
    j: usize,
    h_grid: &[f64],
) -> Result<DerivativeElement> {
    let fg = image_point(f, g)?;
    let alg = Arc::new(nilpotentize(&f.target, &fg)?);
    horizontal_derivative_with(f, g, &fg, &alg, j, h_grid)
}

fn horizontal_derivative_with(
    f: &MapUnderTest,
    g: &Point,
    fg: &Point,
    alg: &Arc<GradedAlgebra>,
    j: usize,
    h_grid: &[f64],
) -> Result<DerivativeElement> {
    let h1 = f.source.horizontal_dim();
    if j >= h1 {
        return Err(Error::InvalidArgument(format!(
            "field {j} is not horizontal (horizontal dimension {h1})"
        )));
    }
    let s = &f.source;
    let curve = |h: f64| flow_single(s, g, j, h);
    let mut d = fit_curve(f, fg, alg, &curve, h_grid)?;
    let th1 = alg.horizontal_dim();
    let vertical = d.x.iter().skip(th1).fold(0.0_f64, |m, v| m.max(v.abs()));
    if vertical > EXACT_TOL.max(PRODUCT_TOL * d.x.amax()) {
        return Err(Error::NotDifferentiable(format!(
            "horizontal derivative along field {j} has vertical part {vertical:.3e}"
        )));
    }
    // the accepted derivative lies in the horizontal layer; drop the fit noise
    for i in th1..d.x.len() {
        d.x[i] = 0.0;
    }
    Ok(d)
}

/// Derivative along `Gamma_k` together with its cross-check data.
#[derive(Debug, Clone)]
pub struct CurveDerivative {
    /// Product of dilated horizontal derivatives over the plan.
    pub product: DerivativeElement,
    /// Direct fit along the curve.
    pub direct: DerivativeElement,
    /// Largest coordinate gap between `product` and `direct`.
    pub gap: f64,
    /// `sum |s_i|` over the plan, the constant of the norm bound.
    pub plan_constant: f64,
    /// Largest homogeneous norm among the horizontal derivatives.
    pub horizontal_max: f64,
}

impl CurveDerivative {
    pub fn norm_bound_holds(&self) -> bool {
        self.product.norm() <= self.plan_constant * self.horizontal_max * (1.0 + 1e-9) + EXACT_TOL
    }
}

fn product_over_plan(
    alg: &Arc<GradedAlgebra>,
    word: &[(usize, f64)],
    horizontal: &[DerivativeElement],
) -> DVector<f64> {
    word.iter().fold(DVector::zeros(alg.dim()), |acc, &(j, s)| {
        alg.product(acc.as_slice(), alg.dilate(horizontal[j].x.as_slice(), s).as_slice())
    })
}

/// Derivative of `f` along `Gamma_k(g; t)`; for horizontal `k` this is the
/// horizontal derivative.
pub fn curve_derivative(
    f: &MapUnderTest,
    g: &Point,
    k: usize,
    h_grid: &[f64],
) -> Result<CurveDerivative> {
    let sys = PhiSystem::new(&f.source, g)?;
    let fg = image_point(f, g)?;
    let alg = Arc::new(nilpotentize(&f.target, &fg)?);
    let h1 = f.source.horizontal_dim();
    let horizontal = (0..h1)
        .map(|j| horizontal_derivative_with(f, g, &fg, &alg, j, h_grid))
        .collect::<Result<Vec<_>>>()?;
    curve_derivative_with(f, g, &fg, &alg, &sys, &horizontal, k, h_grid)
}

#[allow(clippy::too_many_arguments)]
fn curve_derivative_with(
    f: &MapUnderTest,
    g: &Point,
    fg: &Point,
    alg: &Arc<GradedAlgebra>,
    sys: &PhiSystem,
    horizontal: &[DerivativeElement],
    k: usize,
    h_grid: &[f64],
) -> Result<CurveDerivative> {
    if k >= f.source.dim() {
        return Err(Error::IndexOutOfRange {
            index: k,
            dim: f.source.dim(),
        });
    }
    let horizontal_max = horizontal.iter().map(|d| d.norm()).fold(0.0, f64::max);
    if k < horizontal.len() {
        return Ok(CurveDerivative {
            product: horizontal[k].clone(),
            direct: horizontal[k].clone(),
            gap: 0.0,
            plan_constant: 1.0,
            horizontal_max,
        });
    }
    let word = sys.curve_word(k, 1.0);
    let plan_constant = word.iter().map(|w| w.1.abs()).sum();
    let x = product_over_plan(alg, &word, horizontal);
    let s = &f.source;
    let curve = |h: f64| replay_segments(s, g, &sys.curve_word(k, h));
    let direct = fit_curve(f, fg, alg, &curve, h_grid)?;
    let gap = (&direct.x - &x).amax();
    if gap > 10.0 * PRODUCT_TOL {
        return Err(Error::ProductMismatch(gap));
    }
    let residual = direct.residual.clone();
    Ok(CurveDerivative {
        product: DerivativeElement {
            base_target: alg.clone(),
            x,
            residual,
        },
        direct,
        gap,
        plan_constant,
        horizontal_max,
    })
}

/// `L_g : Phi^_g(t) -> prod_k delta~_{t_k} ap d_sub(f . Gamma_k)(g)`.
#[derive(Debug, Clone)]
pub struct DifferentialMap {
    pub g: Point,
    pub fg: Point,
    pub per_coordinate: Vec<DerivativeElement>,
    /// Product-formula gaps, zero for horizontal slots.
    pub product_gaps: Vec<f64>,
    /// Whether every curve derivative obeys the norm bound.
    pub norm_bounds_hold: bool,
    pub source: PhiSystem,
    pub target_algebra: Arc<GradedAlgebra>,
}

impl DifferentialMap {
    pub fn source_algebra(&self) -> &GradedAlgebra {
        &self.source.algebra
    }

    /// `L_g(z)` for `z` in first-kind coordinates of the local group at `g`.
    pub fn apply(&self, z: &[f64]) -> DVector<f64> {
        let t = self.source.phi_hat_inverse(z);
        let a = &self.target_algebra;
        self.per_coordinate
            .iter()
            .zip(t.iter())
            .fold(DVector::zeros(a.dim()), |acc, (d, &tk)| {
                if tk == 0.0 {
                    acc
                } else {
                    a.product(acc.as_slice(), a.dilate(d.x.as_slice(), tk).as_slice())
                }
            })
    }

    /// Graded matrix whose k-th column is `L_g(e_k)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.source_algebra().dim();
        let m = self.target_algebra.dim();
        let mut out = DMatrix::zeros(m, n);
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            out.set_column(k, &self.apply(&e));
        }
        out
    }
}

pub fn assemble_differential(f: &MapUnderTest, g: &Point, h_grid: &[f64]) -> Result<DifferentialMap> {
    let sys = PhiSystem::new(&f.source, g)?;
    let fg = image_point(f, g)?;
    let alg = Arc::new(nilpotentize(&f.target, &fg)?);
    let h1 = f.source.horizontal_dim();
    let horizontal = (0..h1)
        .map(|j| horizontal_derivative_with(f, g, &fg, &alg, j, h_grid))
        .collect::<Result<Vec<_>>>()?;
    let mut per_coordinate = horizontal.clone();
    let mut product_gaps = vec![0.0; h1];
    let mut norm_bounds_hold = true;
    for k in h1..f.source.dim() {
        let c = curve_derivative_with(f, g, &fg, &alg, &sys, &horizontal, k, h_grid)?;
        norm_bounds_hold &= c.norm_bound_holds();
        product_gaps.push(c.gap);
        per_coordinate.push(c.product);
    }
    Ok(DifferentialMap {
        g: g.clone(),
        fg,
        per_coordinate,
        product_gaps,
        norm_bounds_hold,
        source: sys,
        target_algebra: alg,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialCheck {
    /// Per epsilon: largest `d~(f(v), L(v))` over `v` in `Box(g, eps)`.
    pub residuals: RateTable,
    /// Per epsilon: largest `d~(f(v), L(v)) / d(g, v)`.
    pub ratios: RateTable,
    pub skipped: usize,
    pub total: usize,
}

impl DifferentialCheck {
    /// Residual `o(d)`: slope above one, or exact up to [`EXACT_TOL`].
    pub fn passed(&self) -> bool {
        !self.residuals.is_empty()
            && (self.residuals.max_deviation() <= EXACT_TOL || self.residuals.slope > 1.0)
    }

    pub fn skip_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,residual,ratio\n");
        for ((e, r), (_, q)) in self.residuals.rows.iter().zip(&self.ratios.rows) {
            writeln!(out, "{e:e},{r:e},{q:e}").unwrap();
        }
        writeln!(out, "# slope={}", self.residuals.slope).unwrap();
        writeln!(out, "# skipped={}/{}", self.skipped, self.total).unwrap();
        out
    }
}

/// Compares `f` with `L_g` on `n` samples of `Box(g, eps)` per `eps`.
pub fn verify_differential(
    f: &MapUnderTest,
    l: &DifferentialMap,
    eps_grid: &[f64],
    n: usize,
    seed: u64,
) -> DifferentialCheck {
    let s = &f.source;
    let a = &l.target_algebra;
    let deg = s.degrees().to_vec();
    let mut rng = sampling::rng(seed);
    let unit: Vec<Vec<f64>> = (0..n).map(|_| sampling::unit_cube(s.dim(), &mut rng)).collect();
    let mut residual_rows = Vec::new();
    let mut ratio_rows = Vec::new();
    let mut skipped = 0;
    for &eps in eps_grid {
        let results: Vec<Option<(f64, f64)>> = unit
            .par_iter()
            .map(|u| {
                let z: Vec<f64> = u.iter().zip(&deg).map(|(v, &d)| v * eps.powi(d as i32)).collect();
                let v = coords1_forward(s, &l.g, &z).ok()?;
                let fv = f.eval(&v)?;
                let w = coords1_inverse(&f.target, &l.fg, &fv).ok()?.x;
                let r = floor_distance(a, l.apply(&z).as_slice(), w.as_slice());
                let d = l.source_algebra().hom_norm(&z);
                Some((r, if d > 0.0 { r / d } else { 0.0 }))
            })
            .collect();
        skipped += results.iter().filter(|r| r.is_none()).count();
        let (r, q) = results
            .iter()
            .flatten()
            .fold((0.0_f64, 0.0_f64), |(a, b), &(r, q)| (a.max(r), b.max(q)));
        residual_rows.push((eps, r));
        ratio_rows.push((eps, q));
    }
    DifferentialCheck {
        residuals: RateTable::new(residual_rows),
        ratios: RateTable::new(ratio_rows),
        skipped,
        total: n * eps_grid.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomomorphismReport {
    /// `max d~(L(u v), L(u) L(v))`.
    pub product_defect: f64,
    /// `max d~(delta~_t L(v), L(delta_t v))`.
    pub dilation_defect: f64,
    /// Largest non-horizontal coordinate among images of horizontal generators.
    pub horizontal_defect: f64,
}

impl HomomorphismReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.product_defect <= tol && self.dilation_defect <= tol && self.horizontal_defect <= EXACT_TOL
    }
}

/// Dilation factors probed by [`verify_homomorphism`].
pub const DILATION_PROBES: [f64; 4] = [0.25, 0.5, 2.0, 3.0];

pub fn verify_homomorphism(l: &DifferentialMap, n: usize, seed: u64) -> HomomorphismReport {
    let src = l.source_algebra();
    let a = &l.target_algebra;
    let mut rng = sampling::rng(seed);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|_| (sampling::unit_cube(src.dim(), &mut rng), sampling::unit_cube(src.dim(), &mut rng)))
        .collect();
    let (product_defect, dilation_defect) = pairs
        .par_iter()
        .map(|(u, v)| {
            let uv = src.product(u, v);
            let lhs = l.apply(uv.as_slice());
            let rhs = a.product(l.apply(u).as_slice(), l.apply(v).as_slice());
            let p = floor_distance(a, lhs.as_slice(), rhs.as_slice());
            let lv = l.apply(v);
            let d = DILATION_PROBES
                .iter()
                .map(|&t| {
                    let x = a.dilate(lv.as_slice(), t);
                    let y = l.apply(src.dilate(v, t).as_slice());
                    floor_distance(a, x.as_slice(), y.as_slice())
                })
                .fold(0.0, f64::max);
            (p, d)
        })
        .reduce(|| (0.0, 0.0), |x, y| (x.0.max(y.0), x.1.max(y.1)));
    let th1 = a.horizontal_dim();
    let horizontal_defect = l
        .per_coordinate
        .iter()
        .take(src.horizontal_dim())
        .flat_map(|d| d.x.iter().skip(th1).map(|v| v.abs()))
        .fold(0.0, f64::max);
    HomomorphismReport {
        product_defect,
        dilation_defect,
        horizontal_defect,
    }
}

/// Off-degree tolerance of the graded matrix.
pub const GRADING_TOL: f64 = 1e-6;

/// `sqrt(det(M^T M))` for the graded matrix `M` of `L_g`.
pub fn sr_jacobian(l: &DifferentialMap) -> Result<f64> {
    let m = l.matrix();
    let sd = l.source_algebra().degrees();
    let td = l.target_algebra.degrees();
    for k in 0..m.ncols() {
        for i in 0..m.nrows() {
            if sd[k] != td[i] && m[(i, k)].abs() > GRADING_TOL {
                return Err(Error::GradingViolation {
                    i,
                    j: k,
                    k: td[i],
                    value: m[(i, k)],
                });
            }
        }
    }
    if m.nrows() < m.ncols() {
        return Ok(0.0);
    }
    Ok((m.transpose() * &m).determinant().max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaReport {
    /// `H(E) * mean J` over sampled points of `E`.
    pub lhs: f64,
    /// `H(f(E))`.
    pub rhs: f64,
    pub gap: f64,
    pub measure_source: f64,
    pub mean_jacobian: f64,
    pub jacobian_samples: usize,
}

impl AreaReport {
    pub fn to_csv(&self) -> String {
        format!(
            "quantity,value\nlhs,{:e}\nrhs,{:e}\ngap,{:e}\nmeasure_source,{:e}\nmean_jacobian,{:e}\n# jacobian_samples={}\n",
            self.lhs, self.rhs, self.gap, self.measure_source, self.mean_jacobian, self.jacobian_samples
        )
    }
}

/// Cell budget of each lattice in the area check.
pub const AREA_MAX_CELLS: f64 = 5e7;
/// Points of `E` at which the Jacobian is assembled.
pub const JACOBIAN_SAMPLES: usize = 32;

/// Compares `int_E J dH_rho` with `H_rho(f(E))`; `f` must carry an inverse.
pub fn area_formula_check(f: &MapUnderTest, set: &ChartSet<'_>, n: usize, seed: u64) -> Result<AreaReport> {
    if !f.has_inverse() {
        return Err(Error::InvalidArgument(format!("map {} has no inverse", f.name)));
    }
    let s = &f.source;
    let dim = s.dim();
    let mut rng = sampling::rng(seed);
    let mut points = Vec::with_capacity(n);
    let mut attempts = 0;
    while points.len() < n && attempts < 100 * n.max(1) {
        attempts += 1;
        let u = sampling::unit_cube(dim, &mut rng);
        let p: Vec<f64> = (0..dim)
            .map(|k| set.lo[k] + 0.5 * (u[k] + 1.0) * (set.hi[k] - set.lo[k]))
            .collect();
        if set.contains(&p) {
            points.push(Point::from_vec(p));
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("set has no sampled points".into()));
    }
    let images: Vec<Point> = points
        .par_iter()
        .map(|p| {
            let q = f.eval(p).ok_or_else(|| {
                Error::InvalidArgument(format!("{} is undefined or leaves the target chart at {:?}", f.name, p.as_slice()))
            })?;
            let back = f.inverse(&q).ok_or(Error::NonInjectiveDetected(p.iter().copied().collect()))?;
            if (back - p).amax() > 1e-8 * (1.0 + p.amax()) {
                return Err(Error::NonInjectiveDetected(p.iter().copied().collect()));
            }
            Ok(q)
        })
        .collect::<Result<_>>()?;
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for q in &images {
        for k in 0..dim {
            lo[k] = lo[k].min(q[k]);
            hi[k] = hi[k].max(q[k]);
        }
    }
    for k in 0..dim {
        let pad = 0.1 * (hi[k] - lo[k]) + 1e-9;
        lo[k] -= pad;
        hi[k] += pad;
    }
    let image = ChartSet::new(
        |y: &[f64]| {
            f.inverse(&Point::from_column_slice(y))
                .is_some_and(|x| set.contains(x.as_slice()))
        },
        lo,
        hi,
    );
    let h_grid = default_h_grid(DEFAULT_H0);
    let stride = (points.len() / JACOBIAN_SAMPLES).max(1);
    let jac: Vec<f64> = points
        .iter()
        .step_by(stride)
        .take(JACOBIAN_SAMPLES)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| sr_jacobian(&assemble_differential(f, p, &h_grid)?))
        .collect::<Result<_>>()?;
    let mean_jacobian = jac.iter().sum::<f64>() / jac.len() as f64;
    let mut scales = lattice_grid(s.degrees(), &set.lo, &set.hi, AREA_MAX_CELLS);
    scales.retain(|r| lattice_grid(f.target.degrees(), &image.lo, &image.hi, AREA_MAX_CELLS).contains(r));
    let measure_source = measure_estimate(s, set, &scales, MetricTag::Rho).value;
    let rhs = measure_estimate(&f.target, &image, &scales, MetricTag::Rho).value;
    let lhs = measure_source * mean_jacobian;
    Ok(AreaReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE),
        measure_source,
        mean_jacobian,
        jacobian_samples: jac.len(),
    })
}

/// Slope helper for rows `(h, r(h))`.
pub fn residual_slope(d: &DerivativeElement) -> f64 {
    loglog_slope(&d.residual.rows)
}
