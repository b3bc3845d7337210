//! Nilpotent tangent cone at a point: graded structure constants, the exact
//! BCH group law in first-kind coordinates, dilations and homogeneous norms,
//! and empirical local approximation rates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flows::{coords1_forward, coords1_inverse, d_infty, homogeneous_max};
use crate::poly::Polynomial;
use crate::report::RateTable;
use crate::sampling;
use crate::structure::{CCStructure, Point};

/// Largest depth for which the BCH coefficients are tabulated.
pub const MAX_DEPTH: usize = 4;
const JACOBI_TOL: f64 = 1e-9;

/// Graded nilpotent Lie algebra obtained by freezing the commutator table at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedAlgebra {
    base: Point,
    filtration: Vec<usize>,
    degrees: Vec<usize>,
    c: Vec<f64>,
    /// Nonzero entries `(i, j, k, c_ijk)` with `i < j`.
    nonzero: Vec<(usize, usize, usize, f64)>,
}

impl GradedAlgebra {
    /// Builds an algebra from a full table `c[(i*n + j)*n + k]`, keeping only graded entries.
    pub fn from_table(base: Point, filtration: Vec<usize>, table: &[f64]) -> Result<Self> {
        let degrees = crate::structure::degrees_from_filtration(&filtration);
        let n = degrees.len();
        if table.len() != n * n * n || base.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n * n * n,
                got: table.len(),
            });
        }
        if filtration.len() > MAX_DEPTH {
            return Err(Error::UnsupportedDepth(filtration.len()));
        }
        let mut c = vec![0.0; n * n * n];
        let mut nonzero = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                for k in 0..n {
                    if degrees[i] + degrees[j] == degrees[k] {
                        let v = table[(i * n + j) * n + k];
                        if v != 0.0 {
                            c[(i * n + j) * n + k] = v;
                            c[(j * n + i) * n + k] = -v;
                            nonzero.push((i, j, k, v));
                        }
                    }
                }
            }
        }
        let a = Self {
            base,
            filtration,
            degrees,
            c,
            nonzero,
        };
        let residual = a.jacobi_residual();
        if residual > JACOBI_TOL {
            return Err(Error::JacobiViolation(residual));
        }
        Ok(a)
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.degrees.len()
    }

    pub fn depth(&self) -> usize {
        self.filtration.len()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn filtration(&self) -> &[usize] {
        &self.filtration
    }

    pub fn horizontal_dim(&self) -> usize {
        self.filtration[0]
    }

    pub fn hausdorff_dimension(&self) -> usize {
        self.degrees.iter().sum()
    }

    pub fn c(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.dim();
        self.c[(i * n + j) * n + k]
    }

    /// Max over all index quadruples of the Jacobi sum.
    pub fn jacobi_residual(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for m in 0..n {
                        let mut s = 0.0;
                        for l in 0..n {
                            s += self.c(i, j, l) * self.c(l, k, m)
                                + self.c(j, k, l) * self.c(l, i, m)
                                + self.c(k, i, l) * self.c(l, j, m);
                        }
                        worst = worst.max(s.abs());
                    }
                }
            }
        }
        worst
    }

    /// `[x, y]` in the basis of the algebra.
    pub fn bracket(&self, x: &[f64], y: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for &(i, j, k, v) in &self.nonzero {
            out[k] += v * (x[i] * y[j] - x[j] * y[i]);
        }
        out
    }

    /// `log(exp x exp y)`, exact for depth at most four.
    pub fn product(&self, x: &[f64], y: &[f64]) -> DVector<f64> {
        let xv = DVector::from_column_slice(x);
        let yv = DVector::from_column_slice(y);
        let mut z = &xv + &yv;
        if self.nonzero.is_empty() {
            return z;
        }
        let xy = self.bracket(x, y);
        z += 0.5 * &xy;
        if self.depth() >= 3 {
            let x_xy = self.bracket(x, xy.as_slice());
            let y_xy = self.bracket(y, xy.as_slice());
            z += (&x_xy - &y_xy) / 12.0;
            if self.depth() >= 4 {
                z -= self.bracket(y, x_xy.as_slice()) / 24.0;
            }
        }
        z
    }

    pub fn inverse(&self, x: &[f64]) -> DVector<f64> {
        -DVector::from_column_slice(x)
    }

    /// `delta_t x`; negative `t` dilates the inverse by `|t|`.
    pub fn dilate(&self, x: &[f64], t: f64) -> DVector<f64> {
        let (sign, t) = if t < 0.0 { (-1.0, -t) } else { (1.0, t) };
        DVector::from_iterator(
            self.dim(),
            x.iter()
                .zip(&self.degrees)
                .map(|(v, &d)| sign * v * t.powi(d as i32)),
        )
    }

    pub fn hom_norm(&self, x: &[f64]) -> f64 {
        homogeneous_max(&self.degrees, x)
    }

    /// Left-invariant quasidistance `|a^{-1} b|`.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let ainv = self.inverse(a);
        self.hom_norm(self.product(ainv.as_slice(), b).as_slice())
    }

    /// Left-invariant fields `X^_i(z) = e_i + [z, e_i]/2 + [z, [z, e_i]]/12` in
    /// first-kind coordinates; exact up to depth four.
    pub fn left_invariant_fields(&self) -> Vec<Vec<Polynomial>> {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let mut comps: Vec<Polynomial> = (0..n)
                    .map(|k| {
                        if k == i {
                            Polynomial::constant(n, 1.0)
                        } else {
                            Polynomial::zero(n)
                        }
                    })
                    .collect();
                // [z, e_i]_m = sum_a z_a c_{a i m}
                let mut first: Vec<Polynomial> = vec![Polynomial::zero(n); n];
                for a in 0..n {
                    for m in 0..n {
                        let v = self.c(a, i, m);
                        if v != 0.0 {
                            first[m].add_scaled(&Polynomial::linear(n, a, 1.0), v);
                        }
                    }
                }
                for m in 0..n {
                    comps[m].add_scaled(&first[m], 0.5);
                }
                // [z, [z, e_i]]_k = sum_{b,m} z_b c_{b m k} [z, e_i]_m
                for b in 0..n {
                    let zb = Polynomial::linear(n, b, 1.0);
                    for m in 0..n {
                        if first[m].is_zero() {
                            continue;
                        }
                        let prod = zb.mul(&first[m]);
                        for k in 0..n {
                            let v = self.c(b, m, k);
                            if v != 0.0 {
                                comps[k].add_scaled(&prod, v / 12.0);
                            }
                        }
                    }
                }
                comps
            })
            .collect()
    }

    /// The model space: left-invariant fields on the group in first-kind coordinates.
    pub fn model_structure(&self, chart_radius: f64) -> Result<CCStructure> {
        CCStructure::new(
            "nilpotent model",
            self.filtration.clone(),
            self.left_invariant_fields(),
            chart_radius,
        )
    }

    /// Matrix whose columns are the left-invariant fields at `z`.
    pub fn model_frame(&self, z: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let b1 = self.bracket(z, &e);
            let b2 = self.bracket(z, b1.as_slice());
            let col = DVector::from_column_slice(&e) + 0.5 * b1 + b2 / 12.0;
            m.set_column(i, &col);
        }
        m
    }
}

/// Freezes the graded part of the commutator table at `g`.
pub fn nilpotentize(s: &CCStructure, g: &Point) -> Result<GradedAlgebra> {
    if s.depth() > MAX_DEPTH {
        return Err(Error::UnsupportedDepth(s.depth()));
    }
    let sc = s.structure_constants(g)?;
    let n = s.dim();
    let mut table = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                table[(i * n + j) * n + k] = sc.get(i, j, k);
            }
        }
    }
    GradedAlgebra::from_table(g.clone(), s.filtration().to_vec(), &table)
}

/// An element of the local Carnot group tied to its algebra.
#[derive(Debug, Clone)]
pub struct GroupElement<'a> {
    pub algebra: &'a GradedAlgebra,
    pub x: DVector<f64>,
}

impl<'a> GroupElement<'a> {
    pub fn new(algebra: &'a GradedAlgebra, x: &[f64]) -> Self {
        Self {
            algebra,
            x: DVector::from_column_slice(x),
        }
    }
}

pub fn bch_product<'a>(
    a: &'a GradedAlgebra,
    x: &GroupElement<'_>,
    y: &GroupElement<'_>,
) -> Result<GroupElement<'a>> {
    if x.algebra != a || y.algebra != a {
        return Err(Error::AlgebraMismatch);
    }
    Ok(GroupElement {
        algebra: a,
        x: a.product(x.x.as_slice(), y.x.as_slice()),
    })
}

pub fn dilation<'a>(a: &'a GradedAlgebra, x: &GroupElement<'_>, t: f64) -> GroupElement<'a> {
    GroupElement {
        algebra: a,
        x: a.dilate(x.x.as_slice(), t),
    }
}

pub fn hom_norm(a: &GradedAlgebra, x: &GroupElement<'_>) -> f64 {
    a.hom_norm(x.x.as_slice())
}

/// `exp(t sum c_i X^_i)(p)` realized through the first-kind chart at the algebra base.
pub fn hat_flow(
    s: &CCStructure,
    a: &GradedAlgebra,
    p: &Point,
    coeffs: &[f64],
    t: f64,
) -> Result<Point> {
    if t == 0.0 {
        return Ok(p.clone());
    }
    let g = a.base();
    let zp = coords1_inverse(s, g, p)?.x;
    let step: Vec<f64> = coeffs.iter().map(|c| c * t).collect();
    let z = a.product(zp.as_slice(), &step);
    coords1_forward(s, g, z.as_slice())
}

/// `u . v` in the local group at `g`, in chart coordinates.
pub fn local_group_product(s: &CCStructure, g: &Point, u: &Point, v: &Point) -> Result<Point> {
    let a = nilpotentize(s, g)?;
    let zu = coords1_inverse(s, g, u)?.x;
    let zv = coords1_inverse(s, g, v)?.x;
    coords1_forward(s, g, a.product(zu.as_slice(), zv.as_slice()).as_slice())
}

fn scale_coords(degrees: &[usize], z: &[f64], eps: f64) -> Vec<f64> {
    z.iter()
        .zip(degrees)
        .map(|(v, &d)| v * eps.powi(d as i32))
        .collect()
}

/// Central-difference Jacobian of the first-kind chart at `w`.
fn chart_jacobian(s: &CCStructure, g: &Point, w: &[f64]) -> Result<DMatrix<f64>> {
    let n = w.len();
    let h = s.solver().fd_step;
    let mut m = DMatrix::zeros(n, n);
    let mut wp = w.to_vec();
    for k in 0..n {
        wp[k] = w[k] + h;
        let fp = coords1_forward(s, g, &wp)?;
        wp[k] = w[k] - h;
        let fm = coords1_forward(s, g, &wp)?;
        wp[k] = w[k];
        m.set_column(k, &((fp - fm) / (2.0 * h)));
    }
    Ok(m)
}

/// Deviation of the rescaled fields `X^eps_i` from the nilpotent fields, as the
/// largest normalized coefficient `|a_ij| / eps^{max(0, deg j - deg i)}`.
/// Sample points are given in first-kind coordinates around `g`.
pub fn rescaled_field_deviation(
    s: &CCStructure,
    g: &Point,
    eps_grid: &[f64],
    sample_points: &[Vec<f64>],
) -> Result<RateTable> {
    let a = nilpotentize(s, g)?;
    let n = s.dim();
    let deg = s.degrees();
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let per_point: Vec<Result<f64>> = sample_points
            .par_iter()
            .map(|z| {
                let w = scale_coords(deg, z, eps);
                let jac = chart_jacobian(s, g, &w)?;
                let u = coords1_forward(s, g, &w)?;
                let jac_lu = jac.lu();
                let model_lu = a.model_frame(z).lu();
                let model = a.model_frame(z);
                let mut worst: f64 = 0.0;
                for i in 0..n {
                    let xi = s.fields()[i].eval(u.as_slice());
                    let dw = jac_lu.solve(&xi).ok_or(Error::DegenerateFrame {
                        point: u.iter().copied().collect(),
                        condition: f64::INFINITY,
                    })?;
                    let scale_i = eps.powi(deg[i] as i32);
                    let y = DVector::from_iterator(
                        n,
                        (0..n).map(|k| dw[k] * scale_i / eps.powi(deg[k] as i32)),
                    );
                    let diff = y - model.column(i);
                    let coeffs = model_lu.solve(&diff).unwrap();
                    for j in 0..n {
                        let norm = eps.powi(deg[j].saturating_sub(deg[i]) as i32);
                        worst = worst.max(coeffs[j].abs() / norm);
                    }
                }
                Ok(worst)
            })
            .collect();
        let mut dev: f64 = 0.0;
        for r in per_point {
            dev = dev.max(r?);
        }
        rows.push((eps, dev));
    }
    Ok(RateTable::new(rows))
}

/// Distance and path discrepancy tables for local approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsDeviation {
    /// max |d^g_inf(u, v) - d_inf(u, v)| over pairs in `Box(g, eps)`.
    pub distances: RateTable,
    /// max of `d^g_inf` and `d_inf` between endpoints of original and hatted compositions.
    pub paths: RateTable,
}

/// Segment count of the compositions compared in the path table.
pub const PATH_SEGMENTS: usize = 3;

pub fn metrics_deviation_report(
    s: &CCStructure,
    g: &Point,
    eps_grid: &[f64],
    n: usize,
    seed: u64,
) -> Result<MetricsDeviation> {
    if n == 0 {
        return Ok(MetricsDeviation {
            distances: RateTable::new(Vec::new()),
            paths: RateTable::new(Vec::new()),
        });
    }
    let a = nilpotentize(s, g)?;
    let dim = s.dim();
    let deg = s.degrees();
    let mut rng = sampling::rng(seed);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|_| (sampling::unit_cube(dim, &mut rng), sampling::unit_cube(dim, &mut rng)))
        .collect();
    let words: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| {
            (0..PATH_SEGMENTS)
                .map(|_| sampling::unit_cube(dim, &mut rng))
                .collect()
        })
        .collect();

    let mut dist_rows = Vec::new();
    let mut path_rows = Vec::new();
    for &eps in eps_grid {
        let dist: Vec<Result<f64>> = pairs
            .par_iter()
            .map(|(wu, wv)| {
                let zu = scale_coords(deg, wu, eps);
                let zv = scale_coords(deg, wv, eps);
                let u = coords1_forward(s, g, &zu)?;
                let v = coords1_forward(s, g, &zv)?;
                let model = a.distance(&zu, &zv);
                let actual = d_infty(s, &u, &v)?;
                Ok((model - actual).abs())
            })
            .collect();
        let paths: Vec<Result<f64>> = words
            .par_iter()
            .map(|word| {
                let mut p = g.clone();
                let mut z = vec![0.0; dim];
                for seg in word {
                    let c = scale_coords(deg, seg, eps);
                    p = crate::flows::flow(s, &p, &c, 1.0)?;
                    z = a.product(&z, &c).as_slice().to_vec();
                }
                let hat = coords1_forward(s, g, &z)?;
                let zp = coords1_inverse(s, g, &p)?.x;
                let dg = a.distance(&z, zp.as_slice());
                let d = d_infty(s, &hat, &p)?;
                Ok(dg.max(d))
            })
            .collect();
        dist_rows.push((eps, fold_max(dist)?));
        path_rows.push((eps, fold_max(paths)?));
    }
    Ok(MetricsDeviation {
        distances: RateTable::new(dist_rows),
        paths: RateTable::new(path_rows),
    })
}

fn fold_max(v: Vec<Result<f64>>) -> Result<f64> {
    let mut m: f64 = 0.0;
    for r in v {
        m = m.max(r?);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::space;
    use crate::flows::flow;
    use rand::Rng;

    fn heis_algebra() -> GradedAlgebra {
        nilpotentize(&space("heisenberg").unwrap(), &Point::zeros(3)).unwrap()
    }

    #[test]
    fn heisenberg_constants_at_any_point() {
        let s = space("heisenberg").unwrap();
        let a = nilpotentize(&s, &Point::from_vec(vec![0.4, -0.7, 1.1])).unwrap();
        assert!((a.c(0, 1, 2) - 1.0).abs() < 1e-12);
        assert_eq!(a.c(0, 1, 0), 0.0);
        let p = nilpotentize(&space("heisenberg_perturbed").unwrap(), &Point::zeros(3)).unwrap();
        assert!((p.c(0, 1, 2) - 1.0).abs() < 1e-12);
        let ab = nilpotentize(&space("abelian3").unwrap(), &Point::zeros(3)).unwrap();
        assert!(ab.bracket(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).amax() == 0.0);
    }

    #[test]
    fn jacobi_violation_is_reported() {
        // Three horizontal generators with [e0,e1] = e3 and [e2,e3] = e4 only:
        // the Jacobi sum of (e0, e1, e2) equals e4.
        let n = 5;
        let mut t = vec![0.0; n * n * n];
        let mut set = |i: usize, j: usize, k: usize, v: f64| {
            t[(i * n + j) * n + k] = v;
            t[(j * n + i) * n + k] = -v;
        };
        set(0, 1, 3, 1.0);
        set(2, 3, 4, 1.0);
        assert!(matches!(
            GradedAlgebra::from_table(Point::zeros(5), vec![3, 4, 5], &t),
            Err(Error::JacobiViolation(_))
        ));
        let deep = GradedAlgebra::from_table(Point::zeros(5), vec![1, 2, 3, 4, 5], &vec![0.0; 125]);
        assert!(matches!(deep, Err(Error::UnsupportedDepth(5))));
    }

    #[test]
    fn bch_examples() {
        let a = heis_algebra();
        let z = a.product(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert_eq!(z.as_slice(), &[1.0, 1.0, 0.5]);
        let x = [0.3, -0.2, 0.7];
        assert_eq!(a.product(&x, &[0.0; 3]).as_slice(), &x);
        assert!(a.product(&x, a.inverse(&x).as_slice()).amax() < 1e-15);
        let y = GroupElement::new(&a, &x);
        let other = nilpotentize(&space("abelian3").unwrap(), &Point::zeros(3)).unwrap();
        let w = GroupElement::new(&other, &x);
        assert!(matches!(bch_product(&a, &y, &w), Err(Error::AlgebraMismatch)));
    }

    #[test]
    fn dilation_and_norm_examples() {
        let a = heis_algebra();
        assert_eq!(a.dilate(&[1.0, 1.0, 1.0], 2.0).as_slice(), &[2.0, 2.0, 4.0]);
        assert_eq!(a.dilate(&[1.0, 2.0, 3.0], -1.0).as_slice(), &[-1.0, -2.0, -3.0]);
        assert_eq!(a.hom_norm(&[0.0, 0.0, 4.0]), 2.0);
        assert_eq!(a.hom_norm(&[0.0; 3]), 0.0);
    }

    #[test]
    fn flows_compose_left_argument_first() {
        let s = space("heisenberg").unwrap();
        let a = heis_algebra();
        let x = [0.3, -0.5, 0.2];
        let y = [-0.4, 0.1, 0.6];
        let p = flow(&s, &flow(&s, &Point::zeros(3), &x, 1.0).unwrap(), &y, 1.0).unwrap();
        let z = a.product(&x, &y);
        assert!((p - z).amax() < 1e-12);
    }

    #[test]
    fn engel_bch_is_associative() {
        let a = nilpotentize(&space("engel").unwrap(), &Point::zeros(4)).unwrap();
        let mut rng = sampling::rng(5);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let l = a.product(a.product(&x, &y).as_slice(), &z);
            let r = a.product(&x, a.product(&y, &z).as_slice());
            assert!((l - r).amax() < 1e-9);
        }
    }

    #[test]
    fn model_fields_reproduce_the_group_law() {
        let s = space("engel").unwrap();
        let a = nilpotentize(&s, &Point::zeros(4)).unwrap();
        let model = a.model_structure(50.0).unwrap();
        let x = [0.5, -0.3, 0.2, 0.1];
        let y = [-0.2, 0.4, -0.1, 0.3];
        let p = flow(&model, &Point::from_column_slice(&x), &y, 1.0).unwrap();
        assert!((p - a.product(&x, &y)).amax() < 1e-10);
        let c = model.structure_constants(&Point::from_column_slice(&x)).unwrap();
        assert!((c.get(0, 1, 2) - 1.0).abs() < 1e-10 && (c.get(0, 2, 3) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn hat_flow_matches_flow_from_the_base() {
        let s = space("heisenberg_perturbed").unwrap();
        let g = Point::from_vec(vec![0.1, 0.2, -0.1]);
        let a = nilpotentize(&s, &g).unwrap();
        let c = [0.3, -0.2, 0.1];
        let h = hat_flow(&s, &a, &g, &c, 0.7).unwrap();
        let f = flow(&s, &g, &c, 0.7).unwrap();
        assert!((h - f).amax() < 1e-8);
        let hs = space("heisenberg").unwrap();
        let ha = nilpotentize(&hs, &Point::zeros(3)).unwrap();
        let p = Point::from_vec(vec![0.3, 0.1, 0.2]);
        let h = hat_flow(&hs, &ha, &p, &c, 0.5).unwrap();
        let f = flow(&hs, &p, &c, 0.5).unwrap();
        assert!((h - f).amax() < 1e-8);
    }

    #[test]
    fn local_product_identity_and_inverse() {
        let s = space("heisenberg_perturbed").unwrap();
        let g = Point::from_vec(vec![0.1, 0.0, 0.05]);
        let u = Point::from_vec(vec![0.2, -0.1, 0.1]);
        let w = local_group_product(&s, &g, &u, &g).unwrap();
        assert!((w - &u).amax() < 1e-8);
        let a = nilpotentize(&s, &g).unwrap();
        let zu = coords1_inverse(&s, &g, &u).unwrap().x;
        let uinv = coords1_forward(&s, &g, a.inverse(zu.as_slice()).as_slice()).unwrap();
        let e = local_group_product(&s, &g, &u, &uinv).unwrap();
        assert!((e - g).amax() < 1e-8);
    }

    #[test]
    fn heisenberg_rescaling_is_exact() {
        let s = space("heisenberg").unwrap();
        let pts = vec![vec![0.5, -0.5, 0.3], vec![-1.0, 0.2, 0.9]];
        let t = rescaled_field_deviation(&s, &Point::zeros(3), &[1.0, 0.1, 0.025], &pts).unwrap();
        assert!(t.max_deviation() < 1e-6, "{t:?}");
        let m = metrics_deviation_report(&s, &Point::zeros(3), &[0.2, 0.1], 0, 1).unwrap();
        assert!(m.distances.is_empty());
    }
}
