//! Flows of frame combinations, coordinates of the first and second kind, and
//! the quasimetrics built on them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sampling::{self, Region};
use crate::structure::{CCStructure, Combination, Point, SolverConfig};

/// `u = exp(sum x_i X_i)(base)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coords1 {
    pub base: Point,
    pub x: DVector<f64>,
}

/// `u = exp(a_N X_N) o ... o exp(a_1 X_1)(base)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coords2 {
    pub base: Point,
    pub a: DVector<f64>,
}

fn check_len(s: &CCStructure, v: usize) -> Result<()> {
    if v != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            got: v,
        });
    }
    Ok(())
}

/// Fixed-step RK4 for `y' = F(y)` over time `t` with `steps` steps.
pub(crate) fn integrate(
    s: &CCStructure,
    field: &Combination,
    p: &Point,
    t: f64,
    steps: usize,
) -> Result<Point> {
    let n = p.len();
    let mut y = p.as_slice().to_vec();
    if t == 0.0 || field.is_zero() {
        return Ok(p.clone());
    }
    let h = t / steps as f64;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for _ in 0..steps {
        field.eval_into(&y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        field.eval_into(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        field.eval_into(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        field.eval_into(&tmp, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !s.in_chart(&y) {
            return Err(Error::ChartExit { point: y });
        }
    }
    Ok(Point::from_vec(y))
}

/// `ceil(|t| min(1, |c|) / h_max)`: the plain time-step rule for controls of
/// unit size, arclength steps of at most `h_max` for shorter ones.
pub(crate) fn step_count(cfg: &SolverConfig, t: f64, coeffs: &[f64]) -> usize {
    let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt().min(1.0);
    ((t.abs() * norm / cfg.h_max).ceil() as usize).max(1)
}

/// Time-`t` flow of `sum coeffs_i X_i` from `p`.
pub fn flow(s: &CCStructure, p: &Point, coeffs: &[f64], t: f64) -> Result<Point> {
    check_len(s, p.len())?;
    check_len(s, coeffs.len())?;
    s.check_point(p)?;
    if t == 0.0 {
        return Ok(p.clone());
    }
    let field = s.combination(coeffs);
    integrate(s, &field, p, t, step_count(s.solver(), t, coeffs))
}

/// Flow along the single field `X_i` for time `t`.
pub fn flow_single(s: &CCStructure, p: &Point, i: usize, t: f64) -> Result<Point> {
    let mut c = vec![0.0; s.dim()];
    c[i] = 1.0;
    flow(s, p, &c, t)
}

pub fn coords1_forward(s: &CCStructure, g: &Point, x: &[f64]) -> Result<Point> {
    flow(s, g, x, 1.0)
}

/// Composes single-field flows, `X_1` applied first.
pub fn coords2_forward(s: &CCStructure, g: &Point, a: &[f64]) -> Result<Point> {
    check_len(s, a.len())?;
    let mut p = g.clone();
    s.check_point(&p)?;
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            p = flow_single(s, &p, i, ai)?;
        }
    }
    Ok(p)
}

fn fd_jacobian<F>(f: &F, x: &DVector<f64>, fx: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(fx.len(), n);
    let mut xp = x.clone();
    for k in 0..n {
        let h = step * x[k].abs().max(1.0);
        xp[k] = x[k] + h;
        let col = (f(&xp)? - fx) / h;
        jac.set_column(k, &col);
        xp[k] = x[k];
    }
    Ok(jac)
}

/// Damped quasi-Newton for `f(x) = target`: finite-difference Jacobian at the
/// start, Broyden updates afterwards, refreshed when a step fails.
pub(crate) fn newton_solve<F>(
    f: F,
    x0: DVector<f64>,
    target: &DVector<f64>,
    cfg: &SolverConfig,
    jac0: Option<DMatrix<f64>>,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let polish = 1e-13 * target.amax().max(1.0);
    let mut x = x0;
    let mut fx = f(&x)?;
    let mut r = target - &fx;
    let mut rn = r.amax();
    let mut fresh = jac0.is_none();
    let mut jac = match jac0 {
        Some(j) => j,
        None => fd_jacobian(&f, &x, &fx, cfg.fd_step)?,
    };
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        if rn <= polish {
            break;
        }
        iterations += 1;
        let dx = match jac.clone().lu().solve(&r) {
            Some(dx) => dx,
            None => break,
        };
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let xn = &x + lambda * &dx;
            if let Ok(fxn) = f(&xn) {
                let rnew = target - &fxn;
                let rnn = rnew.amax();
                if rnn < rn {
                    accepted = Some((xn, fxn, rnew, rnn));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((xn, fxn, rnew, rnn)) => {
                let ratio = rnn / rn;
                // Broyden rank-one update of the Jacobian
                let dx = &xn - &x;
                let df = &fxn - &fx;
                let denom = dx.norm_squared();
                if denom > 0.0 {
                    let defect = df - &jac * &dx;
                    jac += defect * dx.transpose() / denom;
                }
                x = xn;
                fx = fxn;
                r = rnew;
                rn = rnn;
                fresh = false;
                if rn <= cfg.newton_tol && ratio > 0.5 {
                    // stagnated below tolerance
                    break;
                }
            }
            None => {
                if fresh {
                    break;
                }
                jac = fd_jacobian(&f, &x, &fx, cfg.fd_step)?;
                fresh = true;
            }
        }
    }
    if rn <= cfg.newton_tol {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations,
            residual: rn,
        })
    }
}

fn frame_guess(s: &CCStructure, g: &Point, u: &Point) -> Result<DVector<f64>> {
    let frame = s.frame_at(g)?;
    Ok(frame.lu().solve(&(u - g)).unwrap_or_else(|| DVector::zeros(g.len())))
}

pub fn coords1_inverse(s: &CCStructure, g: &Point, u: &Point) -> Result<Coords1> {
    check_len(s, u.len())?;
    s.check_point(g)?;
    s.check_point(u)?;
    if u == g {
        return Ok(Coords1 {
            base: g.clone(),
            x: DVector::zeros(s.dim()),
        });
    }
    let x0 = frame_guess(s, g, u)?;
    let x = newton_solve(
        |x| coords1_forward(s, g, x.as_slice()),
        x0,
        u,
        s.solver(),
        Some(s.frame_unchecked(u.as_slice())),
    )?;
    Ok(Coords1 { base: g.clone(), x })
}

pub fn coords2_inverse(s: &CCStructure, g: &Point, u: &Point) -> Result<Coords2> {
    check_len(s, u.len())?;
    s.check_point(g)?;
    s.check_point(u)?;
    if u == g {
        return Ok(Coords2 {
            base: g.clone(),
            a: DVector::zeros(s.dim()),
        });
    }
    let a0 = frame_guess(s, g, u)?;
    let a = newton_solve(
        |a| coords2_forward(s, g, a.as_slice()),
        a0,
        u,
        s.solver(),
        Some(s.frame_unchecked(u.as_slice())),
    )?;
    Ok(Coords2 { base: g.clone(), a })
}

/// `max_i |y_i|^{1/deg_i}`.
pub fn homogeneous_max(degrees: &[usize], y: &[f64]) -> f64 {
    y.iter()
        .zip(degrees)
        .map(|(v, &d)| root(v.abs(), d))
        .fold(0.0, f64::max)
}

pub(crate) fn root(v: f64, d: usize) -> f64 {
    match d {
        1 => v,
        2 => v.sqrt(),
        3 => v.cbrt(),
        _ => v.powf(1.0 / d as f64),
    }
}

/// `d_inf(u, g)` from the first-kind coordinates of `u` around `g`.
pub fn d_infty(s: &CCStructure, g: &Point, u: &Point) -> Result<f64> {
    let y = coords1_inverse(s, g, u)?;
    Ok(homogeneous_max(s.degrees(), y.x.as_slice()))
}

pub fn d_2(s: &CCStructure, g: &Point, u: &Point) -> Result<f64> {
    let a = coords2_inverse(s, g, u)?;
    Ok(homogeneous_max(s.degrees(), a.a.as_slice()))
}

/// Layerwise Euclidean quasimetric: `max_i |x_{layer i}|^{1/i}`.
pub fn rho_from_coords(s: &CCStructure, x: &[f64]) -> f64 {
    let mut out: f64 = 0.0;
    let mut start = 0;
    for (i, &h) in s.filtration().iter().enumerate() {
        let sq: f64 = x[start..h].iter().map(|v| v * v).sum();
        out = out.max(root(sq.sqrt(), i + 1));
        start = h;
    }
    out
}

pub fn d_rho(s: &CCStructure, g: &Point, u: &Point) -> Result<f64> {
    let y = coords1_inverse(s, g, u)?;
    Ok(rho_from_coords(s, y.x.as_slice()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsEstimate {
    pub c1_hat: f64,
    pub c2_hat: f64,
    pub q_hat: f64,
    /// max |d_inf(u, v) - d_inf(v, u)|.
    pub symmetry_defect: f64,
    pub sample_count: usize,
    pub skipped: usize,
    pub region: Region,
    /// Per accepted sample: `(d_inf(u,v), d_2(u,v), d_inf(u,w) + d_inf(w,v))`.
    pub samples: Vec<(f64, f64, f64)>,
}

/// Empirical constants of the `d_2`/`d_inf` sandwich and of the quasi-triangle inequality.
pub fn metric_equivalence_report(
    s: &CCStructure,
    region: &Region,
    n: usize,
    seed: u64,
) -> ConstantsEstimate {
    let mut rng = sampling::rng(seed);
    let triples: Vec<[Point; 3]> = (0..n)
        .map(|_| [region.sample(&mut rng), region.sample(&mut rng), region.sample(&mut rng)])
        .collect();
    let results: Vec<Option<(f64, f64, f64, f64)>> = triples
        .par_iter()
        .map(|[u, v, w]| {
            let duv = d_infty(s, u, v).ok()?;
            let dvu = d_infty(s, v, u).ok()?;
            let d2 = d_2(s, u, v).ok()?;
            let duw = d_infty(s, u, w).ok()?;
            let dwv = d_infty(s, w, v).ok()?;
            Some((duv, dvu, d2, duw + dwv))
        })
        .collect();

    let mut est = ConstantsEstimate {
        c1_hat: f64::INFINITY,
        c2_hat: 0.0,
        q_hat: 1.0,
        symmetry_defect: 0.0,
        sample_count: 0,
        skipped: 0,
        region: region.clone(),
        samples: Vec::new(),
    };
    for r in results {
        let Some((duv, dvu, d2, via)) = r else {
            est.skipped += 1;
            continue;
        };
        est.symmetry_defect = est.symmetry_defect.max((duv - dvu).abs());
        if duv > 0.0 {
            est.sample_count += 1;
            let ratio = d2 / duv;
            est.c1_hat = est.c1_hat.min(ratio);
            est.c2_hat = est.c2_hat.max(ratio);
            if via > 0.0 {
                est.q_hat = est.q_hat.max(duv / via);
            }
            est.samples.push((duv, d2, via));
        }
    }
    if est.sample_count == 0 {
        est.c1_hat = 1.0;
        est.c2_hat = 1.0;
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::space;
    use rand::Rng;

    fn pt(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    #[test]
    fn heisenberg_flow_closed_forms() {
        let s = space("heisenberg").unwrap();
        let p = flow(&s, &pt(&[0.0, 0.0, 0.0]), &[1.0, 0.0, 0.0], 1.0).unwrap();
        assert!((p - pt(&[1.0, 0.0, 0.0])).amax() < 1e-14);
        let q = flow(&s, &pt(&[1.0, 0.0, 0.0]), &[0.0, 1.0, 0.0], 1.0).unwrap();
        assert!((q - pt(&[1.0, 1.0, 0.5])).amax() < 1e-12);
        let g = pt(&[0.3, 0.2, 0.1]);
        assert_eq!(flow(&s, &g, &[1.0, 2.0, 3.0], 0.0).unwrap(), g);
    }

    #[test]
    fn chart_exit_is_reported() {
        let s = space("heisenberg_perturbed").unwrap();
        let r = flow(&s, &pt(&[0.0, 0.0, 0.0]), &[1.0, 0.0, 0.0], 5.0);
        assert!(matches!(r, Err(Error::ChartExit { .. })));
    }

    #[test]
    fn flow_group_law() {
        let s = space("heisenberg_perturbed").unwrap();
        let p = pt(&[0.1, -0.2, 0.05]);
        let c = [0.4, -0.3, 0.2];
        let a = flow(&s, &flow(&s, &p, &c, 0.35).unwrap(), &c, 0.5).unwrap();
        let b = flow(&s, &p, &c, 0.85).unwrap();
        assert!((a - b).amax() < 1e-8);
    }

    #[test]
    fn coords_of_the_second_kind_closed_form() {
        let s = space("heisenberg").unwrap();
        let u = coords2_forward(&s, &Point::zeros(3), &[1.0, 1.0, 0.0]).unwrap();
        assert!((u - pt(&[1.0, 1.0, 0.5])).amax() < 1e-12);
    }

    #[test]
    fn coordinate_round_trips() {
        let s = space("heisenberg_perturbed").unwrap();
        let mut rng = sampling::rng(7);
        let g = pt(&[0.2, -0.1, 0.3]);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let u = coords1_forward(&s, &g, &x).unwrap();
            let back = coords1_inverse(&s, &g, &u).unwrap();
            assert!((back.x - pt(&x)).amax() < 1e-9);
            let v = coords2_forward(&s, &g, &x).unwrap();
            let back = coords2_inverse(&s, &g, &v).unwrap();
            assert!((back.a - pt(&x)).amax() < 1e-9);
        }
        let h = space("heisenberg").unwrap();
        let u = pt(&[1.0, 1.0, 0.5]);
        let y = coords1_inverse(&h, &Point::zeros(3), &u).unwrap();
        let r = coords1_forward(&h, &Point::zeros(3), y.x.as_slice()).unwrap();
        assert!((r - &u).amax() < 1e-9);
        assert_eq!(
            coords1_inverse(&h, &u, &u).unwrap().x,
            DVector::zeros(3)
        );
    }

    #[test]
    fn quasimetric_values() {
        let s = space("heisenberg").unwrap();
        let o = Point::zeros(3);
        let u = pt(&[0.0, 0.0, 0.25]);
        assert!((d_infty(&s, &o, &u).unwrap() - 0.5).abs() < 1e-12);
        assert!((d_2(&s, &o, &u).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(d_infty(&s, &u, &u).unwrap(), 0.0);
        let w = pt(&[3.0, 4.0, 0.0]);
        assert!((d_rho(&s, &o, &w).unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(rho_from_coords(&s, &[3.0, 4.0, 0.0]), 5.0);
    }

    #[test]
    fn abelian_constants_are_one() {
        let s = space("abelian3").unwrap();
        let est = metric_equivalence_report(&s, &Region::unit(3), 50, 3);
        assert_eq!(est.skipped, 0);
        assert!((est.c1_hat - 1.0).abs() < 1e-8 && (est.c2_hat - 1.0).abs() < 1e-8);
        assert!((est.q_hat - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let s = space("heisenberg_perturbed").unwrap();
        let p = pt(&[0.1, 0.2, -0.1]);
        let c = [0.9, -0.7, 0.4];
        let run = |h: f64| {
            let cfg = SolverConfig {
                h_max: h,
                ..SolverConfig::default()
            };
            flow(&s.clone().with_solver(cfg), &p, &c, 1.0).unwrap()
        };
        let oracle = run(1e-3);
        let e1 = (run(0.2) - &oracle).amax();
        let e2 = (run(0.1) - &oracle).amax();
        let ratio = e1 / e2;
        assert!((10.0..22.0).contains(&ratio), "ratio {ratio}");
    }
}
