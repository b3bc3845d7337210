//! Horizontal paths: Folland–Stein words for non-horizontal exponentials, the
//! special coordinate system built from them, constructive connectivity and
//! numerical bounds for the Carnot–Carathéodory distance.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cone::{nilpotentize, GradedAlgebra};
use crate::error::{Error, Result};
use crate::flows::{
    coords1_forward, coords1_inverse, d_infty, integrate, newton_solve, root, step_count,
};
use crate::sampling::{self, Region};
use crate::structure::{CCStructure, Point};

/// Largest depth supported by the word construction.
pub const PLAN_MAX_DEPTH: usize = 3;
const PLAN_TOL: f64 = 1e-12;
/// Replay tolerance for paths returned by [`chow_solve`].
pub const REPLAY_TOL: f64 = 1e-7;

/// A word of horizontal exponentials equal to `exp(X^_k)` in the local group.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionPlan {
    pub k: usize,
    /// `(horizontal field, coefficient)` applied left to right.
    pub segments: Vec<(usize, f64)>,
    /// Largest |coefficient|.
    pub bound: f64,
}

impl DecompositionPlan {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Group element reached by the word.
    pub fn replay(&self, a: &GradedAlgebra) -> DVector<f64> {
        replay_word(a, &self.segments)
    }
}

/// Product `exp(c_1 e_{j_1}) ... exp(c_L e_{j_L})` in the local group.
pub fn replay_word(a: &GradedAlgebra, segments: &[(usize, f64)]) -> DVector<f64> {
    let n = a.dim();
    let mut z = DVector::zeros(n);
    let mut e = vec![0.0; n];
    for &(j, c) in segments {
        e[j] = c;
        z = a.product(z.as_slice(), &e);
        e[j] = 0.0;
    }
    z
}

fn merge_adjacent(segments: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(segments.len());
    for (j, c) in segments {
        if c == 0.0 {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.0 == j => {
                last.1 += c;
                if last.1 == 0.0 {
                    out.pop();
                }
            }
            _ => out.push((j, c)),
        }
    }
    out
}

fn commutator_word(a: usize, b: usize, s: f64) -> Vec<(usize, f64)> {
    vec![(a, s), (b, s), (a, -s), (b, -s)]
}

fn inverse_word(w: &[(usize, f64)]) -> Vec<(usize, f64)> {
    w.iter().rev().map(|&(j, c)| (j, -c)).collect()
}

/// Gauss–Newton on the last parameters of the word so that it replays to `target`.
fn correct_word(
    a: &GradedAlgebra,
    mut segments: Vec<(usize, f64)>,
    target: &DVector<f64>,
) -> Result<Vec<(usize, f64)>> {
    let free = (2 * a.horizontal_dim()).min(segments.len());
    let first = segments.len() - free;
    let mut r = target - replay_word(a, &segments);
    let mut iterations = 0;
    while r.amax() > PLAN_TOL {
        if iterations == 50 {
            return Err(Error::NoConvergence {
                iterations,
                residual: r.amax(),
            });
        }
        iterations += 1;
        let h = 1e-7;
        let mut jac = DMatrix::zeros(a.dim(), free);
        for q in 0..free {
            let mut plus = segments.clone();
            let mut minus = segments.clone();
            plus[first + q].1 += h;
            minus[first + q].1 -= h;
            let col = (replay_word(a, &plus) - replay_word(a, &minus)) / (2.0 * h);
            jac.set_column(q, &col);
        }
        let step = jac
            .svd(true, true)
            .solve(&r, 1e-12)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for q in 0..free {
            segments[first + q].1 += step[q];
        }
        r = target - replay_word(a, &segments);
    }
    Ok(segments)
}

/// Builds a horizontal word equal to `exp(X^_k)` for a non-horizontal field `k`.
pub fn fs_decompose(a: &GradedAlgebra, k: usize) -> Result<DecompositionPlan> {
    let n = a.dim();
    if k >= n {
        return Err(Error::IndexOutOfRange { index: k, dim: n });
    }
    let deg = a.degrees()[k];
    if deg < 2 {
        return Err(Error::InvalidArgument(format!(
            "field {k} is horizontal and needs no decomposition"
        )));
    }
    let mut higher: Vec<Option<DecompositionPlan>> = vec![None; n];
    for m in (0..n).rev() {
        if a.degrees()[m] > deg {
            higher[m] = Some(decompose_with(a, m, &higher)?);
        }
    }
    decompose_with(a, k, &higher)
}

/// Word of a plan dilated by `t`, reversed for negative `t`.
fn scaled_word(plan: &DecompositionPlan, t: f64) -> Vec<(usize, f64)> {
    let mut w: Vec<(usize, f64)> = plan.segments.iter().map(|&(j, c)| (j, c * t)).collect();
    if t < 0.0 {
        w.reverse();
    }
    w
}

fn decompose_with(
    a: &GradedAlgebra,
    k: usize,
    higher: &[Option<DecompositionPlan>],
) -> Result<DecompositionPlan> {
    let n = a.dim();
    if k >= n {
        return Err(Error::IndexOutOfRange { index: k, dim: n });
    }
    let deg = a.degrees()[k];
    if deg < 2 {
        return Err(Error::InvalidArgument(format!(
            "field {k} is horizontal and needs no decomposition"
        )));
    }
    if a.depth() > PLAN_MAX_DEPTH {
        return Err(Error::UnsupportedDepth(a.depth()));
    }
    let h1 = a.horizontal_dim();
    let mut target = DVector::zeros(n);
    target[k] = 1.0;

    let word = if deg == 2 {
        let mut best = (0, 0, 0.0_f64);
        for p in 0..h1 {
            for q in (p + 1)..h1 {
                let v = a.c(p, q, k);
                if v.abs() > best.2.abs() {
                    best = (p, q, v);
                }
            }
        }
        let (p, q, v) = best;
        if v == 0.0 {
            return Err(Error::NotGenerated(k));
        }
        let (p, q) = if v > 0.0 { (p, q) } else { (q, p) };
        commutator_word(p, q, v.abs().recip().sqrt())
    } else {
        // [e_b, [e_p, e_q]] with the largest e_k component
        let mut best = (0, 0, 0, 0.0_f64);
        for b in 0..h1 {
            for p in 0..h1 {
                for q in (p + 1)..h1 {
                    let mut pq = vec![0.0; n];
                    pq[p] = 1.0;
                    let mut eq = vec![0.0; n];
                    eq[q] = 1.0;
                    let inner = a.bracket(&pq, &eq);
                    let mut eb = vec![0.0; n];
                    eb[b] = 1.0;
                    let v = a.bracket(&eb, inner.as_slice())[k];
                    if v.abs() > best.3.abs() {
                        best = (b, p, q, v);
                    }
                }
            }
        }
        let (b, p, q, v) = best;
        if v == 0.0 {
            return Err(Error::NotGenerated(k));
        }
        let scale = v.abs().recip().cbrt();
        let inner = commutator_word(p, q, scale);
        let s = scale * v.signum();
        let mut w = vec![(b, s)];
        w.extend_from_slice(&inner);
        w.push((b, -s));
        w.extend(inverse_word(&inner));
        w
    };
    // cancel the remainder of higher degree with the words of those fields
    let mut word = merge_adjacent(word);
    for d in (deg + 1)..=a.depth() {
        let z = replay_word(a, &word);
        let rest = a.product(a.inverse(z.as_slice()).as_slice(), target.as_slice());
        for m in 0..n {
            if a.degrees()[m] == d && rest[m].abs() > PLAN_TOL {
                let plan = higher[m].as_ref().ok_or(Error::NotGenerated(m))?;
                let t = rest[m].signum() * root(rest[m].abs(), d);
                word.extend(scaled_word(plan, t));
            }
        }
        word = merge_adjacent(word);
    }
    let segments = correct_word(a, word, &target)?;
    let bound = segments.iter().map(|s| s.1.abs()).fold(0.0, f64::max);
    Ok(DecompositionPlan { k, segments, bound })
}

/// The special coordinate system at a point: one word per non-horizontal field.
#[derive(Debug, Clone)]
pub struct PhiSystem {
    pub algebra: GradedAlgebra,
    plans: Vec<Option<DecompositionPlan>>,
}

impl PhiSystem {
    pub fn new(s: &CCStructure, g: &Point) -> Result<Self> {
        Self::from_algebra(nilpotentize(s, g)?)
    }

    pub fn from_algebra(algebra: GradedAlgebra) -> Result<Self> {
        let h1 = algebra.horizontal_dim();
        let plans = (0..algebra.dim())
            .map(|k| {
                if k < h1 {
                    Ok(None)
                } else {
                    fs_decompose(&algebra, k).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { algebra, plans })
    }

    pub fn plan(&self, k: usize) -> Option<&DecompositionPlan> {
        self.plans[k].as_ref()
    }

    /// Largest word length over the non-horizontal fields.
    pub fn max_plan_len(&self) -> usize {
        self.plans.iter().flatten().map(|p| p.len()).max().unwrap_or(1)
    }

    /// Segments of `Phi_k(t)`: the plan scaled by `t`, in reverse order for `t < 0`.
    pub fn curve_word(&self, k: usize, t: f64) -> Vec<(usize, f64)> {
        match &self.plans[k] {
            None => vec![(k, t)],
            Some(plan) => scaled_word(plan, t),
        }
    }

    /// Segments of the whole system, field 1 first.
    pub fn system_word(&self, t: &[f64]) -> Vec<(usize, f64)> {
        let mut w = Vec::new();
        for (k, &tk) in t.iter().enumerate() {
            if tk != 0.0 {
                w.extend(self.curve_word(k, tk));
            }
        }
        w
    }

    /// Exact image of `t` under the nilpotent system.
    pub fn phi_hat(&self, t: &[f64]) -> DVector<f64> {
        replay_word(&self.algebra, &self.system_word(t))
    }

    fn s_to_t(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.algebra.degrees())
            .map(|(v, &d)| v.signum() * root(v.abs(), d))
            .collect()
    }

    fn t_to_s(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .zip(self.algebra.degrees())
            .map(|(v, &d)| v.signum() * v.abs().powi(d as i32))
            .collect()
    }

    /// Solves `Phi^(t) = z` exactly, layer by layer.
    pub fn phi_hat_inverse(&self, z: &[f64]) -> DVector<f64> {
        let a = &self.algebra;
        let n = a.dim();
        let deg = a.degrees();
        let mut s = vec![0.0; n];
        for layer in 1..=a.depth() {
            // with this layer zeroed, its coordinates of the product depend only on lower layers
            let current = replay_word(a, &self.single_generators(&s));
            for k in 0..n {
                if deg[k] == layer {
                    s[k] = z[k] - current[k];
                }
            }
        }
        DVector::from_vec(self.s_to_t(&s))
    }

    fn single_generators(&self, s: &[f64]) -> Vec<(usize, f64)> {
        s.iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, &v)| (k, v))
            .collect()
    }
}

/// Applies single-field flows in order.
pub fn replay_segments(s: &CCStructure, start: &Point, segments: &[(usize, f64)]) -> Result<Point> {
    let n = s.dim();
    let mut p = start.clone();
    s.check_point(&p)?;
    let mut c = vec![0.0; n];
    for &(j, t) in segments {
        if t == 0.0 {
            continue;
        }
        c[j] = 1.0;
        let field = s.combination(&c);
        c[j] = 0.0;
        let steps = step_count(s.solver(), t, &[1.0]);
        p = integrate(s, &field, &p, t, steps)?;
    }
    Ok(p)
}

pub fn phi_curve(s: &CCStructure, g: &Point, k: usize, t: f64) -> Result<Point> {
    if k >= s.dim() {
        return Err(Error::IndexOutOfRange {
            index: k,
            dim: s.dim(),
        });
    }
    let sys = PhiSystem::new(s, g)?;
    replay_segments(s, g, &sys.curve_word(k, t))
}

pub fn phi_system(s: &CCStructure, g: &Point, t: &[f64]) -> Result<Point> {
    let sys = PhiSystem::new(s, g)?;
    replay_segments(s, g, &sys.system_word(t))
}

/// A horizontal path of single-field segments.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalPath {
    pub start: Point,
    pub segments: Vec<(usize, f64)>,
    pub endpoint: Point,
}

impl HorizontalPath {
    pub fn new(s: &CCStructure, start: &Point, segments: Vec<(usize, f64)>) -> Result<Self> {
        let h1 = s.horizontal_dim();
        if let Some(&(j, _)) = segments.iter().find(|(j, _)| *j >= h1) {
            return Err(Error::InvalidArgument(format!("field {j} is not horizontal")));
        }
        let endpoint = replay_segments(s, start, &segments)?;
        Ok(Self {
            start: start.clone(),
            segments,
            endpoint,
        })
    }

    pub fn replay(&self, s: &CCStructure) -> Result<Point> {
        replay_segments(s, &self.start, &self.segments)
    }

    /// Length with the horizontal frame orthonormal.
    pub fn length(&self) -> f64 {
        self.segments.iter().map(|s| s.1.abs()).sum()
    }

    pub fn max_coefficient(&self) -> f64 {
        self.segments.iter().map(|s| s.1.abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment_index,field_index,parameter\n");
        for (i, (j, c)) in self.segments.iter().enumerate() {
            writeln!(out, "{i},{},{c:e}", j + 1).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChowSolution {
    pub t: DVector<f64>,
    pub path: HorizontalPath,
    /// `d_inf(g, v)`.
    pub d_infty: f64,
    /// `max |a_i| / d_inf(g, v)`.
    pub coefficient_ratio: f64,
    /// `|replay - v|_inf`.
    pub residual: f64,
}

/// Finds `t` with `Phi_g(t) = v` and the corresponding horizontal path.
pub fn chow_solve(s: &CCStructure, g: &Point, v: &Point) -> Result<ChowSolution> {
    let sys = PhiSystem::new(s, g)?;
    chow_solve_with(s, &sys, g, v)
}

pub fn chow_solve_with(
    s: &CCStructure,
    sys: &PhiSystem,
    g: &Point,
    v: &Point,
) -> Result<ChowSolution> {
    let n = s.dim();
    if v == g {
        return Ok(ChowSolution {
            t: DVector::zeros(n),
            path: HorizontalPath {
                start: g.clone(),
                segments: Vec::new(),
                endpoint: g.clone(),
            },
            d_infty: 0.0,
            coefficient_ratio: 0.0,
            residual: 0.0,
        });
    }
    let z = coords1_inverse(s, g, v)?.x;
    let dinf = sys.algebra.hom_norm(z.as_slice());
    let t_hat = sys.phi_hat_inverse(z.as_slice());
    let s_hat = sys.t_to_s(t_hat.as_slice());

    let solve = |target: &Point, s0: Vec<f64>| -> Result<DVector<f64>> {
        newton_solve(
            |sv| replay_segments(s, g, &sys.system_word(&sys.s_to_t(sv.as_slice()))),
            DVector::from_vec(s0),
            target,
            s.solver(),
            None,
        )
    };

    let s_sol = match solve(v, s_hat.clone()) {
        Ok(x) => x,
        Err(_) => {
            // continuation along dilated targets
            let mut prev = 0.0;
            let mut cur = DVector::zeros(n);
            for lambda in [0.25, 0.5, 0.75, 1.0] {
                let zl = sys.algebra.dilate(z.as_slice(), lambda);
                let target = coords1_forward(s, g, zl.as_slice())?;
                let guess = if prev == 0.0 {
                    sys.algebra.dilate(&s_hat, lambda)
                } else {
                    sys.algebra.dilate(cur.as_slice(), lambda / prev)
                };
                cur = solve(&target, guess.as_slice().to_vec())?;
                prev = lambda;
            }
            cur
        }
    };
    let t = DVector::from_vec(sys.s_to_t(s_sol.as_slice()));
    let segments = merge_adjacent(sys.system_word(t.as_slice()));
    let path = HorizontalPath::new(s, g, segments)?;
    let residual = (&path.endpoint - v).amax();
    if residual > REPLAY_TOL {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual,
        });
    }
    let coefficient_ratio = if dinf > 0.0 {
        path.max_coefficient() / dinf
    } else {
        0.0
    };
    Ok(ChowSolution {
        t,
        path,
        d_infty: dinf,
        coefficient_ratio,
        residual,
    })
}

/// Options of the discretized length minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcOptions {
    /// Number of piecewise-constant control pieces on `[0, 1]`.
    pub pieces: usize,
    /// Iteration budget.
    pub budget: usize,
    /// Empirical Ball-Box constant for the lower bound, if known.
    pub c1_hat: Option<f64>,
}

impl Default for CcOptions {
    fn default() -> Self {
        Self {
            pieces: 64,
            budget: 400,
            c1_hat: None,
        }
    }
}

/// Horizontal path with piecewise-constant controls on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub start: Point,
    /// One control vector of horizontal coefficients per piece.
    pub controls: Vec<Vec<f64>>,
    pub endpoint: Point,
}

impl ControlPath {
    pub fn length(&self) -> f64 {
        let m = self.controls.len().max(1) as f64;
        self.controls
            .iter()
            .map(|u| u.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceBound {
    pub lower: f64,
    pub upper: f64,
    pub path: ControlPath,
    /// False when the budget ran out before the stopping rule fired.
    pub converged: bool,
    pub iterations: usize,
}

struct ControlProblem<'a> {
    s: &'a CCStructure,
    start: Point,
    pieces: usize,
    h1: usize,
    steps: usize,
}

impl ControlProblem<'_> {
    fn piece(&self, y: &Point, u: &[f64]) -> Result<Point> {
        let mut c = vec![0.0; self.s.dim()];
        c[..self.h1].copy_from_slice(u);
        let field = self.s.combination(&c);
        integrate(self.s, &field, y, 1.0 / self.pieces as f64, self.steps)
    }

    fn states(&self, u: &[f64]) -> Result<Vec<Point>> {
        let mut out = Vec::with_capacity(self.pieces + 1);
        out.push(self.start.clone());
        for p in 0..self.pieces {
            let next = self.piece(&out[p], &u[p * self.h1..(p + 1) * self.h1])?;
            out.push(next);
        }
        Ok(out)
    }

    fn jacobian(&self, u: &[f64], states: &[Point]) -> Result<DMatrix<f64>> {
        let n = self.s.dim();
        let end = &states[self.pieces];
        let cols: Vec<Result<DVector<f64>>> = (0..u.len())
            .into_par_iter()
            .map(|q| {
                let p = q / self.h1;
                let h = 1e-7;
                let mut up = u[p * self.h1..(p + 1) * self.h1].to_vec();
                up[q % self.h1] += h;
                let mut y = self.piece(&states[p], &up)?;
                for r in (p + 1)..self.pieces {
                    y = self.piece(&y, &u[r * self.h1..(r + 1) * self.h1])?;
                }
                Ok((y - end) / h)
            })
            .collect();
        let mut jac = DMatrix::zeros(n, u.len());
        for (q, c) in cols.into_iter().enumerate() {
            jac.set_column(q, &c?);
        }
        Ok(jac)
    }

    fn length(&self, u: &[f64]) -> f64 {
        u.chunks(self.h1)
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / self.pieces as f64
    }

    fn energy(&self, u: &[f64]) -> f64 {
        u.iter().map(|x| x * x).sum::<f64>() / self.pieces as f64
    }

    /// Controls realizing a single-field path at constant speed.
    fn from_segments(&self, segments: &[(usize, f64)]) -> Vec<f64> {
        let m = self.pieces;
        let total: f64 = segments.iter().map(|s| s.1.abs()).sum();
        let mut u = vec![0.0; m * self.h1];
        if total == 0.0 {
            return u;
        }
        // piece p covers arclength [p, p+1) * total / m
        let mut boundaries = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in segments {
            acc += s.1.abs();
            boundaries.push(acc);
        }
        for p in 0..m {
            let a = p as f64 * total / m as f64;
            let b = (p + 1) as f64 * total / m as f64;
            let mut lo = 0.0;
            for (i, &(j, c)) in segments.iter().enumerate() {
                let hi = boundaries[i];
                let overlap = (b.min(hi) - a.max(lo)).max(0.0);
                // averaged velocity over the piece
                u[p * self.h1 + j] += c.signum() * overlap * m as f64;
                lo = hi;
            }
        }
        u
    }
}

/// Upper and lower bounds for `d_cc(g, v)` by discretized length minimization,
/// started from the connecting path of [`chow_solve`].
pub fn cc_distance(s: &CCStructure, g: &Point, v: &Point, opts: CcOptions) -> Result<DistanceBound> {
    let h1 = s.horizontal_dim();
    if v == g {
        return Ok(DistanceBound {
            lower: 0.0,
            upper: 0.0,
            path: ControlPath {
                start: g.clone(),
                controls: vec![vec![0.0; h1]; opts.pieces],
                endpoint: g.clone(),
            },
            converged: true,
            iterations: 0,
        });
    }
    let chow = chow_solve(s, g, v)?;
    let prob = ControlProblem {
        s,
        start: g.clone(),
        pieces: opts.pieces,
        h1,
        steps: ((1.0 / opts.pieces as f64 / s.solver().h_max).ceil() as usize).max(1),
    };
    let gap_tol = 1e-6;
    let mut u = prob.from_segments(&chow.path.segments);
    let mut states = prob.states(&u)?;
    let mut gap = (&states[opts.pieces] - v).amax();

    // Feasible fallback: the connecting path itself.
    let mut best_len = chow.path.length();
    let mut best_u = u.clone();
    let mut best_end = chow.path.endpoint.clone();
    if gap < gap_tol && prob.length(&u) < best_len {
        best_len = prob.length(&u);
        best_end = states[opts.pieces].clone();
    }

    let mu = 100.0;
    let merit = |u: &[f64], gap: f64| prob.energy(u) + mu * gap;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_len = prob.length(&u);
    while iterations < opts.budget {
        iterations += 1;
        let jac = prob.jacobian(&u, &states)?;
        let uv = DVector::from_column_slice(&u);
        let b = &jac * &uv + (v - &states[opts.pieces]);
        let w = match jac.clone().svd(true, true).solve(&b, 1e-10) {
            Ok(w) => w,
            Err(_) => break,
        };
        let dir = w - &uv;
        let current = merit(&u, gap);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let cand: Vec<f64> = u.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Ok(st) = prob.states(&cand) {
                let cgap = (&st[opts.pieces] - v).amax();
                if merit(&cand, cgap) < current || cgap < gap_tol && gap >= gap_tol {
                    u = cand;
                    states = st;
                    gap = cgap;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // restoration: smallest control change that removes the linearized gap
            let r = v - &states[opts.pieces];
            if let Ok(delta) = jac.clone().svd(true, true).solve(&r, 1e-10) {
                let mut alpha = 1.0;
                for _ in 0..20 {
                    let cand: Vec<f64> = u.iter().zip(delta.iter()).map(|(a, d)| a + alpha * d).collect();
                    if let Ok(st) = prob.states(&cand) {
                        let cgap = (&st[opts.pieces] - v).amax();
                        if cgap < gap {
                            u = cand;
                            states = st;
                            gap = cgap;
                            accepted = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
            }
        }
        let len = prob.length(&u);
        if gap < gap_tol && len < best_len {
            best_len = len;
            best_u = u.clone();
            best_end = states[opts.pieces].clone();
        }
        if !accepted || (gap < gap_tol && (len - last_len).abs() < 1e-6) {
            converged = accepted || gap < gap_tol;
            break;
        }
        last_len = len;
    }
    let controls = best_u.chunks(h1).map(|c| c.to_vec()).collect();
    let lower = match opts.c1_hat {
        Some(c1) => (c1 * chow.d_infty).min(best_len).max(0.0),
        None => 0.0,
    };
    Ok(DistanceBound {
        lower,
        upper: best_len,
        path: ControlPath {
            start: g.clone(),
            controls,
            endpoint: best_end,
        },
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallBoxReport {
    pub c1_hat: f64,
    pub c2_hat: f64,
    /// Per accepted sample: `(d_inf, d_cc upper bound)`.
    pub samples: Vec<(f64, f64)>,
    pub skipped: usize,
}

impl BallBoxReport {
    /// Whether `C1 d_inf <= d_cc <= C2 d_inf` holds for every sample.
    pub fn sandwich_holds(&self) -> bool {
        self.samples
            .iter()
            .all(|&(d, c)| self.c1_hat * d <= c * (1.0 + 1e-12) && c <= self.c2_hat * d * (1.0 + 1e-12))
    }
}

/// Empirical Ball-Box constants from `n` pairs with `x` in `region` and
/// `v` in `Box(x, r)`, `r` cycling through `r_grid`.
pub fn ball_box_report(
    s: &CCStructure,
    region: &Region,
    r_grid: &[f64],
    n: usize,
    seed: u64,
    opts: CcOptions,
) -> BallBoxReport {
    let mut report = BallBoxReport {
        c1_hat: f64::NAN,
        c2_hat: f64::NAN,
        samples: Vec::new(),
        skipped: 0,
    };
    if n == 0 || r_grid.is_empty() {
        return report;
    }
    let mut rng = sampling::rng(seed);
    let dim = s.dim();
    let draws: Vec<(Point, Vec<f64>, f64)> = (0..n)
        .map(|i| {
            let x = region.sample(&mut rng);
            let w = sampling::unit_cube(dim, &mut rng);
            (x, w, r_grid[i % r_grid.len()])
        })
        .collect();
    let results: Vec<Option<(f64, f64)>> = draws
        .par_iter()
        .map(|(x, w, r)| {
            let z: Vec<f64> = w
                .iter()
                .zip(s.degrees())
                .map(|(v, &d)| v * r.powi(d as i32))
                .collect();
            let v = coords1_forward(s, x, &z).ok()?;
            let d = d_infty(s, x, &v).ok()?;
            let bound = cc_distance(s, x, &v, opts).ok()?;
            (d > 0.0).then_some((d, bound.upper))
        })
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for r in results {
        match r {
            Some((d, c)) => {
                lo = lo.min(c / d);
                hi = hi.max(c / d);
                report.samples.push((d, c));
            }
            None => report.skipped += 1,
        }
    }
    if !report.samples.is_empty() {
        report.c1_hat = lo;
        report.c2_hat = hi;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::space;

    fn algebra(name: &str) -> GradedAlgebra {
        let s = space(name).unwrap();
        nilpotentize(&s, &Point::zeros(s.dim())).unwrap()
    }

    #[test]
    fn heisenberg_plan_is_the_commutator_word() {
        let a = algebra("heisenberg");
        let plan = fs_decompose(&a, 2).unwrap();
        assert_eq!(plan.segments, vec![(0, 1.0), (1, 1.0), (0, -1.0), (1, -1.0)]);
        assert!((plan.replay(&a) - DVector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-12);
        assert!(matches!(fs_decompose(&a, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn engel_plans_replay_exactly() {
        let a = algebra("engel");
        for k in [2, 3] {
            let plan = fs_decompose(&a, k).unwrap();
            let mut e = DVector::zeros(4);
            e[k] = 1.0;
            assert!((plan.replay(&a) - e).amax() < 1e-8);
            assert!(k == 2 || plan.len() <= 10);
            assert!(plan.segments.iter().all(|&(j, _)| j < 2));
        }
    }

    #[test]
    fn abelian_fields_are_not_generated() {
        let a = GradedAlgebra::from_table(Point::zeros(3), vec![2, 3], &[0.0; 27]).unwrap();
        assert!(matches!(fs_decompose(&a, 2), Err(Error::NotGenerated(2))));
    }

    #[test]
    fn phi_curves_on_heisenberg() {
        let s = space("heisenberg").unwrap();
        let o = Point::zeros(3);
        for t in [0.3, -0.2] {
            let p = phi_curve(&s, &o, 2, t).unwrap();
            let want = DVector::from_vec(vec![0.0, 0.0, t.signum() * t * t]);
            assert!((p - want).amax() < 1e-12);
        }
        assert_eq!(phi_curve(&s, &o, 2, 0.0).unwrap(), o);
        let a = phi_curve(&s, &o, 0, 0.4).unwrap();
        assert!((a - DVector::from_vec(vec![0.4, 0.0, 0.0])).amax() < 1e-14);
    }

    #[test]
    fn phi_hat_inverse_is_exact() {
        for name in ["heisenberg", "engel"] {
            let a = algebra(name);
            let sys = PhiSystem::from_algebra(a.clone()).unwrap();
            let mut rng = sampling::rng(11);
            for _ in 0..20 {
                let z = sampling::unit_cube(a.dim(), &mut rng);
                let t = sys.phi_hat_inverse(&z);
                let back = sys.phi_hat(t.as_slice());
                assert!((back - DVector::from_vec(z)).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn chow_solve_small_vertical_target() {
        let s = space("heisenberg").unwrap();
        let sol = chow_solve(&s, &Point::zeros(3), &Point::from_vec(vec![0.0, 0.0, 0.01])).unwrap();
        assert!((sol.t[2] - 0.1).abs() < 1e-9);
        assert_eq!(sol.path.segments.len(), 4);
        for seg in &sol.path.segments {
            assert!((seg.1.abs() - 0.1).abs() < 1e-9);
        }
        let same = chow_solve(&s, &Point::zeros(3), &Point::zeros(3)).unwrap();
        assert!(same.path.segments.is_empty());
    }

    #[test]
    fn chow_solve_on_the_perturbed_space() {
        let s = space("heisenberg_perturbed").unwrap();
        let g = Point::from_vec(vec![0.2, -0.1, 0.1]);
        let sys = PhiSystem::new(&s, &g).unwrap();
        let v = coords1_forward(&s, &g, &[0.03, -0.02, 0.002]).unwrap();
        let sol = chow_solve_with(&s, &sys, &g, &v).unwrap();
        let replay = sol.path.replay(&s).unwrap();
        assert!((replay - v).amax() <= REPLAY_TOL);
    }

    #[test]
    fn path_csv_rows() {
        let s = space("heisenberg").unwrap();
        let p = HorizontalPath::new(&s, &Point::zeros(3), vec![(0, 0.5), (1, -0.25)]).unwrap();
        assert_eq!(p.to_csv(), "segment_index,field_index,parameter\n0,1,5e-1\n1,2,-2.5e-1\n");
        assert!(HorizontalPath::new(&s, &Point::zeros(3), vec![(2, 1.0)]).is_err());
    }

    #[test]
    fn straight_segment_distance() {
        let s = space("heisenberg").unwrap();
        let b = cc_distance(&s, &Point::zeros(3), &Point::from_vec(vec![1.0, 0.0, 0.0]), CcOptions::default()).unwrap();
        assert!((b.upper - 1.0).abs() < 1e-6);
        assert!(b.lower <= b.upper);
    }
}
