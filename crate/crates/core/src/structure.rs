//! Carnot–Carathéodory structures given by polynomial frames on a single chart.
//!
//! A structure is a frame `X_1..X_N` of polynomial vector fields together with
//! a filtration `h_1 < .. < h_M = N`; the first `h_i` fields span the `i`-th
//! layer of the filtration. Field and coordinate indices are 0-based in the API.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Polynomial;

pub type Point = DVector<f64>;

/// Residual bound for the linear solves behind the commutator table.
pub const SOLVE_TOL: f64 = 1e-10;
/// Bound on |c_ijk| for entries forbidden by the grading.
pub const GRADING_TOL: f64 = 1e-8;
/// Frames with a larger condition number are treated as degenerate.
pub const CONDITION_BOUND: f64 = 1e8;
const RANK_TOL: f64 = 1e-8;

/// Numerical settings shared by the flow integrator and the Newton solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Largest RK4 step, measured in chart units along the flow.
    pub h_max: f64,
    /// Residual bound for coordinate inversions.
    pub newton_tol: f64,
    /// Finite-difference step for Jacobians.
    pub fd_step: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            h_max: 1e-3,
            newton_tol: 1e-9,
            fd_step: 1e-6,
            max_iter: 50,
        }
    }
}

/// On-disk description of a space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpaceFile {
    #[serde(default)]
    pub name: Option<String>,
    pub dimension: usize,
    pub filtration: Vec<usize>,
    pub fields: Vec<Vec<String>>,
    pub chart_radius: f64,
}

#[derive(Debug, Clone)]
pub struct VectorField {
    components: Vec<Polynomial>,
    /// `jacobian[k][m] = d components[k] / d x_m`.
    jacobian: Vec<Vec<Polynomial>>,
}

impl VectorField {
    pub fn new(components: Vec<Polynomial>) -> Self {
        let n = components.len();
        let jacobian = components
            .iter()
            .map(|c| (0..n).map(|m| c.derivative(m)).collect())
            .collect();
        Self {
            components,
            jacobian,
        }
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn eval(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.components.len(), self.components.iter().map(|c| c.eval(p)))
    }

    pub fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let n = self.components.len();
        DMatrix::from_fn(n, n, |k, m| self.jacobian[k][m].eval(p))
    }
}

/// A fixed linear combination of frame fields, flattened for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Combination {
    /// Per component, the range of its terms in `terms`.
    spans: Vec<(usize, usize)>,
    /// `(coef, first factor, factor count)`.
    terms: Vec<(f64, usize, usize)>,
    /// `(variable, power)` with power >= 1.
    factors: Vec<(usize, u32)>,
}

impl Combination {
    fn compile(components: &[Polynomial]) -> Self {
        let mut spans = Vec::with_capacity(components.len());
        let mut terms = Vec::new();
        let mut factors = Vec::new();
        for c in components {
            let start = terms.len();
            for t in c.terms() {
                let first = factors.len();
                for (v, &e) in t.exps.iter().enumerate() {
                    if e > 0 {
                        factors.push((v, e));
                    }
                }
                terms.push((t.coef, first, factors.len() - first));
            }
            spans.push((start, terms.len()));
        }
        Self {
            spans,
            terms,
            factors,
        }
    }

    #[inline]
    pub fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        for (o, &(a, b)) in out.iter_mut().zip(&self.spans) {
            let mut sum = 0.0;
            for &(coef, first, len) in &self.terms[a..b] {
                let mut v = coef;
                for &(var, e) in &self.factors[first..first + len] {
                    let x = y[var];
                    v *= match e {
                        1 => x,
                        2 => x * x,
                        3 => x * x * x,
                        _ => x.powi(e as i32),
                    };
                }
                sum += v;
            }
            *o = sum;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

/// A tangent vector in chart components, optionally with its frame components.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub components: DVector<f64>,
    pub frame_components: Option<DVector<f64>>,
}

/// Commutator table `c[i][j][k]` at a point: `[X_i, X_j] = sum_k c_ijk X_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructConsts {
    pub base: Point,
    n: usize,
    c: Vec<f64>,
    /// Largest residual of the linear solves that produced the table.
    pub residual: f64,
}

impl StructConsts {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.c[(i * self.n + j) * self.n + k]
    }

    pub fn max_antisymmetry_defect(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    worst = worst.max((self.get(i, j, k) + self.get(j, i, k)).abs());
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankCheck {
    /// Layer `j` (1-based) whose bracket span is tested against layer `j + 1`.
    pub layer: usize,
    pub rank: usize,
    pub expected: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointValidation {
    pub point: Point,
    pub condition_number: f64,
    pub frame_ok: bool,
    /// max |c_ijk| over triples with deg X_k > deg X_i + deg X_j.
    pub grading_residual: f64,
    pub rank_checks: Vec<RankCheck>,
}

impl PointValidation {
    pub fn passed(&self) -> bool {
        self.frame_ok
            && self.grading_residual <= GRADING_TOL
            && self.rank_checks.iter().all(|r| r.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub points: Vec<PointValidation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.points.iter().all(PointValidation::passed)
    }

    pub fn max_grading_residual(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.grading_residual)
            .fold(0.0, f64::max)
    }

    pub fn max_condition_number(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.condition_number)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct CCStructure {
    name: String,
    filtration: Vec<usize>,
    degrees: Vec<usize>,
    fields: Vec<VectorField>,
    chart_radius: f64,
    solver: SolverConfig,
}

/// Degrees induced by a filtration: `deg X_k = min{m : k < h_m}` (0-based k, 1-based m).
pub fn degrees_from_filtration(filtration: &[usize]) -> Vec<usize> {
    let n = filtration.last().copied().unwrap_or(0);
    (0..n)
        .map(|k| filtration.iter().position(|&h| k < h).unwrap() + 1)
        .collect()
}

fn check_filtration(filtration: &[usize], dim: usize) -> Result<()> {
    if filtration.is_empty() {
        return Err(Error::InvalidFiltration("empty filtration".into()));
    }
    if filtration[0] == 0 || filtration.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidFiltration(format!(
            "dimensions {filtration:?} are not strictly increasing and positive"
        )));
    }
    if *filtration.last().unwrap() != dim {
        return Err(Error::InvalidFiltration(format!(
            "last dimension {} differs from N = {dim}",
            filtration.last().unwrap()
        )));
    }
    Ok(())
}

/// Parses and validates a JSON space description.
pub fn load_structure(text: &str) -> Result<CCStructure> {
    let file: SpaceFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("space file: {e}")))?;
    CCStructure::from_file(&file)
}

impl CCStructure {
    pub fn from_file(file: &SpaceFile) -> Result<Self> {
        let n = file.dimension;
        if n == 0 {
            return Err(Error::Parse("dimension must be positive".into()));
        }
        if file.fields.len() != n {
            return Err(Error::Parse(format!(
                "expected {n} fields, found {}",
                file.fields.len()
            )));
        }
        let mut fields = Vec::with_capacity(n);
        for (i, f) in file.fields.iter().enumerate() {
            if f.len() != n {
                return Err(Error::Parse(format!(
                    "field {} has {} components, expected {n}",
                    i + 1,
                    f.len()
                )));
            }
            let comps = f
                .iter()
                .map(|s| Polynomial::parse(s, n))
                .collect::<Result<Vec<_>>>()?;
            fields.push(comps);
        }
        Self::new(
            file.name.clone().unwrap_or_else(|| "unnamed".into()),
            file.filtration.clone(),
            fields,
            file.chart_radius,
        )
    }

    /// Builds and validates a structure; the frame condition is checked at the origin.
    pub fn new(
        name: impl Into<String>,
        filtration: Vec<usize>,
        fields: Vec<Vec<Polynomial>>,
        chart_radius: f64,
    ) -> Result<Self> {
        let n = fields.len();
        check_filtration(&filtration, n)?;
        if !(chart_radius.is_finite() && chart_radius > 0.0) {
            return Err(Error::Parse(format!("invalid chart radius {chart_radius}")));
        }
        for f in &fields {
            if f.len() != n || f.iter().any(|p| p.nvars() != n) {
                return Err(Error::Parse("field arity does not match dimension".into()));
            }
        }
        let s = Self {
            name: name.into(),
            degrees: degrees_from_filtration(&filtration),
            filtration,
            fields: fields.into_iter().map(VectorField::new).collect(),
            chart_radius,
            solver: SolverConfig::default(),
        };
        s.frame_at(&Point::zeros(n))?;
        Ok(s)
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = solver;
        self
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.fields.len()
    }

    pub fn depth(&self) -> usize {
        self.filtration.len()
    }

    pub fn filtration(&self) -> &[usize] {
        &self.filtration
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn degree(&self, k: usize) -> usize {
        self.degrees[k]
    }

    /// `dim H_1`.
    pub fn horizontal_dim(&self) -> usize {
        self.filtration[0]
    }

    pub fn chart_radius(&self) -> f64 {
        self.chart_radius
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn in_chart(&self, p: &[f64]) -> bool {
        p.iter().all(|x| x.is_finite() && x.abs() <= self.chart_radius)
    }

    pub(crate) fn check_point(&self, p: &Point) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: p.len(),
            });
        }
        if !self.in_chart(p.as_slice()) {
            return Err(Error::OutsideChart {
                point: p.iter().copied().collect(),
                radius: self.chart_radius,
            });
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.dim() {
            return Err(Error::IndexOutOfRange {
                index: i,
                dim: self.dim(),
            });
        }
        Ok(())
    }

    /// Frame matrix without chart or conditioning checks.
    pub fn frame_unchecked(&self, p: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |k, i| self.fields[i].components[k].eval(p))
    }

    /// Matrix whose k-th column is `X_k(p)`.
    pub fn frame_at(&self, p: &Point) -> Result<DMatrix<f64>> {
        self.check_point(p)?;
        let frame = self.frame_unchecked(p.as_slice());
        let condition = condition_number(&frame);
        if !(condition <= CONDITION_BOUND) {
            return Err(Error::DegenerateFrame {
                point: p.iter().copied().collect(),
                condition,
            });
        }
        Ok(frame)
    }

    /// The field `sum_i coeffs[i] X_i` compiled into one polynomial per component.
    pub fn combination(&self, coeffs: &[f64]) -> Combination {
        let n = self.dim();
        let mut components = vec![Polynomial::zero(n); n];
        for (c, field) in coeffs.iter().zip(&self.fields) {
            if *c == 0.0 {
                continue;
            }
            for (out, comp) in components.iter_mut().zip(&field.components) {
                out.add_scaled(comp, *c);
            }
        }
        Combination::compile(&components)
    }

    fn bracket_unchecked(&self, i: usize, j: usize, p: &[f64]) -> DVector<f64> {
        if i == j {
            return DVector::zeros(self.dim());
        }
        let xi = self.fields[i].eval(p);
        let xj = self.fields[j].eval(p);
        self.fields[j].jacobian(p) * xi - self.fields[i].jacobian(p) * xj
    }

    /// `[X_i, X_j](p) = (D X_j) X_i - (D X_i) X_j`, computed from exact derivatives.
    pub fn lie_bracket(&self, i: usize, j: usize, p: &Point) -> Result<TangentVector> {
        self.check_index(i)?;
        self.check_index(j)?;
        self.check_point(p)?;
        let components = self.bracket_unchecked(i, j, p.as_slice());
        let frame_components = self
            .frame_unchecked(p.as_slice())
            .lu()
            .solve(&components);
        Ok(TangentVector {
            components,
            frame_components,
        })
    }

    fn raw_structure_constants(&self, p: &Point) -> Result<StructConsts> {
        let n = self.dim();
        let frame = self.frame_at(p)?;
        let lu = frame.clone().lu();
        let mut c = vec![0.0; n * n * n];
        let mut residual: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let b = self.bracket_unchecked(i, j, p.as_slice());
                let x = lu.solve(&b).ok_or_else(|| Error::DegenerateFrame {
                    point: p.iter().copied().collect(),
                    condition: f64::INFINITY,
                })?;
                residual = residual.max((&frame * &x - &b).amax());
                for k in 0..n {
                    c[(i * n + j) * n + k] = x[k];
                    c[(j * n + i) * n + k] = -x[k];
                }
            }
        }
        Ok(StructConsts {
            base: p.clone(),
            n,
            c,
            residual,
        })
    }

    fn grading_residual(&self, sc: &StructConsts) -> (f64, Option<(usize, usize, usize)>) {
        let n = self.dim();
        let mut worst = 0.0;
        let mut at = None;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if self.degrees[k] > self.degrees[i] + self.degrees[j] {
                        let v = sc.get(i, j, k).abs();
                        if v > worst {
                            worst = v;
                            at = Some((i, j, k));
                        }
                    }
                }
            }
        }
        (worst, at)
    }

    /// Solves `frame(p) c_ij = [X_i, X_j](p)` for every pair and checks the grading.
    pub fn structure_constants(&self, p: &Point) -> Result<StructConsts> {
        let sc = self.raw_structure_constants(p)?;
        let (worst, at) = self.grading_residual(&sc);
        if worst > GRADING_TOL {
            let (i, j, k) = at.unwrap();
            return Err(Error::GradingViolation {
                i,
                j,
                k,
                value: worst,
            });
        }
        Ok(sc)
    }

    /// Checks the frame, grading and bracket-generation conditions at each point.
    pub fn validate_filtration(&self, sample_points: &[Point]) -> ValidationReport {
        let points = sample_points
            .iter()
            .map(|p| self.validate_point(p))
            .collect();
        ValidationReport { points }
    }

    fn validate_point(&self, p: &Point) -> PointValidation {
        let n = self.dim();
        let in_chart = self.check_point(p).is_ok();
        let frame = self.frame_unchecked(p.as_slice());
        let condition_number = condition_number(&frame);
        let frame_ok = in_chart && condition_number <= CONDITION_BOUND;
        let grading_residual = match self.raw_structure_constants(p) {
            Ok(sc) => self.grading_residual(&sc).0,
            Err(_) => f64::INFINITY,
        };

        let mut rank_checks = Vec::new();
        for j in 1..self.depth() {
            let mut vectors: Vec<DVector<f64>> =
                (0..self.filtration[j - 1]).map(|a| frame.column(a).into()).collect();
            // [H_i, H_{j+1-i}] for i = 1..floor((j+1)/2)
            for i in 1..=(j + 1) / 2 {
                let hi = self.filtration[i - 1];
                let hk = self.filtration[j - i];
                for a in 0..hi {
                    for b in 0..hk {
                        if a != b {
                            vectors.push(self.bracket_unchecked(a, b, p.as_slice()));
                        }
                    }
                }
            }
            let expected = self.filtration[j];
            let rank = rank_of(&vectors, n);
            let mut with_layer = vectors;
            with_layer.extend((0..expected).map(|a| frame.column(a).into()));
            let passed = rank == expected && rank_of(&with_layer, n) == expected;
            rank_checks.push(RankCheck {
                layer: j,
                rank,
                expected,
                passed,
            });
        }

        PointValidation {
            point: p.clone(),
            condition_number,
            frame_ok,
            grading_residual,
            rank_checks,
        }
    }
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical rank of a set of column vectors.
pub fn rank_of(vectors: &[DVector<f64>], n: usize) -> usize {
    if vectors.is_empty() {
        return 0;
    }
    let m = DMatrix::from_columns(vectors);
    let sv = if m.ncols() >= n {
        (&m * m.transpose()).map(|x| x).singular_values().map(f64::sqrt)
    } else {
        m.singular_values()
    };
    let scale = sv.max().max(1.0);
    sv.iter().filter(|&&s| s > RANK_TOL * scale).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;

    fn heis() -> CCStructure {
        builtin::space("heisenberg").unwrap()
    }

    #[test]
    fn heisenberg_degrees() {
        assert_eq!(heis().degrees(), &[1, 1, 2]);
        assert_eq!(builtin::space("engel").unwrap().degrees(), &[1, 1, 2, 3]);
    }

    #[test]
    fn decreasing_filtration_is_rejected() {
        let text = r#"{"dimension":3,"filtration":[3,2],
            "fields":[["1","0","0"],["0","1","0"],["0","0","1"]],"chart_radius":1}"#;
        assert!(matches!(
            load_structure(text),
            Err(Error::InvalidFiltration(_))
        ));
        let short = r#"{"dimension":3,"filtration":[1,2],
            "fields":[["1","0","0"],["0","1","0"],["0","0","1"]],"chart_radius":1}"#;
        assert!(matches!(
            load_structure(short),
            Err(Error::InvalidFiltration(_))
        ));
    }

    #[test]
    fn malformed_text_is_a_parse_error() {
        assert!(matches!(load_structure("{"), Err(Error::Parse(_))));
        let bad_poly = r#"{"dimension":1,"filtration":[1],"fields":[["1+*x1"]],"chart_radius":1}"#;
        assert!(matches!(load_structure(bad_poly), Err(Error::Parse(_))));
    }

    #[test]
    fn singular_frame_at_origin_is_rejected() {
        let text = r#"{"dimension":2,"filtration":[2],
            "fields":[["1","0"],["x1","0"]],"chart_radius":1}"#;
        assert!(matches!(
            load_structure(text),
            Err(Error::DegenerateFrame { .. })
        ));
    }

    #[test]
    fn heisenberg_frame_values() {
        let s = heis();
        let f0 = s.frame_at(&Point::zeros(3)).unwrap();
        assert_eq!(f0, DMatrix::identity(3, 3));
        let f = s.frame_at(&Point::from_vec(vec![1.0, 2.0, 0.0])).unwrap();
        assert_eq!(f.column(0).as_slice(), &[1.0, 0.0, -1.0]);
        assert_eq!(f.column(1).as_slice(), &[0.0, 1.0, 0.5]);
        assert_eq!(f.column(2).as_slice(), &[0.0, 0.0, 1.0]);
        let far = Point::from_vec(vec![1e3, 0.0, 0.0]);
        assert!(matches!(s.frame_at(&far), Err(Error::OutsideChart { .. })));
    }

    #[test]
    fn heisenberg_brackets() {
        let s = heis();
        let o = Point::zeros(3);
        let b = s.lie_bracket(0, 1, &o).unwrap();
        assert_eq!(b.components.as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(b.frame_components.unwrap().as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(
            s.lie_bracket(1, 0, &o).unwrap().components.as_slice(),
            &[0.0, 0.0, -1.0]
        );
        assert_eq!(
            s.lie_bracket(2, 2, &o).unwrap().components,
            DVector::zeros(3)
        );
        assert!(s.lie_bracket(3, 0, &o).is_err());
    }

    #[test]
    fn commutator_tables_of_builtins() {
        let s = heis();
        let c = s.structure_constants(&Point::zeros(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let want = match (i, j, k) {
                        (0, 1, 2) => 1.0,
                        (1, 0, 2) => -1.0,
                        _ => 0.0,
                    };
                    assert!((c.get(i, j, k) - want).abs() < 1e-12);
                }
            }
        }
        let e = builtin::space("engel").unwrap();
        let c = e.structure_constants(&Point::zeros(4)).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                for k in 0..4 {
                    let want = match (i, j, k) {
                        (0, 1, 2) | (0, 2, 3) => 1.0,
                        _ => 0.0,
                    };
                    assert!((c.get(i, j, k) - want).abs() < 1e-12, "{i}{j}{k}");
                }
            }
        }
        let a = builtin::space("abelian3").unwrap();
        let c = a.structure_constants(&Point::zeros(3)).unwrap();
        assert_eq!(c.max_antisymmetry_defect(), 0.0);
        assert!((0..27).all(|q| c.get(q / 9, (q / 3) % 3, q % 3) == 0.0));
    }

    #[test]
    fn grading_violation_is_detected() {
        // [X1, X2] = X3 but X3 is declared in the third layer.
        let text = r#"{"dimension":4,"filtration":[2,3,4],
            "fields":[["1","0","0","0"],["0","1","0","x1"],["0","0","1","0"],["0","0","0","1"]],
            "chart_radius":2}"#;
        let s = load_structure(text).unwrap();
        assert!(matches!(
            s.structure_constants(&Point::zeros(4)),
            Err(Error::GradingViolation { .. })
        ));
    }

    #[test]
    fn rank_test_rejects_non_generating_filtrations() {
        let text = r#"{"dimension":3,"filtration":[1,3],
            "fields":[["1","0","-0.5*x2"],["0","1","0.5*x1"],["0","0","1"]],"chart_radius":4}"#;
        let s = load_structure(text).unwrap();
        let report = s.validate_filtration(&[Point::zeros(3)]);
        assert!(!report.passed());
        assert!(!report.points[0].rank_checks[0].passed);

        let ab = r#"{"dimension":3,"filtration":[2,3],
            "fields":[["1","0","0"],["0","1","0"],["0","0","1"]],"chart_radius":4}"#;
        let s = load_structure(ab).unwrap();
        assert!(!s.validate_filtration(&[Point::zeros(3)]).passed());
    }

    #[test]
    fn jacobi_identity_for_polynomial_fields() {
        let s = builtin::space("heisenberg_perturbed").unwrap();
        let p = [0.3, -0.2, 0.4];
        // [X_a, [X_b, X_c]] from symbolic brackets of the bracket fields.
        let bracket_field = |a: usize, b: usize| -> Vec<Polynomial> {
            let fa = &s.fields()[a];
            let fb = &s.fields()[b];
            (0..3)
                .map(|k| {
                    let mut out = Polynomial::zero(3);
                    for m in 0..3 {
                        out.add_scaled(&fb.components()[k].derivative(m).mul(&fa.components()[m]), 1.0);
                        out.add_scaled(&fa.components()[k].derivative(m).mul(&fb.components()[m]), -1.0);
                    }
                    out
                })
                .collect()
        };
        let nested = |a: usize, b: usize, c: usize| -> DVector<f64> {
            let inner = VectorField::new(bracket_field(b, c));
            let fa = &s.fields()[a];
            inner.jacobian(&p) * fa.eval(&p) - fa.jacobian(&p) * inner.eval(&p)
        };
        let j = nested(0, 1, 2) + nested(1, 2, 0) + nested(2, 0, 1);
        assert!(j.amax() < 1e-12, "{j}");
    }
}
