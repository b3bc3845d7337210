//! Batch experiment runner: configuration, dispatch, CSV output and the
//! pass/fail summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::ValueEnum;
use serde::Deserialize;

use crate::builtin;
use crate::cone::{metrics_deviation_report, rescaled_field_deviation};
use crate::diff::{
    area_formula_check, assemble_differential, default_h_grid, sr_jacobian, test_map, verify_differential,
    verify_homomorphism, DEFAULT_H0, PRODUCT_TOL,
};
use crate::error::Error;
use crate::flows::{coords1_forward, metric_equivalence_report};
use crate::horizontal::{ball_box_report, chow_solve_with, CcOptions, PhiSystem, REPLAY_TOL};
use crate::measure::{doubling_report, hausdorff_dimension, lattice_grid, measure_estimate, ChartSet, MetricTag};
use crate::report::RateTable;
use crate::sampling::{self, Region};
use crate::structure::{load_structure, CCStructure, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Validate,
    Metrics,
    #[value(name = "nilpotent_rates")]
    NilpotentRates,
    Chow,
    Ballbox,
    Measure,
    Differential,
    Area,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Validate => "validate",
            Experiment::Metrics => "metrics",
            Experiment::NilpotentRates => "nilpotent_rates",
            Experiment::Chow => "chow",
            Experiment::Ballbox => "ballbox",
            Experiment::Measure => "measure",
            Experiment::Differential => "differential",
            Experiment::Area => "area",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Built-in name or path to a space file.
    pub space: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub samples: Option<usize>,
    pub eps_grid: Option<Vec<f64>>,
    pub map: Option<String>,
    /// Base point; the origin when absent.
    pub point: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn new(space: impl Into<String>, experiment: Experiment, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            space: space.into(),
            experiment,
            seed,
            output_dir: output_dir.into(),
            samples: None,
            eps_grid: None,
            map: None,
            point: None,
        }
    }

    /// Applies the fields present in a JSON config file.
    pub fn overlay_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let file: ConfigFile =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("bad config {}: {e}", path.display())))?;
        if let Some(v) = file.space {
            self.space = v;
        }
        if let Some(v) = file.experiment {
            self.experiment = v;
        }
        if let Some(v) = file.seed {
            self.seed = v;
        }
        if let Some(v) = file.output_dir {
            self.output_dir = v;
        }
        if file.samples.is_some() {
            self.samples = file.samples;
        }
        if file.eps_grid.is_some() {
            self.eps_grid = file.eps_grid;
        }
        if file.map.is_some() {
            self.map = file.map;
        }
        if file.point.is_some() {
            self.point = file.point;
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    space: Option<String>,
    experiment: Option<Experiment>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    samples: Option<usize>,
    eps_grid: Option<Vec<f64>>,
    map: Option<String>,
    point: Option<Vec<f64>>,
}

/// A configuration problem; maps to exit code 2.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invariant {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub invariants: Vec<Invariant>,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|i| i.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>, ConfigError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| ConfigError(format!("bad grid entry {v:?}")))
        })
        .collect()
}

/// Resolves a built-in name or a space file.
pub fn resolve_space(name: &str) -> Result<CCStructure, ConfigError> {
    match builtin::space(name) {
        Ok(s) => Ok(s),
        Err(builtin_err) => {
            let path = Path::new(name);
            if path.is_file() {
                let text = fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
                Ok(load_structure(&text)?)
            } else {
                Err(ConfigError(format!("{builtin_err}; no such file {name:?}")))
            }
        }
    }
}

pub fn list_builtin() -> Vec<&'static str> {
    builtin::NAMES.to_vec()
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    space: Arc<CCStructure>,
    point: Point,
    invariants: Vec<Invariant>,
    files: Vec<PathBuf>,
}

impl Run<'_> {
    fn check(&mut self, name: &str, value: f64, threshold: &str, passed: bool) {
        self.invariants.push(Invariant {
            name: name.into(),
            value,
            threshold: threshold.into(),
            passed,
        });
    }

    fn fail(&mut self, name: &str, err: &Error) {
        self.check(&format!("{name}: {err}"), f64::NAN, "no error", false);
    }

    fn write(&mut self, file: &str, body: &str) -> Result<(), ConfigError> {
        let path = self.cfg.output_dir.join(file);
        let mut text = format!(
            "# space={} experiment={} seed={}\n",
            self.space.name(),
            self.cfg.experiment.name(),
            self.cfg.seed
        );
        text.push_str(body);
        fs::write(&path, text).map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(path);
        Ok(())
    }

    fn samples(&self, default: usize) -> usize {
        self.cfg.samples.unwrap_or(default)
    }

    fn eps_grid(&self, default: &[f64]) -> Vec<f64> {
        self.cfg.eps_grid.clone().unwrap_or_else(|| default.to_vec())
    }

    fn rate_check(&mut self, name: &str, table: &RateTable, exact: f64) {
        let ok = table.max_deviation() <= exact || table.slope > 1.0;
        self.check(&format!("{name} slope"), table.slope, &format!("> 1 or max <= {exact:e}"), ok);
    }
}

/// Runs one experiment, writing its tables and `summary.csv` into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, ConfigError> {
    let space = Arc::new(resolve_space(&cfg.space)?);
    let n = space.dim();
    if let Some(grid) = &cfg.eps_grid {
        if grid.is_empty() || grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(ConfigError("grids must be non-empty and positive".into()));
        }
    }
    let point = match &cfg.point {
        Some(p) if p.len() != n => {
            return Err(ConfigError(format!("point has {} coordinates, space has {n}", p.len())))
        }
        Some(p) => Point::from_column_slice(p),
        None => Point::zeros(n),
    };
    if !space.in_chart(point.as_slice()) {
        return Err(ConfigError("point lies outside the chart".into()));
    }
    if let Some(m) = &cfg.map {
        test_map(m, space.clone())?;
    }
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| ConfigError(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    let mut r = Run {
        cfg,
        space,
        point,
        invariants: Vec::new(),
        files: Vec::new(),
    };
    match cfg.experiment {
        Experiment::Validate => validate(&mut r)?,
        Experiment::Metrics => metrics(&mut r)?,
        Experiment::NilpotentRates => nilpotent_rates(&mut r)?,
        Experiment::Chow => chow(&mut r)?,
        Experiment::Ballbox => ballbox(&mut r)?,
        Experiment::Measure => measure(&mut r)?,
        Experiment::Differential => differential(&mut r)?,
        Experiment::Area => area(&mut r)?,
    }
    let mut summary = String::from("invariant,value,threshold,passed\n");
    for i in &r.invariants {
        writeln!(summary, "{},{:e},{},{}", i.name.replace(',', ";"), i.value, i.threshold, i.passed).unwrap();
    }
    r.write("summary.csv", &summary)?;
    Ok(RunOutcome {
        invariants: r.invariants,
        files: r.files,
    })
}

fn validate(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let mut rng = sampling::rng(r.cfg.seed);
    let region = Region::unit(s.dim());
    let points: Vec<Point> = (0..r.samples(100)).map(|_| region.sample(&mut rng)).collect();
    let report = s.validate_filtration(&points);
    let mut body = String::from("point_index,condition_number,grading_residual,frame_ok,rank_ok\n");
    for (i, p) in report.points.iter().enumerate() {
        let rank_ok = p.rank_checks.iter().all(|c| c.passed);
        writeln!(body, "{i},{:e},{:e},{},{rank_ok}", p.condition_number, p.grading_residual, p.frame_ok).unwrap();
    }
    r.write("validation.csv", &body)?;
    let g = report.max_grading_residual();
    r.check("grading residual", g, "<= 1e-10", g <= 1e-10);
    r.check("frame and rank tests", report.points.len() as f64, "all pass", report.passed());
    Ok(())
}

fn metrics(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let est = metric_equivalence_report(&s, &Region::unit(s.dim()), r.samples(1000), r.cfg.seed);
    let mut body = format!(
        "# c1_hat={} c2_hat={} q_hat={} skipped={}\nd_infty,d_2,d_infty_via\n",
        est.c1_hat, est.c2_hat, est.q_hat, est.skipped
    );
    for (a, b, c) in &est.samples {
        writeln!(body, "{a:e},{b:e},{c:e}").unwrap();
    }
    r.write("metrics.csv", &body)?;
    r.check("symmetry defect", est.symmetry_defect, "<= 1e-8", est.symmetry_defect <= 1e-8);
    r.check("q_hat", est.q_hat, "< 10", est.q_hat < 10.0);
    r.check("c1_hat", est.c1_hat, "> 0", est.c1_hat > 0.0);
    r.check("c2_hat", est.c2_hat, "finite", est.c2_hat.is_finite());
    Ok(())
}

const RATE_GRID: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

fn nilpotent_rates(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let eps = r.eps_grid(&RATE_GRID);
    let n = r.samples(20);
    let mut rng = sampling::rng(r.cfg.seed);
    let pts: Vec<Vec<f64>> = (0..n).map(|_| sampling::unit_cube(s.dim(), &mut rng)).collect();
    match rescaled_field_deviation(&s, &r.point, &eps, &pts) {
        Ok(t) => {
            r.write("fields.csv", &t.to_csv())?;
            r.rate_check("field deviation", &t, 1e-6);
        }
        Err(e) => r.fail("field deviation", &e),
    }
    match metrics_deviation_report(&s, &r.point, &eps, n, r.cfg.seed) {
        Ok(m) => {
            r.write("distances.csv", &m.distances.to_csv())?;
            r.write("paths.csv", &m.paths.to_csv())?;
            r.rate_check("distance deviation", &m.distances, 1e-6);
            r.rate_check("path deviation", &m.paths, 1e-6);
        }
        Err(e) => r.fail("metrics deviation", &e),
    }
    Ok(())
}

fn chow(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let sys = match PhiSystem::new(&s, &r.point) {
        Ok(sys) => sys,
        Err(e) => {
            r.fail("special coordinates", &e);
            return Ok(());
        }
    };
    let radius = r.eps_grid(&[0.05])[0];
    let mut rng = sampling::rng(r.cfg.seed);
    let n = r.samples(200);
    let mut body = String::from("index,d_infty,coefficient_ratio,residual\n");
    let (mut failures, mut worst_residual, mut c2) = (0usize, 0.0_f64, 0.0_f64);
    for i in 0..n {
        let u = sampling::unit_cube(s.dim(), &mut rng);
        let z: Vec<f64> = u.iter().zip(s.degrees()).map(|(v, &d)| v * radius.powi(d as i32)).collect();
        let sol = coords1_forward(&s, &r.point, &z).and_then(|v| chow_solve_with(&s, &sys, &r.point, &v));
        match sol {
            Ok(sol) => {
                worst_residual = worst_residual.max(sol.residual);
                c2 = c2.max(sol.coefficient_ratio);
                writeln!(body, "{i},{:e},{:e},{:e}", sol.d_infty, sol.coefficient_ratio, sol.residual).unwrap();
            }
            Err(_) => failures += 1,
        }
    }
    r.write("chow.csv", &format!("# c2_hat={c2}\n{body}"))?;
    r.check("failed solves", failures as f64, "== 0", failures == 0);
    r.check("replay residual", worst_residual, "<= 1e-7", worst_residual <= REPLAY_TOL);
    r.check("c2_hat", c2, "finite", c2.is_finite());
    Ok(())
}

fn ballbox(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let grid = r.eps_grid(&[0.05, 0.1, 0.2]);
    let report = ball_box_report(
        &s,
        &Region::centered(s.dim(), 0.5),
        &grid,
        r.samples(50),
        r.cfg.seed,
        CcOptions::default(),
    );
    let mut body = format!(
        "# c1_hat={} c2_hat={} skipped={}\nd_infty,d_cc_upper\n",
        report.c1_hat, report.c2_hat, report.skipped
    );
    for (d, c) in &report.samples {
        writeln!(body, "{d:e},{c:e}").unwrap();
    }
    r.write("ballbox.csv", &body)?;
    r.check("sandwich", report.samples.len() as f64, "all samples", report.sandwich_holds());
    let ok = report.c1_hat > 0.0 && report.c1_hat <= report.c2_hat && report.c2_hat < 20.0;
    r.check("c1_hat", report.c1_hat, "> 0", report.c1_hat > 0.0);
    r.check("c2_hat", report.c2_hat, ">= c1_hat and < 20", ok);
    Ok(())
}

/// Cell budget of the dilated-box lattice.
const MAX_CELLS: f64 = 3e8;

fn measure_grid(degrees: &[usize]) -> Vec<f64> {
    let n = degrees.len();
    let mut grid = lattice_grid(degrees, &vec![-2.0; n], &vec![2.0; n], MAX_CELLS);
    if grid.len() < 2 {
        grid.push(0.25);
    }
    grid
}

fn measure(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let nu = hausdorff_dimension(&s);
    let grid = r.eps_grid(&measure_grid(s.degrees()));
    let c: Vec<f64> = r.point.iter().copied().collect();
    let e = ChartSet::homogeneous_cube(s.degrees(), &c, 1.0);
    let d = ChartSet::homogeneous_cube(s.degrees(), &c, 2.0);
    let me = measure_estimate(&s, &e, &grid, MetricTag::Infty);
    let md = measure_estimate(&s, &d, &grid, MetricTag::Infty);
    r.write("measure.csv", &me.to_csv())?;
    r.write("measure_dilated.csv", &md.to_csv())?;
    let expected = 2f64.powi(nu as i32);
    let ratio = md.value / me.value;
    r.check("dilation ratio / 2^nu", ratio / expected, "within 10%", (ratio / expected - 1.0).abs() <= 0.1);
    match doubling_report(&s, &Region::centered(s.dim(), 0.5), &[0.1, 0.2], r.samples(16), r.cfg.seed) {
        Ok(rep) => {
            let mut body = format!("# c_hat={}\nr,ratio\n", rep.c_hat);
            for (_, radius, q) in &rep.ratios {
                writeln!(body, "{radius:e},{q:e}").unwrap();
            }
            r.write("doubling.csv", &body)?;
            let rel = rep.c_hat / expected;
            r.check("doubling c_hat / 2^nu", rel, "within 15%", (rel - 1.0).abs() <= 0.15);
        }
        Err(e) => r.fail("doubling", &e),
    }
    Ok(())
}

fn differential(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let name = r.cfg.map.clone().unwrap_or_else(|| "dilation:2".into());
    let f = test_map(&name, s.clone())?;
    let h = default_h_grid(DEFAULT_H0);
    let l = match assemble_differential(&f, &r.point, &h) {
        Ok(l) => l,
        Err(e) => {
            r.fail("assemble differential", &e);
            return Ok(());
        }
    };
    let mut body = String::from("k");
    for i in 0..l.target_algebra.dim() {
        write!(body, ",x{}", i + 1).unwrap();
    }
    body.push_str(",residual_slope,product_gap\n");
    for (k, d) in l.per_coordinate.iter().enumerate() {
        write!(body, "{}", k + 1).unwrap();
        for v in d.x.iter() {
            write!(body, ",{v:e}").unwrap();
        }
        writeln!(body, ",{},{:e}", d.residual.slope, l.product_gaps[k]).unwrap();
    }
    r.write("derivatives.csv", &body)?;
    let check = verify_differential(&f, &l, &r.eps_grid(&RATE_GRID), r.samples(100), r.cfg.seed);
    r.write("differential.csv", &check.to_csv())?;
    let hom = verify_homomorphism(&l, r.samples(100), r.cfg.seed);
    let jac = sr_jacobian(&l);
    let mut body = format!(
        "quantity,value\nproduct_defect,{:e}\ndilation_defect,{:e}\nhorizontal_defect,{:e}\n",
        hom.product_defect, hom.dilation_defect, hom.horizontal_defect
    );
    if let Ok(j) = &jac {
        writeln!(body, "sr_jacobian,{j:e}").unwrap();
    }
    r.write("homomorphism.csv", &body)?;
    r.check(
        "differential residual",
        check.residuals.max_deviation(),
        "slope > 1 or <= 1e-7",
        check.passed(),
    );
    r.check("homomorphism defect", hom.product_defect, "<= 1e-6", hom.product_defect <= 1e-6);
    r.check("dilation defect", hom.dilation_defect, "<= 1e-6", hom.dilation_defect <= 1e-6);
    r.check("horizontality", hom.horizontal_defect, "<= 1e-7", hom.horizontal_defect <= 1e-7);
    let gap = l.product_gaps.iter().copied().fold(0.0, f64::max);
    r.check("product formula gap", gap, "<= 1e-6", gap <= PRODUCT_TOL);
    r.check("curve norm bound", 0.0, "holds", l.norm_bounds_hold);
    match jac {
        Ok(j) => r.check("sr_jacobian", j, "finite", j.is_finite()),
        Err(e) => r.fail("sr_jacobian", &e),
    }
    Ok(())
}

fn area(r: &mut Run) -> Result<(), ConfigError> {
    let s = r.space.clone();
    let name = r.cfg.map.clone().unwrap_or_else(|| "dilation:2".into());
    let f = test_map(&name, s.clone())?;
    let c: Vec<f64> = r.point.iter().copied().collect();
    let e = ChartSet::homogeneous_cube(s.degrees(), &c, 1.0);
    match area_formula_check(&f, &e, r.samples(100_000), r.cfg.seed) {
        Ok(rep) => {
            r.write("area.csv", &rep.to_csv())?;
            r.check("area gap", rep.gap, "< 0.05", rep.gap < 0.05);
        }
        Err(e) => r.fail("area check", &e),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_space_resolution() {
        assert_eq!(parse_grid("0.2, 0.1").unwrap(), vec![0.2, 0.1]);
        assert!(parse_grid("0.2,x").is_err());
        assert!(resolve_space("heisenberg").is_ok());
        assert!(resolve_space("/nonexistent/space.json").is_err());
        assert_eq!(list_builtin().len(), 4);
        assert_eq!(measure_grid(&[1, 1, 2]), vec![0.5, 0.25, 0.125]);
        assert_eq!(measure_grid(&[1, 1, 2, 3]), vec![0.5, 0.25]);
    }

    #[test]
    fn config_file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"space": "engel", "experiment": "nilpotent_rates", "eps_grid": [0.1, 0.05]}"#).unwrap();
        let mut cfg = ExperimentConfig::new("heisenberg", Experiment::Validate, 3, dir.path());
        cfg.overlay_file(&path).unwrap();
        assert_eq!(cfg.space, "engel");
        assert_eq!(cfg.experiment, Experiment::NilpotentRates);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.eps_grid, Some(vec![0.1, 0.05]));
        fs::write(&path, r#"{"spaces": "engel"}"#).unwrap();
        assert!(cfg.overlay_file(&path).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new("heisenberg", Experiment::Validate, 1, dir.path());
        cfg.eps_grid = Some(vec![0.1, -0.1]);
        assert!(run(&cfg).is_err());
        cfg.eps_grid = None;
        cfg.point = Some(vec![0.0; 2]);
        assert!(run(&cfg).is_err());
        cfg.point = None;
        cfg.map = Some("warp".into());
        assert!(run(&cfg).is_err());
    }
}
