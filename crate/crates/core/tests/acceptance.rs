//! Acceptance run: one PASS/FAIL line per criterion.

use std::f64::consts::PI;
use std::fs;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cc_calc::builtin::space;
use cc_calc::cli::{run, Experiment, ExperimentConfig};
use cc_calc::cone::{metrics_deviation_report, rescaled_field_deviation};
use cc_calc::diff::{
    area_formula_check, assemble_differential, default_h_grid, sr_jacobian, test_map, verify_differential,
    verify_homomorphism, DEFAULT_H0,
};
use cc_calc::flows::{coords1_forward, metric_equivalence_report};
use cc_calc::horizontal::{ball_box_report, cc_distance, chow_solve_with, CcOptions, PhiSystem};
use cc_calc::measure::{doubling_report, hausdorff_dimension, measure_estimate, ChartSet, MetricTag};
use cc_calc::sampling::{self, Region};
use cc_calc::{CCStructure, Point};

const SPACES: [&str; 4] = ["heisenberg", "engel", "abelian3", "heisenberg_perturbed"];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within_time(o: Outcome, elapsed: Duration, limit: f64) -> Outcome {
    let secs = elapsed.as_secs_f64();
    outcome(
        o.passed && secs < limit,
        format!("{}; {secs:.1}s of {limit}s", o.detail),
    )
}

fn structure_validation() -> Outcome {
    let start = Instant::now();
    let mut rng = sampling::rng(11);
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for name in ["heisenberg", "engel"] {
        let s = space(name).unwrap();
        let region = Region::unit(s.dim());
        let pts: Vec<Point> = (0..100).map(|_| region.sample(&mut rng)).collect();
        let rep = s.validate_filtration(&pts);
        worst = worst.max(rep.max_grading_residual());
        ok &= rep.passed() && rep.max_grading_residual() <= 1e-10 && rep.points.len() == 100;
    }
    within_time(
        outcome(ok, format!("max grading residual {worst:.1e}")),
        start.elapsed(),
        5.0,
    )
}

fn commutator_oracle() -> Outcome {
    let s = space("heisenberg").unwrap();
    let c = s.structure_constants(&Point::zeros(3)).unwrap();
    let deg = s.degrees();
    let mut forbidden: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                if deg[k] > deg[i] + deg[j] {
                    forbidden = forbidden.max(c.get(i, j, k).abs());
                }
            }
        }
    }
    let c123 = c.get(0, 1, 2);
    outcome(
        (c123 - 1.0).abs() <= 1e-10 && forbidden <= 1e-10,
        format!("c_123 = {c123}, forbidden max {forbidden:.1e}"),
    )
}

fn hausdorff_dimensions() -> Outcome {
    let mut ok = hausdorff_dimension(&space("heisenberg").unwrap()) == 4
        && hausdorff_dimension(&space("engel").unwrap()) == 7;
    for n in 1..=16 {
        ok &= hausdorff_dimension(&space(&format!("abelian{n}")).unwrap()) == n;
    }
    outcome(ok, "heisenberg 4, engel 7, abelian N = N for N <= 16".into())
}

struct MetricRun {
    name: &'static str,
    symmetry: f64,
    q_hat: f64,
    c1: f64,
    c2: f64,
    all_sandwiched: bool,
    samples: usize,
}

fn metric_runs() -> Vec<MetricRun> {
    SPACES
        .iter()
        .map(|&name| {
            let s = space(name).unwrap();
            let est = metric_equivalence_report(&s, &Region::unit(s.dim()), 10_000, 21);
            let all_sandwiched = est
                .samples
                .iter()
                .all(|&(d, d2, _)| est.c1_hat * d <= d2 * (1.0 + 1e-12) && d2 <= est.c2_hat * d * (1.0 + 1e-12));
            MetricRun {
                name,
                symmetry: est.symmetry_defect,
                q_hat: est.q_hat,
                c1: est.c1_hat,
                c2: est.c2_hat,
                all_sandwiched,
                samples: est.samples.len(),
            }
        })
        .collect()
}

fn quasimetric_axioms(runs: &[MetricRun]) -> Outcome {
    let ok = runs.iter().all(|r| r.symmetry <= 1e-8 && r.q_hat < 10.0 && r.samples == 10_000);
    let detail = runs
        .iter()
        .map(|r| format!("{} sym {:.1e} Q {:.3}", r.name, r.symmetry, r.q_hat))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, detail)
}

fn metric_equivalence(runs: &[MetricRun]) -> Outcome {
    let ok = runs
        .iter()
        .all(|r| r.c1 > 0.0 && r.c1 <= r.c2 && r.c2.is_finite() && r.all_sandwiched && r.samples == 10_000);
    let detail = runs
        .iter()
        .map(|r| format!("{} [{:.3}, {:.3}]", r.name, r.c1, r.c2))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, detail)
}

fn nilpotentization_rates() -> Outcome {
    let start = Instant::now();
    let eps = [0.2, 0.1, 0.05, 0.025];
    let mut rng = sampling::rng(31);
    let pts: Vec<Vec<f64>> = (0..50).map(|_| sampling::unit_cube(3, &mut rng)).collect();
    let o = Point::zeros(3);
    let p = space("heisenberg_perturbed").unwrap();
    let fields = rescaled_field_deviation(&p, &o, &eps, &pts).unwrap();
    let m = metrics_deviation_report(&p, &o, &eps, 200, 32).unwrap();
    let slopes = [fields.slope, m.distances.slope, m.paths.slope];
    let h = space("heisenberg").unwrap();
    let hf = rescaled_field_deviation(&h, &o, &eps, &pts).unwrap();
    let hm = metrics_deviation_report(&h, &o, &eps, 200, 32).unwrap();
    let hmax = hf
        .max_deviation()
        .max(hm.distances.max_deviation())
        .max(hm.paths.max_deviation());
    let ok = slopes.iter().all(|&s| s > 1.0) && hmax <= 1e-6;
    within_time(
        outcome(
            ok,
            format!(
                "perturbed slopes fields {:.2} distances {:.2} paths {:.2}; heisenberg max {hmax:.1e}",
                slopes[0], slopes[1], slopes[2]
            ),
        ),
        start.elapsed(),
        60.0,
    )
}

fn chow_connectivity() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for name in SPACES {
        let s = space(name).unwrap();
        let n = s.dim();
        let region = Region::centered(n, 0.5);
        let mut rng = sampling::rng(41);
        let (mut solved, mut worst_residual, mut c2) = (0, 0.0_f64, 0.0_f64);
        let mut ratios = Vec::new();
        for _ in 0..200 {
            let g = region.sample(&mut rng);
            let u = sampling::unit_cube(n, &mut rng);
            let z: Vec<f64> = u.iter().zip(s.degrees()).map(|(v, &d)| v * 0.05_f64.powi(d as i32)).collect();
            let res = PhiSystem::new(&s, &g).and_then(|sys| {
                let v = coords1_forward(&s, &g, &z)?;
                chow_solve_with(&s, &sys, &g, &v)
            });
            if let Ok(sol) = res {
                solved += 1;
                worst_residual = worst_residual.max(sol.residual);
                c2 = c2.max(sol.coefficient_ratio);
                ratios.push((sol.path.max_coefficient(), sol.d_infty));
            }
        }
        let bounded = ratios.iter().all(|&(a, d)| a <= c2 * d * (1.0 + 1e-12));
        ok &= solved == 200 && worst_residual <= 1e-7 && c2.is_finite() && bounded;
        details.push(format!("{name} {solved}/200 res {worst_residual:.1e} c2 {c2:.2}"));
    }
    outcome(ok, details.join(", "))
}

/// Independent oracle: circle controls of length `L` enclose area `L^2 / (4 pi)`,
/// integrated here with a separate midpoint rule on the Heisenberg fields.
fn circle_oracle() -> f64 {
    let len = 2.0 * PI.sqrt();
    let steps = 200_000;
    let dt = 1.0 / steps as f64;
    let (mut x1, mut x2, mut x3) = (0.0_f64, 0.0_f64, 0.0_f64);
    for k in 0..steps {
        let t = (k as f64 + 0.5) * dt;
        let (u1, u2) = (len * (2.0 * PI * t).cos(), len * (2.0 * PI * t).sin());
        let (m1, m2) = (x1 + 0.5 * dt * u1, x2 + 0.5 * dt * u2);
        x3 += dt * 0.5 * (m1 * u2 - m2 * u1);
        x1 += dt * u1;
        x2 += dt * u2;
    }
    assert!(x1.abs() < 1e-9 && x2.abs() < 1e-9 && (x3 - 1.0).abs() < 1e-6);
    len
}

fn cc_distance_oracles() -> Outcome {
    let s = space("heisenberg").unwrap();
    let o = Point::zeros(3);
    let oracle = circle_oracle();
    let t0 = Instant::now();
    let a = cc_distance(&s, &o, &Point::from_vec(vec![1.0, 0.0, 0.0]), CcOptions::default()).unwrap();
    let ta = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let b = cc_distance(&s, &o, &Point::from_vec(vec![0.0, 0.0, 1.0]), CcOptions::default()).unwrap();
    let tb = t1.elapsed().as_secs_f64();
    let ok = (a.upper - 1.0).abs() <= 0.01 && (b.upper - oracle).abs() <= 0.02 * oracle && ta < 120.0 && tb < 120.0;
    outcome(
        ok,
        format!(
            "d(0,e1) <= {:.5} in {ta:.2}s, d(0,e3) <= {:.5} vs {oracle:.5} in {tb:.2}s",
            a.upper, b.upper
        ),
    )
}

fn ball_box() -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for name in ["heisenberg", "abelian3"] {
        let s = space(name).unwrap();
        let rep = ball_box_report(
            &s,
            &Region::centered(s.dim(), 0.5),
            &[0.05, 0.1, 0.2],
            200,
            51,
            CcOptions::default(),
        );
        ok &= rep.samples.len() == 200
            && rep.sandwich_holds()
            && rep.c1_hat > 0.0
            && rep.c1_hat <= rep.c2_hat
            && rep.c2_hat < 20.0;
        details.push(format!("{name} [{:.3}, {:.3}] over {}", rep.c1_hat, rep.c2_hat, rep.samples.len()));
    }
    outcome(ok, details.join(", "))
}

fn measure_homogeneity() -> Outcome {
    let s = space("heisenberg").unwrap();
    let grid = [0.5, 0.25, 0.125];
    let e = ChartSet::homogeneous_cube(s.degrees(), &[0.0; 3], 1.0);
    let d = ChartSet::homogeneous_cube(s.degrees(), &[0.0; 3], 2.0);
    let ratio = measure_estimate(&s, &d, &grid, MetricTag::Infty).value
        / measure_estimate(&s, &e, &grid, MetricTag::Infty).value;
    let dbl = doubling_report(&s, &Region::centered(3, 0.5), &[0.05, 0.1, 0.2], 64, 61).unwrap();
    let ok = (ratio / 16.0 - 1.0).abs() <= 0.1 && (dbl.c_hat / 16.0 - 1.0).abs() <= 0.15;
    outcome(ok, format!("dilation ratio {ratio:.4}, doubling {:.4}", dbl.c_hat))
}

fn heis() -> Arc<CCStructure> {
    Arc::new(space("heisenberg").unwrap())
}

const SMOOTH_MAPS: [&str; 4] = ["identity", "dilation:2", "swap_hom", "left_translate"];

fn differential_assembly() -> Outcome {
    let s = heis();
    let h = default_h_grid(DEFAULT_H0);
    let bases = [Point::zeros(3), Point::from_vec(vec![0.3, -0.2, 0.1])];
    let mut ok = true;
    let mut details = Vec::new();
    for name in SMOOTH_MAPS {
        let f = test_map(name, s.clone()).unwrap();
        let (mut res, mut defect) = (0.0_f64, 0.0_f64);
        for g in &bases {
            let l = assemble_differential(&f, g, &h).unwrap();
            let check = verify_differential(&f, &l, &[0.2, 0.1, 0.05, 0.025], 200, 71);
            let hom = verify_homomorphism(&l, 200, 72);
            ok &= check.passed() && hom.passed(1e-6);
            res = res.max(check.residuals.max_deviation());
            defect = defect.max(hom.product_defect).max(hom.dilation_defect);
        }
        details.push(format!("{name} res {res:.1e} hom {defect:.1e}"));
    }
    let id = test_map("identity", s).unwrap();
    let mut l = assemble_differential(&id, &Point::zeros(3), &h).unwrap();
    l.per_coordinate[0].x[2] = 0.1;
    let corrupted = verify_homomorphism(&l, 200, 73).product_defect;
    ok &= corrupted > 1e-3;
    details.push(format!("corrupted {corrupted:.2e}"));
    outcome(ok, details.join(", "))
}

fn product_formula() -> Outcome {
    let s = heis();
    let h = default_h_grid(DEFAULT_H0);
    let region = Region::centered(3, 0.5);
    let mut rng = sampling::rng(81);
    let bases: Vec<Point> = (0..100).map(|_| region.sample(&mut rng)).collect();
    let (mut gap, mut bounds, mut failures) = (0.0_f64, true, 0);
    for name in SMOOTH_MAPS {
        let f = test_map(name, s.clone()).unwrap();
        for g in &bases {
            match assemble_differential(&f, g, &h) {
                Ok(l) => {
                    gap = l.product_gaps.iter().copied().fold(gap, f64::max);
                    bounds &= l.norm_bounds_hold;
                }
                Err(_) => failures += 1,
            }
        }
    }
    outcome(
        failures == 0 && gap <= 1e-6 && bounds,
        format!("max gap {gap:.1e} over 100 points x 4 maps, norm bound {bounds}, failures {failures}"),
    )
}

fn jacobian_and_area() -> Outcome {
    let start = Instant::now();
    let s = heis();
    let h = default_h_grid(DEFAULT_H0);
    let dil = test_map("dilation:2", s.clone()).unwrap();
    let j = sr_jacobian(&assemble_differential(&dil, &Point::zeros(3), &h).unwrap()).unwrap();
    let e = ChartSet::homogeneous_cube(s.degrees(), &[0.0; 3], 1.0);
    let mut ok = (j - 16.0).abs() <= 1e-9;
    let mut details = vec![format!("J(dilation:2) = {j}")];
    for name in ["dilation:2", "left_translate"] {
        let f = test_map(name, s.clone()).unwrap();
        let r = area_formula_check(&f, &e, 100_000, 91).unwrap();
        ok &= r.gap < 0.05;
        details.push(format!("{name} gap {:.2e}", r.gap));
    }
    within_time(outcome(ok, details.join(", ")), start.elapsed(), 120.0)
}

fn determinism() -> Outcome {
    let cases: [(&str, Experiment, Option<&str>, usize); 6] = [
        ("heisenberg", Experiment::Validate, None, 50),
        ("engel", Experiment::Metrics, None, 200),
        ("heisenberg_perturbed", Experiment::NilpotentRates, None, 10),
        ("heisenberg", Experiment::Chow, None, 50),
        ("heisenberg", Experiment::Differential, Some("left_translate"), 50),
        ("heisenberg", Experiment::Area, Some("dilation:2"), 10_000),
    ];
    let mut identical = 0;
    let mut total = 0;
    for (sp, exp, map, samples) in cases {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let outputs: Vec<Vec<(String, Vec<u8>)>> = dirs
            .iter()
            .map(|d| {
                let mut cfg = ExperimentConfig::new(sp, exp, 7, d.path());
                cfg.samples = Some(samples);
                cfg.map = map.map(String::from);
                let out = run(&cfg).unwrap();
                out.files
                    .iter()
                    .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
                    .collect()
            })
            .collect();
        total += outputs[0].len();
        identical += outputs[0].iter().zip(&outputs[1]).filter(|(a, b)| a == b).count();
        if outputs[0].len() != outputs[1].len() {
            total += 1;
        }
    }
    outcome(identical == total && total > 0, format!("{identical}/{total} files byte-identical"))
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, o: Outcome| {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name}: {}", o.detail);
        if !o.passed {
            failed.push(id);
        }
    };
    report(1, "structure validation", structure_validation());
    report(2, "commutator oracle", commutator_oracle());
    report(3, "Hausdorff dimension", hausdorff_dimensions());
    let runs = metric_runs();
    report(4, "quasimetric axioms", quasimetric_axioms(&runs));
    report(5, "metric equivalence", metric_equivalence(&runs));
    report(6, "nilpotentization rates", nilpotentization_rates());
    report(7, "constructive connectivity", chow_connectivity());
    report(8, "cc-distance oracles", cc_distance_oracles());
    report(9, "Ball-Box sandwich", ball_box());
    report(10, "measure homogeneity", measure_homogeneity());
    report(11, "differential assembly", differential_assembly());
    report(12, "curve-derivative product formula", product_formula());
    report(13, "Jacobian and area formula", jacobian_and_area());
    report(14, "determinism", determinism());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
