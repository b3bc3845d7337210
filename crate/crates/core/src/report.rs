//! Rate tables and CSV serialization.

use std::fmt::Write as _;

/// Rows of `(epsilon, deviation)` with a fitted log-log slope.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub rows: Vec<(f64, f64)>,
    pub slope: f64,
}

impl RateTable {
    pub fn new(mut rows: Vec<(f64, f64)>) -> Self {
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        let slope = loglog_slope(&rows);
        Self { rows, slope }
    }

    pub fn max_deviation(&self) -> f64 {
        self.rows.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,deviation\n");
        for (e, d) in &self.rows {
            writeln!(out, "{e:e},{d:e}").unwrap();
        }
        writeln!(out, "# slope={}", self.slope).unwrap();
        out
    }
}

/// Least-squares slope of `log y` against `log x` over rows with positive entries.
/// Returns NaN with fewer than two usable rows.
pub fn loglog_slope(rows: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let rows: Vec<_> = [0.2, 0.1, 0.05].iter().map(|&e: &f64| (e, 3.0 * e.powi(2))).collect();
        assert!((loglog_slope(&rows) - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&rows[..1]).is_nan());
    }

    #[test]
    fn csv_layout() {
        let t = RateTable::new(vec![(0.1, 0.01), (0.2, 0.04)]);
        let csv = t.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "epsilon,deviation");
        assert!(lines[1].starts_with("2e-1,"));
        assert!(lines[3].starts_with("# slope=2"));
    }
}
