//! CSV output: header row, `.` decimal point, floats at 12 significant digits.

use std::path::Path;

use crate::error::Result;

pub const SIGNIFICANT_DIGITS: usize = 12;

/// Formats `x` with 12 significant digits, fixed-point when the exponent is
/// moderate and scientific otherwise.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let exponent = x.abs().log10().floor() as i32;
    if (-5..=11).contains(&exponent) {
        let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exponent).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // Rounding can carry into a new leading digit (9.99.. -> 10.0); re-derive.
        let rounded: f64 = s.parse().unwrap_or(x);
        let new_exp = rounded.abs().log10().floor() as i32;
        if new_exp != exponent {
            let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - new_exp).max(0) as usize;
            return format!("{x:.decimals$}");
        }
        s
    } else {
        format!("{x:.prec$e}", prec = SIGNIFICANT_DIGITS - 1)
    }
}

/// A record that renders as one CSV line.
pub trait CsvRow {
    fn header() -> &'static str;
    fn row(&self) -> String;
}

pub fn to_csv<T: CsvRow>(rows: &[T]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(T::header());
    out.push('\n');
    for r in rows {
        out.push_str(&r.row());
        out.push('\n');
    }
    out
}

pub fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

/// Free-form `(name, value)` metric rows for experiments without a fixed schema.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub experiment: String,
    pub metric: String,
    pub value: f64,
    pub threshold: Option<f64>,
    pub passed: Option<bool>,
}

impl MetricRow {
    pub fn new(experiment: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self { experiment: experiment.into(), metric: metric.into(), value, threshold: None, passed: None }
    }

    pub fn checked(mut self, threshold: f64, passed: bool) -> Self {
        self.threshold = Some(threshold);
        self.passed = Some(passed);
        self
    }
}

impl CsvRow for MetricRow {
    fn header() -> &'static str {
        "experiment,metric,value,threshold,passed"
    }

    fn row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.experiment,
            self.metric,
            fmt_float(self.value),
            self.threshold.map(fmt_float).unwrap_or_default(),
            self.passed.map(|p| p.to_string()).unwrap_or_default()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_float(0.8493), "0.849300000000");
        assert_eq!(fmt_float(1.0), "1.00000000000");
        assert_eq!(fmt_float(-0.02), "-0.0200000000000");
        assert_eq!(fmt_float(123456.0), "123456.000000");
        assert_eq!(fmt_float(0.0), "0");
        assert_eq!(fmt_float(1e-9), "1.00000000000e-9");
        assert_eq!(fmt_float(9.9999999999999), "10.0000000000");
    }

    #[test]
    fn csv_has_header() {
        let rows = vec![MetricRow::new("x", "m", 0.5).checked(1.0, true)];
        assert_eq!(to_csv(&rows), "experiment,metric,value,threshold,passed\nx,m,0.500000000000,1.00000000000,true\n");
    }
}
