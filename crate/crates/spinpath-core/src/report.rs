//! Deterministic structured-text reports for check suites.
//!
//! A report carries an ordered manifest (run metadata), ordered data lines
//! (payload values such as matrix entries and bounds), and a list of check
//! records. The rendered *body* is byte-deterministic for identical inputs:
//! key order is the insertion order, floating-point values are printed with
//! 17 significant digits (enough to round-trip every `f64` exactly), and
//! complex numbers are printed as `(re, im)` pairs. Wall-clock durations are
//! rendered in a separate trailing section that is excluded from the
//! determinism contract.

use std::fmt::Write as _;
use std::time::Duration;

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Marker line separating the deterministic body from the timing trailer.
pub const TIMING_MARKER: &str = "# timing";

/// Prints a float with 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Prints a complex number as a `(re, im)` decimal pair.
pub fn fmt_complex(z: Complex64) -> String {
    format!("({}, {})", fmt_f64(z.re), fmt_f64(z.im))
}

/// Renders a matrix as row-major lines of `(re, im)` pairs.
pub fn fmt_matrix_rows(m: &DMatrix<Complex64>) -> Vec<String> {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| fmt_complex(m[(i, j)]))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// One named check: what was measured, against what tolerance, and whether
/// it passed.
#[derive(Debug, Clone)]
pub struct CheckRecord {
    pub name: String,
    pub instance: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: Option<u64>,
    pub runtime: Duration,
}

impl CheckRecord {
    /// A record that passes exactly when the residual is within tolerance.
    pub fn measured(
        name: impl Into<String>,
        instance: impl Into<String>,
        residual: f64,
        tolerance: f64,
    ) -> Self {
        CheckRecord {
            name: name.into(),
            instance: instance.into(),
            residual,
            tolerance,
            pass: residual.is_finite() && residual <= tolerance,
            seed: None,
            runtime: Duration::ZERO,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_runtime(mut self, runtime: Duration) -> Self {
        self.runtime = runtime;
        self
    }
}

/// An ordered, renderable collection of manifest entries, data lines, and
/// check records.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub title: String,
    manifest: Vec<(String, String)>,
    data: Vec<(String, String)>,
    checks: Vec<CheckRecord>,
    wall_time: Option<Duration>,
}

impl Report {
    pub fn new(title: impl Into<String>) -> Self {
        Report {
            title: title.into(),
            ..Report::default()
        }
    }

    /// Appends a manifest entry; insertion order is the rendered order.
    pub fn push_manifest(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.manifest.push((key.into(), value.into()));
    }

    /// Appends a payload line; insertion order is the rendered order.
    pub fn push_data(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.data.push((key.into(), value.into()));
    }

    /// Appends the rows of a matrix as payload lines under the given label.
    pub fn push_matrix(&mut self, label: &str, m: &DMatrix<Complex64>) {
        for (i, row) in fmt_matrix_rows(m).into_iter().enumerate() {
            self.data.push((format!("{label}.row{i}"), row));
        }
    }

    pub fn push_check(&mut self, record: CheckRecord) {
        self.checks.push(record);
    }

    pub fn set_wall_time(&mut self, wall: Duration) {
        self.wall_time = Some(wall);
    }

    pub fn checks(&self) -> &[CheckRecord] {
        &self.checks
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&CheckRecord> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    /// The deterministic body: everything except wall-clock timings.
    pub fn body(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# report: {}", self.title);
        if !self.manifest.is_empty() {
            let _ = writeln!(out, "# manifest");
            for (k, v) in &self.manifest {
                let _ = writeln!(out, "{k}: {v}");
            }
        }
        if !self.data.is_empty() {
            let _ = writeln!(out, "# data");
            for (k, v) in &self.data {
                let _ = writeln!(out, "{k}: {v}");
            }
        }
        if !self.checks.is_empty() {
            let _ = writeln!(out, "# checks");
            for c in &self.checks {
                let _ = writeln!(out, "check: {}", c.name);
                let _ = writeln!(out, "  instance: {}", c.instance);
                let _ = writeln!(out, "  residual: {}", fmt_f64(c.residual));
                let _ = writeln!(out, "  tolerance: {}", fmt_f64(c.tolerance));
                let _ = writeln!(out, "  pass: {}", c.pass);
                if let Some(seed) = c.seed {
                    let _ = writeln!(out, "  seed: {seed}");
                }
            }
        }
        let _ = writeln!(out, "# summary");
        let _ = writeln!(out, "checks: {}", self.checks.len());
        let _ = writeln!(
            out,
            "failures: {}",
            self.checks.iter().filter(|c| !c.pass).count()
        );
        out
    }

    /// Body plus the volatile timing trailer.
    pub fn render(&self) -> String {
        let mut out = self.body();
        let _ = writeln!(out, "{TIMING_MARKER}");
        for c in &self.checks {
            let _ = writeln!(out, "{}: {:.3}s", c.name, c.runtime.as_secs_f64());
        }
        if let Some(wall) = self.wall_time {
            let _ = writeln!(out, "wall-time: {:.3}s", wall.as_secs_f64());
        }
        out
    }
}

/// Returns the deterministic part of a rendered report: everything before
/// the timing marker.
pub fn deterministic_part(rendered: &str) -> &str {
    match rendered.find(TIMING_MARKER) {
        Some(pos) => &rendered[..pos],
        None => rendered,
    }
}
