//! Command-line driver: parse model files, run evaluators and check
//! suites, and emit deterministic structured-text reports.
//!
//! The deterministic report body goes to stdout; wall-clock timings go to
//! stderr, so repeated runs with identical inputs produce byte-identical
//! stdout. Exit codes: 0 all checks pass, 1 a check failed, 2 usage or
//! parse error.

mod suites;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use sha2::{Digest, Sha256};

use spinpath_core::interaction::{parse_interaction, parse_region, Interaction};
use spinpath_core::interaction::split;
use spinpath_core::paths::{exp_mc, exp_oracle, exp_series};
use spinpath_core::pointprocess::{
    bernoulli_product_integral, poisson_count_chi_square, poisson_product_integral,
};
use spinpath_core::report::{fmt_complex, fmt_f64, CheckRecord, Report};

/// Largest region the dense evaluators accept.
const SITE_CAP: usize = 12;

#[derive(Parser)]
#[command(
    name = "spinpath",
    version,
    about = "Finite-volume spin toolkit: validate models, evaluate thermal densities, run equilibrium check suites, and test the point-process machinery"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a model file and report structural violations.
    Validate { model: PathBuf },
    /// Evaluate the thermal density on a region by the chosen method.
    Gibbs {
        model: PathBuf,
        #[arg(long)]
        beta: f64,
        /// Region in site-list syntax, e.g. "[(0),(1),(2)]".
        #[arg(long)]
        region: String,
        #[arg(long, value_enum, default_value_t = Method::Oracle)]
        method: Method,
        /// Expansion order (series method).
        #[arg(long, default_value_t = 20)]
        order: usize,
        /// Sample count (mc method).
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also measure the deviation from the eigendecomposition value.
        #[arg(long)]
        compare: bool,
    },
    /// Run a named residual-check suite over the model.
    Check {
        model: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Inject a non-positive density before the balance checks.
        #[arg(long)]
        corrupt_density: bool,
    },
    /// Point-process diagnostics: count distribution and grid convergence.
    Pp {
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum)]
        test: PpTest,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Oracle,
    Series,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Kms,
    Dlr,
    Specification,
    Lemmas,
}

#[derive(Clone, Copy, ValueEnum)]
enum PpTest {
    Pmf,
    Convergence,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    if let Ok(workers) = std::env::var("SPINPATH_WORKERS") {
        if let Ok(n) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let started = Instant::now();
    let code = run(cli);
    eprintln!("# timing");
    eprintln!("wall-time: {:.3}s", started.elapsed().as_secs_f64());
    ExitCode::from(code)
}

fn usage_error(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    2
}

/// Reads and parses a model file; errors are usage errors (exit 2).
fn load_model(path: &PathBuf) -> Result<(Interaction, String), u8> {
    let bytes = std::fs::read(path)
        .map_err(|e| usage_error(format!("cannot read {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let text = String::from_utf8(bytes)
        .map_err(|e| usage_error(format!("{} is not UTF-8: {e}", path.display())))?;
    let interaction =
        parse_interaction(&text).map_err(|e| usage_error(format!("{}: {e}", path.display())))?;
    Ok((interaction, hex))
}

fn finish(report: Report) -> u8 {
    print!("{}", report.body());
    for c in report.checks() {
        if !c.pass {
            return 1;
        }
    }
    0
}

fn run(cli: Cli) -> u8 {
    match cli.cmd {
        Cmd::Validate { model } => cmd_validate(&model),
        Cmd::Gibbs {
            model,
            beta,
            region,
            method,
            order,
            samples,
            seed,
            compare,
        } => cmd_gibbs(&model, beta, &region, method, order, samples, seed, compare),
        Cmd::Check {
            model,
            suite,
            beta,
            seed,
            trials,
            corrupt_density,
        } => cmd_check(&model, suite, beta, seed, trials, corrupt_density),
        Cmd::Pp {
            rate,
            samples,
            seed,
            test,
        } => cmd_pp(rate, samples, seed, test),
    }
}

fn base_report(title: &str, command: &str, digest: &str) -> Report {
    let mut r = Report::new(title);
    r.push_manifest("tool", format!("spinpath {}", env!("CARGO_PKG_VERSION")));
    r.push_manifest("command", command);
    r.push_manifest("model-digest", digest);
    r
}

fn cmd_validate(path: &PathBuf) -> u8 {
    let (interaction, digest) = match load_model(path) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let mut report = base_report("model-validation", "validate", &digest);
    report.push_manifest("model-file", path.display().to_string());
    let violations = interaction.validate();
    report.push_data("terms", interaction.terms().len().to_string());
    report.push_data("classical", interaction.is_classical().to_string());
    for (i, v) in violations.iter().enumerate() {
        report.push_data(format!("violation{i}"), v.to_string());
    }
    report.push_check(CheckRecord::measured(
        "structural-constraints",
        path.display().to_string(),
        violations.len() as f64,
        0.0,
    ));
    finish(report)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gibbs(
    path: &PathBuf,
    beta: f64,
    region_text: &str,
    method: Method,
    order: usize,
    samples: usize,
    seed: u64,
    compare: bool,
) -> u8 {
    let (interaction, digest) = match load_model(path) {
        Ok(v) => v,
        Err(code) => return code,
    };
    if !(beta >= 0.0) || !beta.is_finite() {
        return usage_error(format!("--beta must be a finite nonnegative real, got {beta}"));
    }
    let region = match parse_region(region_text, interaction.model().d()) {
        Ok(r) => r,
        Err(e) => return usage_error(format!("--region: {e}")),
    };
    if region.is_empty() || region.len() > SITE_CAP {
        return usage_error(format!(
            "--region must have between 1 and {SITE_CAP} sites, got {}",
            region.len()
        ));
    }
    if matches!(method, Method::Mc) && samples == 0 {
        return usage_error("--samples must be at least 1 for the mc method");
    }

    let mut report = base_report("thermal-density", "gibbs", &digest);
    report.push_manifest("beta", fmt_f64(beta));
    report.push_manifest("region", region.to_string());
    report.push_manifest(
        "method",
        match method {
            Method::Oracle => "oracle",
            Method::Series => "series",
            Method::Mc => "mc",
        },
    );
    report.push_manifest("order", order.to_string());
    report.push_manifest("samples", samples.to_string());
    report.push_manifest("seed", seed.to_string());

    let bundle = match split(&interaction, &region, &region) {
        Ok(b) => b,
        Err(e) => return usage_error(format!("model incompatible with region: {e}")),
    };
    let evaluated = match method {
        Method::Oracle => exp_oracle(&bundle, beta),
        Method::Series => exp_series(&bundle, beta, order),
        Method::Mc => exp_mc(&bundle, beta, samples, seed),
    };
    let result = match evaluated {
        Ok(r) => r,
        Err(e) => return usage_error(format!("evaluation failed: {e}")),
    };
    let m = result.value.to_matrix();
    report.push_data("partition-function", fmt_complex(m.trace()));
    report.push_data("tail-bound", fmt_f64(result.tail_bound));
    if let Some(mc) = &result.mc {
        report.push_data("max-std-error", fmt_f64(mc.max_std_error));
    }
    report.push_matrix("density", &m);

    if compare {
        let oracle = match exp_oracle(&bundle, beta) {
            Ok(o) => o,
            Err(e) => return usage_error(format!("oracle evaluation failed: {e}")),
        };
        let deviation = result
            .value
            .add_scaled(Complex64::new(-1.0, 0.0), &oracle.value)
            .expect("same region")
            .max_abs();
        let tolerance = match method {
            Method::Oracle => 1e-14,
            Method::Series => result.tail_bound.max(1e-12) + 1e-10,
            Method::Mc => {
                let sigma = result.mc.as_ref().map(|m| m.max_std_error).unwrap_or(0.0);
                5.0 * sigma + 1e-12
            }
        };
        report.push_check(
            CheckRecord::measured("deviation-vs-oracle", "max entry difference", deviation, tolerance)
                .with_seed(seed),
        );
    }
    finish(report)
}

fn cmd_check(
    path: &PathBuf,
    suite: Suite,
    beta: f64,
    seed: u64,
    trials: usize,
    corrupt_density: bool,
) -> u8 {
    let (interaction, digest) = match load_model(path) {
        Ok(v) => v,
        Err(code) => return code,
    };
    if !(beta > 0.0) || !beta.is_finite() {
        return usage_error(format!("--beta must be a positive finite real, got {beta}"));
    }
    if trials == 0 {
        return usage_error("--trials must be at least 1");
    }
    if !interaction.validate().is_empty() {
        return usage_error("model fails structural validation; run `validate` for details");
    }
    let ambient = suites::support_union(&interaction);
    if ambient.is_empty() || ambient.len() > SITE_CAP {
        return usage_error(format!(
            "model support must have between 1 and {SITE_CAP} sites, got {}",
            ambient.len()
        ));
    }
    let suite_name = match suite {
        Suite::Kms => "kms",
        Suite::Dlr => "dlr",
        Suite::Specification => "specification",
        Suite::Lemmas => "lemmas",
    };
    let mut report = base_report("check-suite", "check", &digest);
    report.push_manifest("suite", suite_name);
    report.push_manifest("beta", fmt_f64(beta));
    report.push_manifest("seed", seed.to_string());
    report.push_manifest("trials", trials.to_string());
    report.push_manifest("ambient", ambient.to_string());
    report.push_manifest("corrupt-density", corrupt_density.to_string());
    if corrupt_density && !matches!(suite, Suite::Dlr) {
        return usage_error("--corrupt-density applies only to the dlr suite");
    }

    match suite {
        Suite::Dlr => {
            suites::suite_dlr(&mut report, &interaction, beta, seed, trials, corrupt_density)
        }
        Suite::Kms => suites::suite_kms(&mut report, &interaction, beta, seed, trials),
        Suite::Specification => {
            suites::suite_specification(&mut report, &interaction, beta, seed, trials)
        }
        Suite::Lemmas => suites::suite_lemmas(&mut report, &interaction, beta, seed, trials),
    }
    finish(report)
}

fn cmd_pp(rate: f64, samples: usize, seed: u64, test: PpTest) -> u8 {
    if !(rate > 0.0) || !rate.is_finite() || rate >= 32.0 {
        return usage_error(format!("--rate must be a positive real below 32, got {rate}"));
    }
    if samples == 0 {
        return usage_error("--samples must be at least 1");
    }
    let mut report = base_report("point-process-diagnostics", "pp", "none");
    report.push_manifest("rate", fmt_f64(rate));
    report.push_manifest("samples", samples.to_string());
    report.push_manifest("seed", seed.to_string());
    match test {
        PpTest::Pmf => {
            report.push_manifest("test", "pmf");
            let summary = match poisson_count_chi_square(rate, samples, seed) {
                Ok(s) => s,
                Err(e) => return usage_error(e),
            };
            report.push_data("degrees-of-freedom", summary.dof.to_string());
            for (k, (&o, &e)) in summary
                .observed
                .iter()
                .zip(&summary.expected)
                .enumerate()
            {
                report.push_data(format!("bin{k}"), format!("observed {o}, expected {}", fmt_f64(e)));
            }
            report.push_check(
                CheckRecord::measured(
                    "count-distribution-chi-square",
                    format!("rate {rate}, {samples} samples, 1% significance"),
                    summary.statistic,
                    summary.critical_01,
                )
                .with_seed(seed),
            );
        }
        PpTest::Convergence => {
            report.push_manifest("test", "convergence");
            // Three smooth product functionals; the grid-process value must
            // approach the limiting value at first order in 1/n, so the gap
            // halves when the grid doubles.
            let funcs: Vec<(&str, Box<dyn Fn(f64) -> Complex64>)> = vec![
                ("1 + 0.5·cos(1.5t)", Box::new(|t: f64| Complex64::new(1.0 + 0.5 * (1.5 * t).cos(), 0.0))),
                ("1/(1 + 0.4t)", Box::new(|t: f64| Complex64::new(1.0 / (1.0 + 0.4 * t), 0.0))),
                ("exp(0.3·i·t)", Box::new(|t: f64| (Complex64::new(0.0, 0.3 * t)).exp())),
            ];
            for (label, g) in &funcs {
                let exact = poisson_product_integral(g, rate);
                let gap = |n: usize| {
                    bernoulli_product_integral(g, n, rate)
                        .map(|v| (v - exact).norm())
                };
                let (g64, g128) = match (gap(64), gap(128)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => return usage_error(e),
                };
                let ratio = g128 / g64;
                report.push_data(
                    format!("gap[{label}]"),
                    format!("n=64 {}, n=128 {}", fmt_f64(g64), fmt_f64(g128)),
                );
                report.push_check(
                    CheckRecord::measured(
                        "grid-convergence-halving",
                        format!("{label}: |ratio - 1/2| within a quarter of 1/2"),
                        (ratio - 0.5).abs(),
                        0.125,
                    )
                    .with_seed(seed),
                );
            }
        }
    }
    finish(report)
}
