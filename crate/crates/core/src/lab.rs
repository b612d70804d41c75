//! Experiment orchestration: configuration files, stratified sampling of
//! torus points, hypothesis gating, rigidity-inequality verdicts, report
//! files, and the command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::growth::{
    evolve_collecting, seed_unstable_disk, shadowing_radius, GrowthError,
};
use crate::lyapunov::{
    det_growth_check, finite_time_spectrum_with_tol, stable_spectrum_with_tol, LyapunovError,
};
use crate::maps::{build_from_spec, make_shear_da, DAMap, MapError, MapSpec};
use crate::splitting::{
    cone_invariance_scan, rate_bound_scan, transversality_scan, ConeField, HypothesisReport,
    SplittingError,
};
use crate::torus::{
    build_automorphism, linear_exponents, IntMatrix, TorusError,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable selecting the worker-pool size.
pub const WORKERS_ENV: &str = "ANOSOV_LAB_WORKERS";

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("report parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Torus(#[from] TorusError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Splitting(#[from] SplittingError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Growth(#[from] GrowthError),
}

/// Which statement's hypotheses gate the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Theorem {
    #[serde(rename = "A", alias = "a")]
    A,
    #[serde(rename = "B", alias = "b")]
    B,
    #[serde(rename = "C", alias = "c")]
    C,
    #[serde(rename = "linear-sanity", alias = "linear_sanity")]
    LinearSanity,
}

impl Theorem {
    fn name(&self) -> &'static str {
        match self {
            Theorem::A => "A",
            Theorem::B => "B",
            Theorem::C => "C",
            Theorem::LinearSanity => "linear-sanity",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct BaseSection {
    /// Row-major integer matrix, rows separated by ';' ("2,1;1,1").
    #[serde(default)]
    pub matrix: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSection {
    #[serde(flatten)]
    pub spec: MapSpec,
    #[serde(default)]
    pub eps: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            spec: MapSpec {
                preset: None,
                label: None,
                steps: Vec::new(),
            },
            eps: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub theorem: Theorem,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    /// Defaults to d_u of the base automorphism.
    #[serde(default)]
    pub k_unstable: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_n_points() -> usize {
    100
}
fn default_n_steps() -> usize {
    10_000
}
fn default_seed() -> u64 {
    42
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            theorem: Theorem::LinearSanity,
            n_points: default_n_points(),
            n_steps: default_n_steps(),
            k_unstable: None,
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToleranceSection {
    #[serde(default = "default_tol_ineq")]
    pub tol_ineq: f64,
    #[serde(default = "default_tol_sum_zero")]
    pub tol_sum_zero: f64,
    #[serde(default = "default_tol_conv")]
    pub tol_conv: f64,
}

fn default_tol_ineq() -> f64 {
    1e-3
}
fn default_tol_sum_zero() -> f64 {
    1e-6
}
fn default_tol_conv() -> f64 {
    1e-4
}

impl Default for ToleranceSection {
    fn default() -> Self {
        ToleranceSection {
            tol_ineq: default_tol_ineq(),
            tol_sum_zero: default_tol_sum_zero(),
            tol_conv: default_tol_conv(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthSection {
    #[serde(default = "default_growth_radius")]
    pub radius: f64,
    #[serde(default = "default_growth_hmax")]
    pub h_max: f64,
    #[serde(default = "default_growth_steps")]
    pub steps: usize,
}

fn default_growth_radius() -> f64 {
    0.002
}
fn default_growth_hmax() -> f64 {
    0.02
}
fn default_growth_steps() -> usize {
    12
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub format: ReportFormat,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_output_dir(),
            format: ReportFormat::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub base: BaseSection,
    #[serde(default)]
    pub map: MapSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub tolerances: ToleranceSection,
    #[serde(default)]
    pub growth: Option<GrowthSection>,
    #[serde(default)]
    pub output: OutputSection,
    /// Worker-pool size; None uses the rayon default. Set from the
    /// environment in the CLI path only.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.experiment.n_points == 0 {
            return Err(LabError::Config("n_points must be at least 1".into()));
        }
        let t = &self.tolerances;
        if t.tol_ineq <= 0.0 || t.tol_sum_zero <= 0.0 || t.tol_conv <= 0.0 {
            return Err(LabError::Config("all tolerances must be positive".into()));
        }
        if let Some(g) = &self.growth {
            if g.radius <= 0.0 || g.h_max <= 0.0 || g.steps == 0 {
                return Err(LabError::Config("growth parameters must be positive".into()));
            }
        }
        if self.map.spec.preset.is_none() && self.base.matrix.is_none() {
            return Err(LabError::Config(
                "either a map preset or a base matrix is required".into(),
            ));
        }
        Ok(())
    }

    pub fn build_map(&self) -> Result<DAMap, LabError> {
        if self.map.spec.preset.is_some() {
            return Ok(build_from_spec(
                // presets carry their own base matrix
                build_automorphism(IntMatrix::new(2, vec![2, 1, 1, 1])?)?,
                &self.map.spec,
                self.map.eps,
            )?);
        }
        let text = self
            .base
            .matrix
            .as_ref()
            .ok_or_else(|| LabError::Config("base matrix required".into()))?;
        let base = build_automorphism(IntMatrix::parse(text)?)?;
        Ok(build_from_spec(base, &self.map.spec, self.map.eps)?)
    }
}

/// Stratified (Latin hypercube) sample of n points in [0,1)^dim: every
/// coordinate hits each of the n strata exactly once.
pub fn latin_hypercube(seed: u64, dim: usize, n: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<usize>> = (0..dim)
        .map(|_| {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    (0..n)
        .map(|i| {
            DVector::from_fn(dim, |j, _| {
                (columns[j][i] as f64 + rng.random::<f64>()) / n as f64
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointResult {
    pub x: Vec<f64>,
    pub unstable_sum_f: f64,
    pub stable_sum_f: f64,
    pub spectrum_sum: f64,
    pub err_unstable: f64,
    pub err_stable: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedScan {
    pub name: String,
    pub passed: bool,
    pub report: HypothesisReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapStats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthSummary {
    pub chi_hat: f64,
    pub linear_chi: f64,
    pub log_volumes: Vec<f64>,
    pub vertex_counts: Vec<usize>,
    pub shadowing: Vec<f64>,
    pub radius: f64,
    pub h_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidityReport {
    pub schema_version: u32,
    pub label: String,
    pub theorem: String,
    pub seed: u64,
    pub n_points: usize,
    pub n_steps: usize,
    pub k_unstable: usize,
    pub tol_ineq: f64,
    pub linear_unstable_sum: f64,
    pub linear_stable_sum: f64,
    pub hypothesis: Vec<NamedScan>,
    pub hypotheses_passed: bool,
    pub per_point: Vec<PointResult>,
    pub verdict_unstable: Verdict,
    pub verdict_stable: Verdict,
    pub gap_stats: GapStats,
    pub equality_flag: bool,
    pub unconverged: usize,
    pub max_abs_spectrum_sum: f64,
    pub max_det_identity_error: f64,
    /// Some points failed to converge; verdicts exclude them.
    pub partial: bool,
    pub growth: Option<GrowthSummary>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn gap_stats(gaps: &[f64]) -> GapStats {
    let mut sorted = gaps.to_vec();
    sorted.sort_by(f64::total_cmp);
    GapStats {
        min: quantile(&sorted, 0.0),
        q25: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q75: quantile(&sorted, 0.75),
        max: quantile(&sorted, 1.0),
    }
}

fn hypothesis_scans(f: &DAMap, theorem: Theorem) -> Result<Vec<NamedScan>, LabError> {
    let d = f.dim();
    let grid = match d {
        2 => 12,
        3 => 6,
        _ => 4,
    };
    let settle = 50;
    let mut scans = Vec::new();
    let mut push = |name: &str, report: HypothesisReport| {
        scans.push(NamedScan {
            name: name.to_string(),
            passed: report.passed(),
            report,
        });
    };
    match theorem {
        Theorem::LinearSanity => {}
        Theorem::A => {
            let cone = ConeField::new(
                f.base.unstable_basis.clone(),
                0.4,
                f.base.metric.clone(),
            )?;
            push("cone-invariance", cone_invariance_scan(f, &cone, grid, 1)?);
            push(
                "transversality",
                transversality_scan(f, &f.base.stable_basis, grid, settle)?,
            );
        }
        Theorem::B => {
            let cone = ConeField::new(
                f.base.unstable_basis.clone(),
                0.4,
                f.base.metric.clone(),
            )?;
            push("cone-invariance", cone_invariance_scan(f, &cone, grid, 1)?);
            push(
                "transversality",
                transversality_scan(f, &f.base.stable_basis, grid, settle)?,
            );
            push(
                "rate-bounds",
                rate_bound_scan(f, f.base.d_s, grid, settle)?,
            );
        }
        Theorem::C => {
            push(
                "transversality",
                transversality_scan(f, &f.base.stable_basis, grid, settle)?,
            );
            push(
                "rate-bounds",
                rate_bound_scan(f, f.base.d_s, grid, settle)?,
            );
        }
    }
    Ok(scans)
}

fn point_seed(master: u64, index: usize) -> u64 {
    master ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the full experiment: hypothesis gating, stratified point sampling,
/// two-sided exponent sums, verdicts, and the optional growth measurement.
pub fn run_rigidity_experiment(config: &ExperimentConfig) -> Result<RigidityReport, LabError> {
    config.validate()?;
    let f = config.build_map()?;
    let d = f.dim();
    let k_u = config.experiment.k_unstable.unwrap_or(f.base.d_u);
    if k_u == 0 || k_u > d {
        return Err(LabError::Config(format!(
            "k_unstable {k_u} out of range for dimension {d}"
        )));
    }
    let spectrum = linear_exponents(&f.base);
    let linear_unstable_sum: f64 = spectrum.exponents.iter().take(k_u).sum();
    let linear_stable_sum: f64 = spectrum.exponents.iter().skip(d - f.base.d_s).sum();

    let scans = hypothesis_scans(&f, config.experiment.theorem)?;
    let hypotheses_passed = scans.iter().all(|s| s.passed);

    let seed = config.experiment.seed;
    let n_steps = config.experiment.n_steps;
    let tol = &config.tolerances;
    let samples = latin_hypercube(seed, d, config.experiment.n_points);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| LabError::Config(e.to_string()))?;
    let d_s = f.base.d_s;
    let tol_conv = tol.tol_conv;
    let per_point: Vec<Result<(PointResult, f64), LyapunovError>> = pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let s = point_seed(seed, i);
                let full = finite_time_spectrum_with_tol(&f, x, d, n_steps, s, tol_conv)?;
                let stable =
                    stable_spectrum_with_tol(&f, x, d_s, n_steps, s ^ 0x5AB1, tol_conv)?;
                let det_err = (det_growth_check(&f, x, k_u, 200, s)?
                    - finite_time_spectrum_with_tol(&f, x, k_u, 200, s, tol_conv)?
                        .partial_sums[k_u - 1])
                    .abs();
                Ok((
                    PointResult {
                        x: x.iter().cloned().collect(),
                        unstable_sum_f: full.partial_sums[k_u - 1],
                        stable_sum_f: stable.partial_sums[d_s - 1],
                        spectrum_sum: full.partial_sums[d - 1],
                        err_unstable: full.standard_errors.iter().take(k_u).sum(),
                        err_stable: stable.standard_errors.iter().sum(),
                        converged: full.converged && stable.converged,
                    },
                    det_err,
                ))
            })
            .collect()
    });
    let mut points = Vec::with_capacity(samples.len());
    let mut max_det_identity_error: f64 = 0.0;
    for r in per_point {
        let (p, det_err) = r?;
        max_det_identity_error = max_det_identity_error.max(det_err);
        points.push(p);
    }

    let converged: Vec<&PointResult> = points.iter().filter(|p| p.converged).collect();
    let unconverged = points.len() - converged.len();
    let gaps: Vec<f64> = converged
        .iter()
        .map(|p| linear_unstable_sum - p.unstable_sum_f)
        .collect();
    let stats = gap_stats(&gaps);
    let max_abs_spectrum_sum = points
        .iter()
        .map(|p| p.spectrum_sum.abs())
        .fold(0.0, f64::max);

    // a violation must exceed the tolerance and the per-point standard error
    let unstable_violated = converged.iter().any(|p| {
        let excess = p.unstable_sum_f - linear_unstable_sum;
        excess > tol.tol_ineq && excess > p.err_unstable
    });
    let stable_violated = converged.iter().any(|p| {
        let deficit = linear_stable_sum - p.stable_sum_f;
        deficit > tol.tol_ineq && deficit > p.err_stable
    });
    let verdict = |violated: bool| {
        if !hypotheses_passed || converged.is_empty() {
            Verdict::Inconclusive
        } else if violated {
            Verdict::Violated
        } else {
            Verdict::Satisfied
        }
    };
    let equality_flag = !converged.is_empty()
        && converged
            .iter()
            .filter(|p| (linear_unstable_sum - p.unstable_sum_f).abs() <= tol.tol_ineq)
            .count() as f64
            >= 0.95 * converged.len() as f64;

    let growth = match &config.growth {
        None => None,
        Some(g) => {
            let x0 = samples[0].clone();
            let disk = seed_unstable_disk(&f, &x0, g.radius, g.h_max)?;
            let (series, orbit) = evolve_collecting(&f, &disk, g.steps, g.h_max)?;
            let shadowing = shadowing_radius(&f, &orbit, &f.base);
            Some(GrowthSummary {
                chi_hat: series.chi_hat,
                linear_chi: spectrum.unstable_sum,
                log_volumes: series.log_volumes,
                vertex_counts: series.vertex_counts,
                shadowing,
                radius: g.radius,
                h_max: g.h_max,
            })
        }
    };

    Ok(RigidityReport {
        schema_version: SCHEMA_VERSION,
        label: f.label.clone(),
        theorem: config.experiment.theorem.name().to_string(),
        seed,
        n_points: points.len(),
        n_steps,
        k_unstable: k_u,
        tol_ineq: tol.tol_ineq,
        linear_unstable_sum,
        linear_stable_sum,
        hypothesis: scans,
        hypotheses_passed,
        verdict_unstable: verdict(unstable_violated),
        verdict_stable: verdict(stable_violated),
        gap_stats: stats,
        equality_flag,
        unconverged,
        max_abs_spectrum_sum,
        max_det_identity_error,
        partial: unconverged > 0,
        per_point: points,
        growth,
    })
}

/// Exit status for a finished report: 0 satisfied, 2 violated,
/// 3 inconclusive.
pub fn exit_code(report: &RigidityReport) -> i32 {
    let verdicts = [report.verdict_unstable, report.verdict_stable];
    if verdicts.contains(&Verdict::Violated) {
        2
    } else if verdicts.contains(&Verdict::Inconclusive) {
        3
    } else {
        0
    }
}

pub fn points_csv(report: &RigidityReport) -> String {
    let d = report.per_point.first().map_or(0, |p| p.x.len());
    let mut out = String::new();
    let coords: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let _ = writeln!(
        out,
        "index,{},unstable_sum_f,stable_sum_f,spectrum_sum,err_unstable,err_stable,converged",
        coords.join(",")
    );
    for (i, p) in report.per_point.iter().enumerate() {
        let xs: Vec<String> = p.x.iter().map(|c| format!("{c}")).collect();
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            xs.join(","),
            p.unstable_sum_f,
            p.stable_sum_f,
            p.spectrum_sum,
            p.err_unstable,
            p.err_stable,
            p.converged
        );
    }
    out
}

pub fn growth_csv(summary: &GrowthSummary) -> String {
    let mut out = String::from("n,log_volume,vertices,r_hat\n");
    for n in 0..summary.log_volumes.len() {
        let r_hat = summary.shadowing.get(n).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{n},{},{},{}",
            summary.log_volumes[n], summary.vertex_counts[n], r_hat
        );
    }
    out
}

pub fn render_text(report: &RigidityReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "rigidity run: {}", report.label);
    let _ = writeln!(
        out,
        "theorem {}  seed {}  points {}  steps {}",
        report.theorem, report.seed, report.n_points, report.n_steps
    );
    if report.hypothesis.is_empty() {
        let _ = writeln!(out, "hypotheses: none required");
    } else {
        let parts: Vec<String> = report
            .hypothesis
            .iter()
            .map(|s| format!("{} {}", s.name, if s.passed { "ok" } else { "FAILED" }))
            .collect();
        let _ = writeln!(out, "hypotheses: {}", parts.join(", "));
    }
    let _ = writeln!(
        out,
        "linear sums: unstable {:.9}  stable {:.9}",
        report.linear_unstable_sum, report.linear_stable_sum
    );
    let _ = writeln!(
        out,
        "verdicts: unstable {:?}  stable {:?}",
        report.verdict_unstable, report.verdict_stable
    );
    let g = &report.gap_stats;
    let _ = writeln!(
        out,
        "gap quantiles (min/q25/med/q75/max): {:.6} {:.6} {:.6} {:.6} {:.6}",
        g.min, g.q25, g.median, g.q75, g.max
    );
    let _ = writeln!(
        out,
        "equality flag: {}  unconverged: {}/{}",
        report.equality_flag, report.unconverged, report.n_points
    );
    let _ = writeln!(
        out,
        "max |spectrum sum|: {:.3e}  max det identity error: {:.3e}",
        report.max_abs_spectrum_sum, report.max_det_identity_error
    );
    if let Some(gr) = &report.growth {
        let _ = writeln!(
            out,
            "volume growth: chi_hat {:.6} (linear {:.6}), {} steps, final vertices {}",
            gr.chi_hat,
            gr.linear_chi,
            gr.log_volumes.len() - 1,
            gr.vertex_counts.last().unwrap_or(&0)
        );
    }
    out
}

pub fn render(report: &RigidityReport, format: ReportFormat) -> Result<String, LabError> {
    Ok(match format {
        ReportFormat::Text => render_text(report),
        ReportFormat::Csv => points_csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report)?,
    })
}

/// Writes run.json, points.csv, meta.txt, and growth.csv (when present)
/// into the output directory.
pub fn emit_report(
    report: &RigidityReport,
    dir: &Path,
    wall_time_secs: f64,
) -> Result<(), LabError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("points.csv"), points_csv(report))?;
    if let Some(g) = &report.growth {
        fs::write(dir.join("growth.csv"), growth_csv(g))?;
    }
    let meta = format!(
        "anosov-lab {}\nschema {}\nlabel {}\ntheorem {}\nseed {}\nwall_time_secs {:.3}\n",
        env!("CARGO_PKG_VERSION"),
        report.schema_version,
        report.label,
        report.theorem,
        report.seed,
        wall_time_secs
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RigidityReport, LabError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// command-line interface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "anosov-lab",
    version,
    about = "Numerical laboratory for Lyapunov spectra and volume growth of torus diffeomorphisms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct MapArgs {
    /// Preset name (cat, cat-da, tribonacci, tribonacci-da, katok-da-3d, cat4).
    #[arg(long)]
    map: Option<String>,
    /// Row-major integer matrix, rows separated by ';' (e.g. "2,1;1,1").
    #[arg(long)]
    matrix: Option<String>,
    /// Shear amplitude scale for -da presets.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
}

impl MapArgs {
    fn build(&self) -> Result<DAMap, LabError> {
        if let Some(name) = &self.map {
            let spec = MapSpec {
                preset: Some(name.clone()),
                label: None,
                steps: Vec::new(),
            };
            return Ok(build_from_spec(
                build_automorphism(IntMatrix::new(2, vec![2, 1, 1, 1])?)?,
                &spec,
                self.eps,
            )?);
        }
        let text = self
            .matrix
            .as_ref()
            .ok_or_else(|| LabError::Config("--map or --matrix is required".into()))?;
        let base = build_automorphism(IntMatrix::parse(text)?)?;
        Ok(make_shear_da(base, Vec::new(), "custom")?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Finite-time Lyapunov spectra at sampled points, one CSV row each.
    Spectrum {
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, default_value_t = 8)]
        points: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        /// Number of exponents; defaults to the full dimension.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Cone-invariance scan around the unstable subspace.
    Cones {
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Cone aperture in radians.
        #[arg(long, default_value_t = 0.4)]
        aperture: f64,
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// All hypothesis scans required by a theorem.
    Hypotheses {
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, value_enum)]
        theorem: Theorem,
    },
    /// Evolve an unstable disk and report the volume-growth series.
    VolumeGrowth {
        #[command(flatten)]
        map: MapArgs,
        /// Comma-separated torus point; defaults to a seeded sample.
        #[arg(long)]
        point: Option<String>,
        #[arg(long, default_value_t = 0.002)]
        radius: f64,
        #[arg(long, default_value_t = 12)]
        steps: usize,
        #[arg(long, default_value_t = 0.02)]
        hmax: f64,
    },
    /// Full rigidity experiment from a config file (flags override keys).
    VerifyRigidity {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, value_enum)]
        theorem: Option<Theorem>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render a stored run.json.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

fn parse_point(text: &str, dim: usize) -> Result<DVector<f64>, LabError> {
    let coords: Result<Vec<f64>, _> = text.split(',').map(|c| c.trim().parse::<f64>()).collect();
    let coords = coords.map_err(|e| LabError::Config(format!("bad point: {e}")))?;
    if coords.len() != dim {
        return Err(LabError::Config(format!(
            "point has {} coordinates, map needs {dim}",
            coords.len()
        )));
    }
    Ok(DVector::from_vec(coords))
}

fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok())
}

fn cmd_spectrum(
    map: &MapArgs,
    points: usize,
    steps: usize,
    k: Option<usize>,
    seed: u64,
) -> Result<i32, LabError> {
    let f = map.build()?;
    let d = f.dim();
    let k = k.unwrap_or(d);
    let samples = latin_hypercube(seed, d, points);
    let coords: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let heads: Vec<String> = (0..k)
        .flat_map(|i| [format!("lambda{i}"), format!("stderr{i}")])
        .collect();
    println!("{},{},converged", coords.join(","), heads.join(","));
    for (i, x) in samples.iter().enumerate() {
        let est = finite_time_spectrum_with_tol(
            &f,
            x,
            k,
            steps,
            point_seed(seed, i),
            default_tol_conv(),
        )?;
        let xs: Vec<String> = x.iter().map(|c| format!("{c}")).collect();
        let vals: Vec<String> = est
            .exponents
            .iter()
            .zip(&est.standard_errors)
            .flat_map(|(e, s)| [format!("{e}"), format!("{s}")])
            .collect();
        println!("{},{},{}", xs.join(","), vals.join(","), est.converged);
    }
    Ok(0)
}

fn print_scan(scan: &NamedScan) {
    println!(
        "[{}] {}",
        if scan.passed { "ok" } else { "FAILED" },
        scan.name
    );
    let r = &scan.report;
    if let Some(v) = r.cone_margin {
        println!("  cone margin (rad): {v:.6}");
    }
    if let Some(v) = r.min_expansion_in_cone {
        println!("  min expansion in cone: {v:.6}");
    }
    if let Some(v) = r.min_angle_to_plane {
        println!("  min angle to plane (deg): {v:.6}");
    }
    if let Some(v) = r.sup_norm_e {
        println!("  sup |Df restricted to E|: {v:.6}");
    }
    if let Some(v) = r.inf_conorm_f {
        println!("  inf conorm on F: {v:.6}");
    }
    if let Some((g, l)) = r.linear_rates {
        println!("  linear rates gamma {g:.6} lambda {l:.6}");
    }
    if let Some((c, nu)) = r.domination_fit {
        println!("  domination fit C {c:.4} nu {nu:.6}");
    }
    for (x, why) in &r.violations {
        println!("  violation at {x:?}: {why}");
    }
}

fn cmd_cones(map: &MapArgs, grid: usize, aperture: f64, steps: usize) -> Result<i32, LabError> {
    let f = map.build()?;
    let cone = ConeField::new(f.base.unstable_basis.clone(), aperture, f.base.metric.clone())?;
    let report = cone_invariance_scan(&f, &cone, grid, steps)?;
    let scan = NamedScan {
        name: "cone-invariance".into(),
        passed: report.passed(),
        report,
    };
    print_scan(&scan);
    Ok(if scan.passed { 0 } else { 3 })
}

fn cmd_hypotheses(map: &MapArgs, theorem: Theorem) -> Result<i32, LabError> {
    let f = map.build()?;
    let scans = hypothesis_scans(&f, theorem)?;
    for s in &scans {
        print_scan(s);
    }
    Ok(if scans.iter().all(|s| s.passed) { 0 } else { 3 })
}

fn cmd_volume_growth(
    map: &MapArgs,
    point: Option<&str>,
    radius: f64,
    steps: usize,
    hmax: f64,
) -> Result<i32, LabError> {
    let f = map.build()?;
    let d = f.dim();
    let x = match point {
        Some(p) => parse_point(p, d)?,
        None => latin_hypercube(default_seed(), d, 1)[0].clone(),
    };
    let disk = seed_unstable_disk(&f, &x, radius, hmax)?;
    let (series, orbit) = evolve_collecting(&f, &disk, steps, hmax)?;
    let shadowing = shadowing_radius(&f, &orbit, &f.base);
    println!("n,log_volume,vertices,r_hat");
    for n in 0..series.log_volumes.len() {
        println!(
            "{n},{},{},{}",
            series.log_volumes[n], series.vertex_counts[n], shadowing[n]
        );
    }
    println!("# chi_hat = {}", series.chi_hat);
    println!("# mesh error estimate = {}", series.mesh_error_estimate);
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    config_path: Option<&Path>,
    map: &MapArgs,
    theorem: Option<Theorem>,
    points: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<i32, LabError> {
    let mut config = match config_path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(name) = &map.map {
        config.map.spec.preset = Some(name.clone());
        config.map.spec.steps.clear();
    }
    if map.eps != 0.0 {
        config.map.eps = map.eps;
    }
    if let Some(m) = &map.matrix {
        config.base.matrix = Some(m.clone());
    }
    if let Some(t) = theorem {
        config.experiment.theorem = t;
    }
    if let Some(p) = points {
        config.experiment.n_points = p;
    }
    if let Some(s) = steps {
        config.experiment.n_steps = s;
    }
    if let Some(s) = seed {
        config.experiment.seed = s;
    }
    if let Some(o) = out {
        config.output.dir = o.to_path_buf();
    }
    config.workers = workers_from_env();
    config.validate()?;
    let start = Instant::now();
    let report = run_rigidity_experiment(&config)?;
    emit_report(&report, &config.output.dir, start.elapsed().as_secs_f64())?;
    print!("{}", render(&report, config.output.format)?);
    Ok(exit_code(&report))
}

fn dispatch(cli: Cli) -> Result<i32, LabError> {
    match &cli.command {
        Command::Spectrum {
            map,
            points,
            steps,
            k,
            seed,
        } => cmd_spectrum(map, *points, *steps, *k, *seed),
        Command::Cones {
            map,
            grid,
            aperture,
            steps,
        } => cmd_cones(map, *grid, *aperture, *steps),
        Command::Hypotheses { map, theorem } => cmd_hypotheses(map, *theorem),
        Command::VolumeGrowth {
            map,
            point,
            radius,
            steps,
            hmax,
        } => cmd_volume_growth(map, point.as_deref(), *radius, *steps, *hmax),
        Command::VerifyRigidity {
            config,
            map,
            theorem,
            points,
            steps,
            seed,
            out,
        } => cmd_verify(
            config.as_deref(),
            map,
            *theorem,
            *points,
            *steps,
            *seed,
            out.as_deref(),
        ),
        Command::Report { run, format } => {
            let report = load_report(run)?;
            print!("{}", render(&report, *format)?);
            Ok(exit_code(&report))
        }
    }
}

/// CLI entry point; returns the process exit code.
pub fn cli_main() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
