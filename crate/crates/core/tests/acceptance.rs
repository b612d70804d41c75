//! End-to-end acceptance suite. Each test prints one pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`) and fails
//! loudly if its criterion is not met.

use anosov_lab::growth::{
    evolve_collecting, seed_unstable_disk, separated_count, separated_count_exact,
    shadowing_radius, volume_growth_rate,
};
use anosov_lab::lab::{
    emit_report, latin_hypercube, points_csv, run_rigidity_experiment, ExperimentConfig,
    GrowthSection, Theorem, Verdict,
};
use anosov_lab::lyapunov::{
    det_growth_check, finite_time_spectrum, finite_time_spectrum_with_tol,
};
use anosov_lab::maps::{conservative_preset_labels, preset, DAMap};
use anosov_lab::splitting::{rate_bound_scan, transversality_scan};
use anosov_lab::torus::linear_exponents;
use nalgebra::{dvector, DVector};

const CAT_LAMBDA: f64 = 0.962_423_650_1;
const TRIB_LAMBDA: f64 = 0.609_377_863_3;

fn verdict_line(name: &str, ok: bool, detail: &str) {
    println!(
        "acceptance {name}: {}{}",
        if ok { "PASS" } else { "FAIL" },
        if detail.is_empty() {
            String::new()
        } else {
            format!(" ({detail})")
        }
    );
    assert!(ok, "acceptance {name} failed: {detail}");
}

fn sample_points(f: &DAMap, n: usize, seed: u64) -> Vec<DVector<f64>> {
    latin_hypercube(seed, f.dim(), n)
}

#[test]
fn criterion_01_linear_exactness() {
    let cat = preset("cat", 0.0).unwrap();
    let est = finite_time_spectrum(&cat, &dvector![0.3, 0.7], 2, 10_000, 11).unwrap();
    let cat_ok = (est.exponents[0] - CAT_LAMBDA).abs() < 1e-4
        && (est.exponents[1] + CAT_LAMBDA).abs() < 1e-4;

    let trib = preset("tribonacci", 0.0).unwrap();
    let est3 = finite_time_spectrum(&trib, &dvector![0.3, 0.7, 0.1], 3, 10_000, 11).unwrap();
    let expect = [TRIB_LAMBDA, -TRIB_LAMBDA / 2.0, -TRIB_LAMBDA / 2.0];
    let trib_ok = est3
        .exponents
        .iter()
        .zip(expect)
        .all(|(got, want)| (got - want).abs() < 1e-3);
    verdict_line(
        "01 linear-exactness",
        cat_ok && trib_ok,
        &format!("cat {:?} tribonacci {:?}", est.exponents, est3.exponents),
    );
}

#[test]
fn criterion_02_zero_sum_conservation() {
    let mut worst: f64 = 0.0;
    for (name, eps) in conservative_preset_labels() {
        let f = preset(name, eps).unwrap();
        let d = f.dim();
        for (i, x) in sample_points(&f, 100, 7).iter().enumerate() {
            let est =
                finite_time_spectrum_with_tol(&f, x, d, 300, 1000 + i as u64, 1.0).unwrap();
            worst = worst.max(est.partial_sums[d - 1].abs());
        }
    }
    verdict_line(
        "02 zero-sum-conservation",
        worst <= 1e-6,
        &format!("max |sum| = {worst:.3e}"),
    );
}

#[test]
fn criterion_03_determinant_identity() {
    let mut worst: f64 = 0.0;
    for (name, eps) in conservative_preset_labels() {
        let f = preset(name, eps).unwrap();
        let k = f.base.d_u;
        for (i, x) in sample_points(&f, 5, 13).iter().enumerate() {
            let seed = 500 + i as u64;
            let det = det_growth_check(&f, x, k, 500, seed).unwrap();
            let est = finite_time_spectrum_with_tol(&f, x, k, 500, seed, 1.0).unwrap();
            worst = worst.max((det - est.partial_sums[k - 1]).abs());
        }
    }
    verdict_line(
        "03 determinant-identity",
        worst <= 1e-10,
        &format!("max error = {worst:.3e}"),
    );
}

#[test]
fn criterion_04_rigidity_inequality() {
    let mut ok = true;
    let mut detail = String::new();
    for (name, eps) in [
        ("cat-da", 0.02),
        ("cat-da", 0.05),
        ("cat-da", 0.1),
        ("tribonacci-da", 0.02),
        ("tribonacci-da", 0.05),
        ("tribonacci-da", 0.1),
    ] {
        let mut cfg = ExperimentConfig::default();
        cfg.map.spec.preset = Some(name.to_string());
        cfg.map.eps = eps;
        cfg.experiment.theorem = Theorem::A;
        cfg.experiment.n_points = 300;
        cfg.experiment.n_steps = 10_000;
        cfg.tolerances.tol_conv = 2e-2;
        let report = run_rigidity_experiment(&cfg).unwrap();
        if !report.hypotheses_passed {
            // the inequality is only claimed under the structural hypotheses;
            // a config whose scans fail must be reported inconclusive
            let gated = report.verdict_unstable == Verdict::Inconclusive
                && report.verdict_stable == Verdict::Inconclusive;
            if !gated {
                ok = false;
                detail.push_str(&format!("{name} eps {eps}: scan failure not gated; "));
            } else {
                detail.push_str(&format!("{name} eps {eps} excluded (scans fail); "));
            }
            continue;
        }
        let converged = report.n_points - report.unconverged;
        let max_unstable = report
            .per_point
            .iter()
            .filter(|p| p.converged)
            .map(|p| p.unstable_sum_f)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_stable = report
            .per_point
            .iter()
            .filter(|p| p.converged)
            .map(|p| p.stable_sum_f)
            .fold(f64::INFINITY, f64::min);
        let this_ok = converged >= 200
            && max_unstable <= report.linear_unstable_sum + 1e-3
            && min_stable >= report.linear_stable_sum - 1e-3
            && report.verdict_unstable == Verdict::Satisfied
            && report.verdict_stable == Verdict::Satisfied;
        if !this_ok {
            ok = false;
            detail.push_str(&format!(
                "{name} eps {eps}: conv {converged} max_u {max_unstable:.6} \
                 (lin {:.6}) min_s {min_stable:.6} (lin {:.6}); ",
                report.linear_unstable_sum, report.linear_stable_sum
            ));
        }
    }
    verdict_line("04 rigidity-inequality", ok, &detail);
}

fn chi_for(f: &DAMap, r: f64, h: f64, n: usize) -> f64 {
    let x = latin_hypercube(21, f.dim(), 1)[0].clone();
    let disk = seed_unstable_disk(f, &x, r, h).unwrap();
    let series = anosov_lab::growth::evolve_and_measure(f, &disk, n, h).unwrap();
    series.chi_hat
}

#[test]
fn criterion_05_volume_growth_identity() {
    let mut ok = true;
    let mut detail = String::new();
    // linear maps against the closed-form unstable sums
    for (name, tol, r, h, n) in [
        ("cat", 1e-6, 0.3, 0.05, 10),
        ("tribonacci", 1e-6, 0.3, 0.05, 10),
        ("cat4", 1e-5, 0.05, 0.05, 6),
    ] {
        let f = preset(name, 0.0).unwrap();
        let chi = chi_for(&f, r, h, n);
        let lin = linear_exponents(&f.base).unstable_sum;
        if (chi - lin).abs() > tol {
            ok = false;
            detail.push_str(&format!("{name}: chi {chi:.8} vs {lin:.8}; "));
        }
    }
    // perturbed presets against the linearization's rate at fine resolution;
    // the seed is sized so the disk covers the torus well inside the fit
    // window while the evolved mesh stays under the vertex cap, and the
    // slope is fitted past the covering transient
    for (name, eps) in [
        ("cat-da", 0.02),
        ("cat-da", 0.05),
        ("cat-da", 0.1),
        ("tribonacci-da", 0.02),
        ("tribonacci-da", 0.05),
        ("tribonacci-da", 0.1),
        ("katok-da-3d", 0.05),
    ] {
        let f = preset(name, eps).unwrap();
        let r = if f.dim() == 2 { 0.006 } else { 0.3 };
        let x = latin_hypercube(21, f.dim(), 1)[0].clone();
        let disk = seed_unstable_disk(&f, &x, r, 1e-3).unwrap();
        let series = anosov_lab::growth::evolve_and_measure(&f, &disk, 12, 1e-3).unwrap();
        let chi = volume_growth_rate(&series, 6).unwrap().chi_hat;
        let lin = linear_exponents(&f.base).unstable_sum;
        if (chi - lin).abs() > 0.05 {
            ok = false;
            detail.push_str(&format!("{name} eps {eps}: chi {chi:.6} vs {lin:.6}; "));
        }
    }
    verdict_line("05 volume-growth-identity", ok, &detail);
}

#[test]
fn criterion_06_volume_comparison() {
    let mut ok = true;
    let mut detail = String::new();
    let chi_cat = chi_for(&preset("cat", 0.0).unwrap(), 0.01, 0.02, 10);
    let chi_trib = chi_for(&preset("tribonacci", 0.0).unwrap(), 0.01, 0.02, 10);
    for (name, eps) in conservative_preset_labels() {
        if eps == 0.0 {
            continue;
        }
        let f = preset(name, eps).unwrap();
        let chi = chi_for(&f, 0.002, 0.01, 10);
        let chi_a = if name.starts_with("cat") { chi_cat } else { chi_trib };
        if chi > chi_a + 0.02 {
            ok = false;
            detail.push_str(&format!("{name} eps {eps}: {chi:.6} > {chi_a:.6} + 0.02; "));
        }
    }
    verdict_line("06 volume-comparison", ok, &detail);
}

#[test]
fn criterion_07_leaf_shadowing() {
    let mut ok = true;
    let mut detail = String::new();
    // the seed spans a macroscopic leaf patch so the deviation series starts
    // near its plateau instead of ramping up from a point sample
    for (name, eps, r, h) in [
        ("cat-da", 0.02, 0.08, 0.02),
        ("cat-da", 0.05, 0.08, 0.02),
        ("tribonacci-da", 0.02, 0.3, 0.01),
    ] {
        let f = preset(name, eps).unwrap();
        let x = latin_hypercube(33, f.dim(), 1)[0].clone();
        let disk = seed_unstable_disk(&f, &x, r, h).unwrap();
        let (series, orbit) = evolve_collecting(&f, &disk, 12, h).unwrap();
        let radii = shadowing_radius(&f, &orbit, &f.base);
        let mut sorted = radii.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let max = sorted[sorted.len() - 1];
        let lambda1 = linear_exponents(&f.base).exponents[0];
        let growth = series.log_volumes[12] - series.log_volumes[0];
        let this_ok = max <= 2.0 * median + 0.1 * (2.0 * r) && growth >= 0.9 * 12.0 * lambda1;
        if !this_ok {
            ok = false;
            detail.push_str(&format!(
                "{name} eps {eps}: max {max:.4} median {median:.4} growth {growth:.3}; "
            ));
        }
    }
    verdict_line("07 leaf-shadowing", ok, &detail);
}

#[test]
fn criterion_08_linear_hypothesis_scans() {
    let f = preset("cat", 0.0).unwrap();
    let rates = rate_bound_scan(&f, f.base.d_s, 8, 40).unwrap();
    let lambda = f.base.stable_rate();
    let gamma = f.base.unstable_rate();
    let nu_expected = lambda / gamma;
    let sup_e = rates.sup_norm_e.unwrap();
    let inf_f = rates.inf_conorm_f.unwrap();
    let nu = rates.domination_fit.unwrap().1;
    let trans = transversality_scan(&f, &f.base.stable_basis, 8, 40).unwrap();
    let angle = trans.min_angle_to_plane.unwrap();
    let ok = (sup_e - lambda).abs() < 1e-3
        && (inf_f - gamma).abs() < 1e-3
        && (nu - nu_expected).abs() < 1e-3
        && (angle - 90.0).abs() < 1e-6;
    verdict_line(
        "08 linear-hypothesis-scans",
        ok,
        &format!("sup_e {sup_e:.6} inf_f {inf_f:.6} nu {nu:.6} angle {angle:.8}"),
    );
}

#[test]
fn criterion_09_entropy_surrogate() {
    let f = preset("cat", 0.0).unwrap();
    let x = dvector![0.15, 0.85];
    let disk = seed_unstable_disk(&f, &x, 0.05, 2.0e-6).unwrap();
    let n = 10usize;
    let count = separated_count(&f, &disk, n, 0.05).unwrap();
    let rate = (count as f64).ln() / n as f64;
    let rate_ok = (rate - 0.96242).abs() < 0.05;

    let fd = preset("cat-da", 0.05).unwrap();
    let small = seed_unstable_disk(&fd, &dvector![0.31, 0.57], 0.05, 0.0006).unwrap();
    let mut packing_ok = small.vertices.len() <= 200;
    for eps in [0.005, 0.02, 0.1] {
        let greedy = separated_count(&fd, &small, 3, eps).unwrap();
        let exact = separated_count_exact(&fd, &small, 3, eps).unwrap();
        packing_ok &= greedy <= exact && 2 * greedy >= exact;
    }
    verdict_line(
        "09 entropy-surrogate",
        rate_ok && packing_ok,
        &format!("rate {rate:.5} count {count} packing_ok {packing_ok}"),
    );
}

#[test]
fn criterion_10_determinism() {
    let mut cfg = ExperimentConfig::default();
    cfg.map.spec.preset = Some("cat-da".to_string());
    cfg.map.eps = 0.05;
    cfg.experiment.theorem = Theorem::LinearSanity;
    cfg.experiment.n_points = 16;
    cfg.experiment.n_steps = 1500;
    cfg.tolerances.tol_conv = 1.0;
    cfg.growth = Some(GrowthSection {
        radius: 0.002,
        h_max: 0.05,
        steps: 4,
    });

    let mut outputs = Vec::new();
    for workers in [1usize, 1, 8] {
        cfg.workers = Some(workers);
        let report = run_rigidity_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path(), 0.0).unwrap();
        let bytes = std::fs::read(dir.path().join("points.csv")).unwrap();
        assert_eq!(bytes, points_csv(&report).into_bytes());
        outputs.push(bytes);
    }
    let ok = outputs[0] == outputs[1] && outputs[1] == outputs[2];
    verdict_line(
        "10 determinism",
        ok,
        "points.csv byte-identical across repeats and 1-vs-8 workers",
    );
}

#[test]
fn fit_refit_consistency() {
    // the stored slope equals an explicit refit over the same window
    let f = preset("cat", 0.0).unwrap();
    let x = dvector![0.2, 0.6];
    let disk = seed_unstable_disk(&f, &x, 0.2, 0.05).unwrap();
    let series = anosov_lab::growth::evolve_and_measure(&f, &disk, 8, 0.05).unwrap();
    let refit = volume_growth_rate(&series, series.fit_window.0).unwrap();
    assert!((refit.chi_hat - series.chi_hat).abs() < 1e-12);
}
