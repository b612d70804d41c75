//! Unstable-disk volume growth in the universal cover: seeding disks inside
//! estimated unstable leaves, evolving them with adaptive refinement,
//! fitting the growth exponent, and measuring leaf shadowing radii and
//! (n, eps)-separated counts.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::lyapunov::{FrameState, LyapunovError};
use crate::maps::{wrap, DAMap, OrbitLift};
use crate::torus::{AdaptedMetric, ToralAutomorphism};

/// Hard cap on mesh vertices before a run is aborted.
pub const MESH_VERTEX_CAP: usize = 2_000_000;
/// Default number of initial steps excluded from the slope fit.
pub const DEFAULT_BURN_IN: usize = 3;

const SHARPEN_STEPS: usize = 8;
const FRAME_DEPTH: usize = 64;
const FRAME_DEPTH_CAP: usize = 512;
const FRAME_TOL: f64 = 1e-9;
const FRAME_SEED: u64 = 0x6A01;

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("frame iteration did not settle within the pullback cap")]
    NoSettledFrame,
    #[error("mesh exceeded the vertex cap ({vertices} vertices)")]
    MeshBlowup { vertices: usize },
    #[error("series too short for the requested fit window")]
    TooShort,
    #[error("operation unsupported for unstable dimension {dim}")]
    Unsupported { dim: usize },
    #[error("disk radius and mesh size must be positive")]
    BadParameter,
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
}

/// A meshed disk inside an estimated unstable leaf, carried as lift points
/// in R^d. Every vertex remembers the seed-chart parameter it came from, so
/// refinement can insert exact images of preimage midpoints instead of
/// interpolating between already-stretched image points.
#[derive(Debug, Clone)]
pub struct UnstableDisk {
    /// Intrinsic dimension of the disk (1 or 2).
    pub dim: usize,
    pub vertices: Vec<DVector<f64>>,
    /// Connectivity for dim 1: index pairs.
    pub segments: Vec<[usize; 2]>,
    /// Connectivity for dim 2: index triples.
    pub triangles: Vec<[usize; 3]>,
    /// Lift orbit of the disk center.
    pub anchor: OrbitLift,
    /// Log of the total adapted-metric length / area of the mesh.
    pub log_volume: f64,
    /// Max adapted-metric deviation of the seeded mesh from the affine
    /// tangent disk (dim 1), or the one-step invariance defect (dim 2).
    pub sharpening_residual: f64,
    params: Vec<DVector<f64>>,
    chart_origin: DVector<f64>,
    chart_frame: DMatrix<f64>,
    pre_steps: usize,
    evolved_steps: usize,
}

impl UnstableDisk {
    /// Exact current-time image of a seed-chart parameter.
    fn image_of_param(&self, f: &DAMap, p: &DVector<f64>) -> DVector<f64> {
        let mut v = &self.chart_origin + &self.chart_frame * p;
        for _ in 0..self.pre_steps + self.evolved_steps {
            v = f.lift_evaluate(&v);
        }
        v
    }

    fn element_logs(&self, metric: &AdaptedMetric) -> Vec<f64> {
        if self.dim == 1 {
            self.segments
                .iter()
                .map(|&[a, b]| metric.norm(&(&self.vertices[b] - &self.vertices[a])).ln())
                .collect()
        } else {
            self.triangles
                .iter()
                .map(|t| log_triangle_area(metric, &self.vertices, t))
                .collect()
        }
    }

    /// Recomputes log_volume from the element measures (the stored field
    /// must agree within 1e-10).
    pub fn recompute_log_volume(&self, metric: &AdaptedMetric) -> f64 {
        log_sum_exp(&self.element_logs(metric))
    }

    /// Longest edge of the mesh in the adapted metric.
    pub fn max_edge(&self, metric: &AdaptedMetric) -> f64 {
        let edge = |a: usize, b: usize| metric.norm(&(&self.vertices[b] - &self.vertices[a]));
        if self.dim == 1 {
            self.segments
                .iter()
                .map(|&[a, b]| edge(a, b))
                .fold(0.0, f64::max)
        } else {
            self.triangles
                .iter()
                .flat_map(|&[a, b, c]| [edge(a, b), edge(b, c), edge(c, a)])
                .fold(0.0, f64::max)
        }
    }
}

fn log_triangle_area(
    metric: &AdaptedMetric,
    vertices: &[DVector<f64>],
    tri: &[usize; 3],
) -> f64 {
    let ua = &vertices[tri[1]] - &vertices[tri[0]];
    let ub = &vertices[tri[2]] - &vertices[tri[0]];
    let la = metric.norm(&ua);
    let lb = metric.norm(&ub);
    let cos = (metric.dot(&ua, &ub) / (la * lb)).clamp(-1.0, 1.0);
    let sin2 = (1.0 - cos * cos).max(0.0);
    0.5f64.ln() + la.ln() + lb.ln() + 0.5 * sin2.ln()
}

/// log(sum(exp(l))) with compensated summation; safe against overflow of
/// individual element measures.
fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &l in logs {
        let y = (l - m).exp() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    m + sum.ln()
}

fn ceil_count(x: f64) -> usize {
    ((x - 1e-9).ceil().max(1.0)) as usize
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    let slope = if den > 0.0 { num / den } else { 0.0 };
    (my - slope * mx, slope)
}

/// Log-volume trace of an evolving disk with the fitted growth exponent.
#[derive(Debug, Clone)]
pub struct GrowthSeries {
    /// log Vol at n = 0..=N.
    pub log_volumes: Vec<f64>,
    /// Vertices inserted by refinement at each step (index 0 is zero).
    pub refinement_counts: Vec<usize>,
    /// Total vertex count after each step.
    pub vertex_counts: Vec<usize>,
    /// Least-squares slope of log_volumes over fit_window.
    pub chi_hat: f64,
    pub fit_window: (usize, usize),
    /// A-posteriori relative mesh error from a virtual uniform refinement
    /// of the final mesh.
    pub mesh_error_estimate: f64,
}

/// Slope refit of a growth series with per-step increments.
#[derive(Debug, Clone)]
pub struct GrowthFit {
    pub chi_hat: f64,
    pub increments: Vec<f64>,
}

/// Estimated unstable frame at x itself, obtained by pushing a frame
/// forward along the backward orbit ending at x. The pullback depth is
/// doubled until two successive depths agree; distinct depths use distinct
/// random seeds, so a genuinely ill-defined fast direction (tied moduli)
/// is reported as unsettled instead of silently picked.
fn frame_at(
    f: &DAMap,
    x: &DVector<f64>,
    k: usize,
    init_depth: usize,
    depth_cap: usize,
) -> Result<DMatrix<f64>, GrowthError> {
    let metric = &f.base.metric;
    let mut depth = init_depth;
    loop {
        let fa = pulled_frame(f, x, k, depth);
        let fb = pulled_frame(f, x, k, depth + 16);
        // sine of the largest principal angle, via the projection residual;
        // computing it from the cosine loses half the significand near zero
        let residual = &fb - &fa * (fa.transpose() * &metric.gram * &fb);
        let gap = (0..residual.ncols())
            .map(|j| metric.norm(&residual.column(j).into_owned()))
            .fold(0.0, f64::max);
        if gap <= FRAME_TOL {
            return Ok(fb);
        }
        depth *= 2;
        if depth > depth_cap {
            return Err(GrowthError::NoSettledFrame);
        }
    }
}

fn pulled_frame(f: &DAMap, x: &DVector<f64>, k: usize, depth: usize) -> DMatrix<f64> {
    let d = f.dim();
    let metric = &f.base.metric;
    let ident = DMatrix::identity(d, d);
    let u = metric.to_euclidean_coords(&ident);
    let u_inv = u.clone().lu().try_inverse().expect("metric factor invertible");
    let mut orbit = Vec::with_capacity(depth + 1);
    orbit.push(wrap(x));
    for i in 0..depth {
        orbit.push(f.inverse_evaluate(&orbit[i]));
    }
    let mut state = FrameState::seeded(
        orbit[depth].clone(),
        d,
        k,
        FRAME_SEED ^ depth as u64,
    );
    for i in (1..=depth).rev() {
        let jac = f.jacobian(&orbit[i]);
        let jac_ad = &u * jac * &u_inv;
        state.advance(&jac_ad, orbit[i - 1].clone());
    }
    u.lu().solve(&state.frame).expect("metric factor invertible")
}

fn dist_to_affine_subspace(
    metric: &AdaptedMetric,
    basis_on: &DMatrix<f64>,
    base: &DVector<f64>,
    v: &DVector<f64>,
) -> f64 {
    let w = v - base;
    let coeffs = basis_on.transpose() * &metric.gram * &w;
    metric.norm(&(w - basis_on * coeffs))
}

/// Seeds a radius-r disk tangent to the estimated unstable direction at x,
/// meshed with edge length at most h_max. For one-dimensional leaves of a
/// nonlinear map the disk is sharpened: a shrunken seed placed on the
/// backward orbit is pushed forward and trimmed to arc-length radius r, so
/// the mesh lies on the local unstable manifold up to the recorded residual.
pub fn seed_unstable_disk(
    f: &DAMap,
    x: &DVector<f64>,
    r: f64,
    h_max: f64,
) -> Result<UnstableDisk, GrowthError> {
    if r <= 0.0 || h_max <= 0.0 {
        return Err(GrowthError::BadParameter);
    }
    let dim = f.base.d_u;
    match dim {
        1 => seed_dim1(f, x, r, h_max),
        2 => seed_dim2(f, x, r, h_max),
        _ => Err(GrowthError::Unsupported { dim }),
    }
}

fn seed_dim1(
    f: &DAMap,
    x: &DVector<f64>,
    r: f64,
    h_max: f64,
) -> Result<UnstableDisk, GrowthError> {
    let metric = &f.base.metric;
    let n_seg = ceil_count(2.0 * r / h_max);
    let e0 = frame_at(f, &wrap(x), 1, FRAME_DEPTH, FRAME_DEPTH_CAP)?;

    if f.steps.is_empty() {
        // linear leaves are affine: the disk is the exact affine ball
        let mut vertices = Vec::with_capacity(n_seg + 1);
        let mut params = Vec::with_capacity(n_seg + 1);
        for k in 0..=n_seg {
            let t = -r + 2.0 * r * k as f64 / n_seg as f64;
            vertices.push(x + &e0 * t);
            params.push(DVector::from_element(1, t));
        }
        let segments: Vec<[usize; 2]> = (0..n_seg).map(|i| [i, i + 1]).collect();
        let mut disk = UnstableDisk {
            dim: 1,
            vertices,
            segments,
            triangles: Vec::new(),
            anchor: OrbitLift {
                base_point: wrap(x),
                lift_trace: vec![x.clone()],
            },
            log_volume: 0.0,
            sharpening_residual: 0.0,
            params,
            chart_origin: x.clone(),
            chart_frame: e0,
            pre_steps: 0,
            evolved_steps: 0,
        };
        disk.log_volume = disk.recompute_log_volume(metric);
        return Ok(disk);
    }

    // graph-transform surrogate: shrunken seed on the backward orbit,
    // pushed forward m times, then trimmed to arc-length radius r
    let m = SHARPEN_STEPS;
    let mut z = x.clone();
    for _ in 0..m {
        z = f.inverse_lift_evaluate(&z);
    }
    let em = frame_at(f, &wrap(&z), 1, FRAME_DEPTH, FRAME_DEPTH_CAP)?;
    let chart = |t: f64| -> DVector<f64> {
        let mut v = &z + &em * t;
        for _ in 0..m {
            v = f.lift_evaluate(&v);
        }
        v
    };

    let h_fine = (h_max / 4.0).min(r / 8.0);
    let mut r_back = 1.5 * r / f.base.unstable_rate().powi(m as i32);
    let mut attempt = 0;
    let (nodes, s_vals) = loop {
        let nodes = fine_polyline(&chart, metric, r_back, h_fine);
        let center = nodes
            .iter()
            .position(|(t, _)| *t == 0.0)
            .expect("center node present");
        let mut s_vals = vec![0.0; nodes.len()];
        for i in center + 1..nodes.len() {
            s_vals[i] = s_vals[i - 1] + metric.norm(&(&nodes[i].1 - &nodes[i - 1].1));
        }
        for i in (0..center).rev() {
            s_vals[i] = s_vals[i + 1] - metric.norm(&(&nodes[i + 1].1 - &nodes[i].1));
        }
        if s_vals[nodes.len() - 1] >= r && -s_vals[0] >= r {
            break (nodes, s_vals);
        }
        attempt += 1;
        if attempt > 10 {
            return Err(GrowthError::NoSettledFrame);
        }
        r_back *= 2.0;
    };

    let mut vertices = Vec::with_capacity(n_seg + 1);
    let mut params = Vec::with_capacity(n_seg + 1);
    for k in 0..=n_seg {
        let target = -r + 2.0 * r * k as f64 / n_seg as f64;
        let (t, v) = locate_arclength(&chart, metric, &nodes, &s_vals, target);
        params.push(DVector::from_element(1, t));
        vertices.push(v);
    }
    let segments: Vec<[usize; 2]> = (0..n_seg).map(|i| [i, i + 1]).collect();
    let anchor_lift = chart(0.0);
    let residual = vertices
        .iter()
        .map(|v| dist_to_affine_subspace(metric, &e0, &anchor_lift, v))
        .fold(0.0, f64::max);
    let mut disk = UnstableDisk {
        dim: 1,
        vertices,
        segments,
        triangles: Vec::new(),
        anchor: OrbitLift {
            base_point: wrap(&anchor_lift),
            lift_trace: vec![anchor_lift],
        },
        log_volume: 0.0,
        sharpening_residual: residual,
        params,
        chart_origin: z,
        chart_frame: em,
        pre_steps: m,
        evolved_steps: 0,
    };
    disk.log_volume = disk.recompute_log_volume(metric);
    Ok(disk)
}

/// Ordered fine sampling (t, chart(t)) of [-r_back, r_back] with image
/// chords at most h_fine; t = 0 is always a node.
fn fine_polyline(
    chart: &dyn Fn(f64) -> DVector<f64>,
    metric: &AdaptedMetric,
    r_back: f64,
    h_fine: f64,
) -> Vec<(f64, DVector<f64>)> {
    let coarse = 32usize;
    let mut nodes = Vec::new();
    let mut prev = (-r_back, chart(-r_back));
    nodes.push(prev.clone());
    for k in 1..=2 * coarse {
        let t = -r_back + r_back * k as f64 / coarse as f64;
        let t = if k == coarse { 0.0 } else { t };
        let cur = (t, chart(t));
        subdivide_chord(chart, metric, &prev, &cur, h_fine, 0, &mut nodes);
        nodes.push(cur.clone());
        prev = cur;
    }
    nodes
}

fn subdivide_chord(
    chart: &dyn Fn(f64) -> DVector<f64>,
    metric: &AdaptedMetric,
    a: &(f64, DVector<f64>),
    b: &(f64, DVector<f64>),
    h_fine: f64,
    depth: usize,
    out: &mut Vec<(f64, DVector<f64>)>,
) {
    if depth >= 24 || metric.norm(&(&b.1 - &a.1)) <= h_fine {
        return;
    }
    let tm = 0.5 * (a.0 + b.0);
    let mid = (tm, chart(tm));
    subdivide_chord(chart, metric, a, &mid, h_fine, depth + 1, out);
    out.push(mid.clone());
    subdivide_chord(chart, metric, &mid, b, h_fine, depth + 1, out);
}

/// Finds the chart parameter at signed arc length `target` along the fine
/// polyline by bisection; returns the parameter and its exact image.
fn locate_arclength(
    chart: &dyn Fn(f64) -> DVector<f64>,
    metric: &AdaptedMetric,
    nodes: &[(f64, DVector<f64>)],
    s_vals: &[f64],
    target: f64,
) -> (f64, DVector<f64>) {
    let i = match s_vals.partition_point(|s| *s < target) {
        0 => 0,
        p => p - 1,
    };
    let i = i.min(nodes.len() - 2);
    let (mut lo, mut hi) = (nodes[i].0, nodes[i + 1].0);
    let base_s = s_vals[i];
    let base_v = &nodes[i].1;
    let arc_at = |t: f64| -> (f64, DVector<f64>) {
        let v = chart(t);
        (base_s + metric.norm(&(&v - base_v)), v)
    };
    let mut best = arc_at(0.5 * (lo + hi));
    let mut best_t = 0.5 * (lo + hi);
    for _ in 0..60 {
        let tm = 0.5 * (lo + hi);
        let (s, v) = arc_at(tm);
        best = (s, v);
        best_t = tm;
        if s < target {
            lo = tm;
        } else {
            hi = tm;
        }
        if hi - lo <= f64::EPSILON * (1.0 + best_t.abs()) {
            break;
        }
    }
    (best_t, best.1)
}

fn seed_dim2(
    f: &DAMap,
    x: &DVector<f64>,
    r: f64,
    h_max: f64,
) -> Result<UnstableDisk, GrowthError> {
    let metric = &f.base.metric;
    let frame = frame_at(f, &wrap(x), 2, FRAME_DEPTH, FRAME_DEPTH_CAP)?;
    let rings = ceil_count(2.0 * r / h_max);
    let mut vertices = vec![x.clone()];
    let mut params = vec![DVector::zeros(2)];
    let mut ring_start = vec![0usize];
    for j in 1..=rings {
        let radius = r * j as f64 / rings as f64;
        let count = 8 * j;
        ring_start.push(vertices.len());
        for i in 0..count {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let p = DVector::from_vec(vec![radius * theta.cos(), radius * theta.sin()]);
            vertices.push(x + &frame * &p);
            params.push(p);
        }
    }
    let mut triangles = Vec::new();
    for j in 1..=rings {
        let outer: Vec<usize> = (ring_start[j]..ring_start[j] + 8 * j).collect();
        if j == 1 {
            for i in 0..outer.len() {
                triangles.push([0, outer[i], outer[(i + 1) % outer.len()]]);
            }
        } else {
            let inner: Vec<usize> = (ring_start[j - 1]..ring_start[j - 1] + 8 * (j - 1)).collect();
            stitch_rings(&inner, &outer, &mut triangles);
        }
    }

    // one-step invariance defect of the flat seed: image vertices against
    // the affine unstable plane at f(x)
    let frame_next = frame_at(f, &f.evaluate(&wrap(x)), 2, FRAME_DEPTH, FRAME_DEPTH_CAP)?;
    let anchor_next = f.lift_evaluate(x);
    let residual = vertices
        .iter()
        .map(|v| dist_to_affine_subspace(metric, &frame_next, &anchor_next, &f.lift_evaluate(v)))
        .fold(0.0, f64::max);

    let mut disk = UnstableDisk {
        dim: 2,
        vertices,
        segments: Vec::new(),
        triangles,
        anchor: OrbitLift {
            base_point: wrap(x),
            lift_trace: vec![x.clone()],
        },
        log_volume: 0.0,
        sharpening_residual: residual,
        params,
        chart_origin: x.clone(),
        chart_frame: frame,
        pre_steps: 0,
        evolved_steps: 0,
    };
    disk.log_volume = disk.recompute_log_volume(metric);
    Ok(disk)
}

/// Triangulates the annulus between two concentric vertex rings by walking
/// both rings in angle order.
fn stitch_rings(inner: &[usize], outer: &[usize], triangles: &mut Vec<[usize; 3]>) {
    let (ni, no) = (inner.len(), outer.len());
    let angle = |k: usize, n: usize| k as f64 / n as f64;
    let (mut a, mut b) = (0usize, 0usize);
    while a < ni || b < no {
        let next_inner = a < ni && (b >= no || angle(a + 1, ni) <= angle(b + 1, no));
        if next_inner {
            triangles.push([inner[a % ni], outer[b % no], inner[(a + 1) % ni]]);
            a += 1;
        } else {
            triangles.push([inner[a % ni], outer[b % no], outer[(b + 1) % no]]);
            b += 1;
        }
    }
}

/// Evolves the disk n steps under the lift of f, refining after every step
/// so all edges stay below h_max, and records the log-volume series.
pub fn evolve_and_measure(
    f: &DAMap,
    disk: &UnstableDisk,
    n: usize,
    h_max: f64,
) -> Result<GrowthSeries, GrowthError> {
    evolve_internal(f, disk, n, h_max, MESH_VERTEX_CAP, false).map(|(s, _)| s)
}

/// Same as `evolve_and_measure` but also returns the disk after every step
/// (index 0 is the seed) for shadowing measurements.
pub fn evolve_collecting(
    f: &DAMap,
    disk: &UnstableDisk,
    n: usize,
    h_max: f64,
) -> Result<(GrowthSeries, Vec<UnstableDisk>), GrowthError> {
    evolve_internal(f, disk, n, h_max, MESH_VERTEX_CAP, true)
        .map(|(s, d)| (s, d.expect("snapshots requested")))
}

fn evolve_internal(
    f: &DAMap,
    disk0: &UnstableDisk,
    n: usize,
    h_max: f64,
    cap: usize,
    collect: bool,
) -> Result<(GrowthSeries, Option<Vec<UnstableDisk>>), GrowthError> {
    if n == 0 || h_max <= 0.0 {
        return Err(GrowthError::BadParameter);
    }
    let metric = &f.base.metric;
    let mut disk = disk0.clone();
    disk.log_volume = disk.recompute_log_volume(metric);
    let mut log_volumes = vec![disk.log_volume];
    let mut refinement_counts = vec![0usize];
    let mut vertex_counts = vec![disk.vertices.len()];
    let mut snapshots = collect.then(|| vec![disk.clone()]);

    for _ in 0..n {
        disk.vertices = map_vertices(f, &disk.vertices);
        disk.evolved_steps += 1;
        let next_anchor = f.lift_evaluate(disk.anchor.lift_trace.last().expect("anchor lift"));
        disk.anchor.lift_trace.push(next_anchor);
        let before = disk.vertices.len();
        refine(f, &mut disk, h_max, cap)?;
        refinement_counts.push(disk.vertices.len() - before);
        vertex_counts.push(disk.vertices.len());
        disk.log_volume = disk.recompute_log_volume(metric);
        log_volumes.push(disk.log_volume);
        if let Some(snaps) = snapshots.as_mut() {
            snaps.push(disk.clone());
        }
    }

    let mesh_error_estimate = virtual_refinement_error(f, &disk, metric);
    let burn_in = if log_volumes.len() >= DEFAULT_BURN_IN + 3 {
        DEFAULT_BURN_IN
    } else {
        0
    };
    let xs: Vec<f64> = (burn_in..log_volumes.len()).map(|i| i as f64).collect();
    let ys: Vec<f64> = log_volumes[burn_in..].to_vec();
    let (_, chi_hat) = linear_fit(&xs, &ys);
    let series = GrowthSeries {
        log_volumes,
        refinement_counts,
        vertex_counts,
        chi_hat,
        fit_window: (burn_in, n),
        mesh_error_estimate,
    };
    Ok((series, snapshots))
}

fn map_vertices(f: &DAMap, vertices: &[DVector<f64>]) -> Vec<DVector<f64>> {
    if vertices.len() > 512 {
        vertices.par_iter().map(|v| f.lift_evaluate(v)).collect()
    } else {
        vertices.iter().map(|v| f.lift_evaluate(v)).collect()
    }
}

fn refine(
    f: &DAMap,
    disk: &mut UnstableDisk,
    h_max: f64,
    cap: usize,
) -> Result<(), GrowthError> {
    if disk.dim == 1 {
        refine_segments(f, disk, h_max, cap)
    } else {
        refine_triangles(f, disk, h_max, cap)
    }
}

fn refine_segments(
    f: &DAMap,
    disk: &mut UnstableDisk,
    h_max: f64,
    cap: usize,
) -> Result<(), GrowthError> {
    let metric = f.base.metric.clone();
    let mut queue: VecDeque<usize> = (0..disk.segments.len()).collect();
    while let Some(si) = queue.pop_front() {
        let [a, b] = disk.segments[si];
        if metric.norm(&(&disk.vertices[b] - &disk.vertices[a])) <= h_max {
            continue;
        }
        if disk.vertices.len() >= cap {
            return Err(GrowthError::MeshBlowup {
                vertices: disk.vertices.len(),
            });
        }
        let pm = (&disk.params[a] + &disk.params[b]) * 0.5;
        let vm = disk.image_of_param(f, &pm);
        disk.vertices.push(vm);
        disk.params.push(pm);
        let mi = disk.vertices.len() - 1;
        disk.segments[si] = [a, mi];
        disk.segments.push([mi, b]);
        queue.push_back(si);
        queue.push_back(disk.segments.len() - 1);
    }
    Ok(())
}

fn refine_triangles(
    f: &DAMap,
    disk: &mut UnstableDisk,
    h_max: f64,
    cap: usize,
) -> Result<(), GrowthError> {
    while refine_triangle_pass(f, disk, h_max, cap)? {}
    Ok(())
}

/// One conforming refinement pass: splits every edge above h_max once.
/// Returns whether anything was split.
fn refine_triangle_pass(
    f: &DAMap,
    disk: &mut UnstableDisk,
    h_max: f64,
    cap: usize,
) -> Result<bool, GrowthError> {
    let metric = f.base.metric.clone();
    let mut long: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for tri in &disk.triangles {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            let key = (a.min(b), a.max(b));
            if long.contains_key(&key) {
                continue;
            }
            if metric.norm(&(&disk.vertices[b] - &disk.vertices[a])) > h_max {
                long.insert(key, usize::MAX);
            }
        }
    }
    if long.is_empty() {
        return Ok(false);
    }
    if disk.vertices.len() + long.len() > cap {
        return Err(GrowthError::MeshBlowup {
            vertices: disk.vertices.len() + long.len(),
        });
    }
    for (&(a, b), slot) in long.iter_mut() {
        let pm = (&disk.params[a] + &disk.params[b]) * 0.5;
        let vm = disk.image_of_param(f, &pm);
        disk.vertices.push(vm);
        disk.params.push(pm);
        *slot = disk.vertices.len() - 1;
    }
    let mid = |a: usize, b: usize| long.get(&(a.min(b), a.max(b))).copied();
    let mut next = Vec::with_capacity(disk.triangles.len() * 2);
    for &tri in &disk.triangles {
        split_triangle(tri, &mid, &mut next);
    }
    disk.triangles = next;
    Ok(true)
}

/// Conforming split of one triangle given the set of globally-split edges;
/// 1, 2 or 3 split edges give 2, 3 or 4 children.
fn split_triangle(
    tri: [usize; 3],
    mid: &dyn Fn(usize, usize) -> Option<usize>,
    out: &mut Vec<[usize; 3]>,
) {
    let mids = [
        mid(tri[0], tri[1]),
        mid(tri[1], tri[2]),
        mid(tri[2], tri[0]),
    ];
    let count = mids.iter().flatten().count();
    match count {
        0 => out.push(tri),
        3 => {
            let (mab, mbc, mca) = (mids[0].unwrap(), mids[1].unwrap(), mids[2].unwrap());
            out.push([tri[0], mab, mca]);
            out.push([mab, tri[1], mbc]);
            out.push([mca, mbc, tri[2]]);
            out.push([mab, mbc, mca]);
        }
        _ => {
            // rotate so the first edge is split
            let mut t = tri;
            let mut m = mids;
            while m[0].is_none() {
                t = [t[1], t[2], t[0]];
                m = [m[1], m[2], m[0]];
            }
            let mab = m[0].unwrap();
            if count == 1 {
                out.push([t[0], mab, t[2]]);
                out.push([mab, t[1], t[2]]);
            } else {
                // rotate once more if the split pair is (ab, ca)
                if m[1].is_none() {
                    t = [t[2], t[0], t[1]];
                    m = [m[2], m[0], m[1]];
                }
                let (mab, mbc) = (m[0].unwrap(), m[1].unwrap());
                out.push([t[1], mbc, mab]);
                out.push([t[0], mab, mbc]);
                out.push([t[0], mbc, t[2]]);
            }
        }
    }
}

/// Relative log-volume change a uniform refinement of the final mesh would
/// produce: an a-posteriori bound on the flat-element discretization error.
fn virtual_refinement_error(f: &DAMap, disk: &UnstableDisk, metric: &AdaptedMetric) -> f64 {
    let coarse = disk.recompute_log_volume(metric);
    let fine = if disk.dim == 1 {
        let mut logs = Vec::with_capacity(disk.segments.len() * 2);
        for &[a, b] in &disk.segments {
            let pm = (&disk.params[a] + &disk.params[b]) * 0.5;
            let vm = disk.image_of_param(f, &pm);
            logs.push(metric.norm(&(&vm - &disk.vertices[a])).ln());
            logs.push(metric.norm(&(&disk.vertices[b] - &vm)).ln());
        }
        log_sum_exp(&logs)
    } else {
        let mut refined = disk.clone();
        let cap = disk.vertices.len() * 4 + 16;
        // split every edge once: a zero threshold makes a single pass uniform
        match refine_triangle_pass(f, &mut refined, 0.0, cap) {
            Ok(_) => refined.recompute_log_volume(metric),
            Err(_) => return f64::NAN,
        }
    };
    (fine - coarse).abs()
}

/// Refits the growth exponent over [burn_in, N] and returns the per-step
/// increments for limsup-style diagnostics.
pub fn volume_growth_rate(series: &GrowthSeries, burn_in: usize) -> Result<GrowthFit, GrowthError> {
    let len = series.log_volumes.len();
    if len < burn_in + 3 {
        return Err(GrowthError::TooShort);
    }
    let xs: Vec<f64> = (burn_in..len).map(|i| i as f64).collect();
    let ys: Vec<f64> = series.log_volumes[burn_in..].to_vec();
    let (_, chi_hat) = linear_fit(&xs, &ys);
    let increments = series
        .log_volumes
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect();
    Ok(GrowthFit { chi_hat, increments })
}

/// For each disk in the orbit, the sup over vertices of the adapted-metric
/// stable-projection distance to the translated unstable plane of `a`
/// through the anchor lift. Bounded sequences certify leaf shadowing.
pub fn shadowing_radius(
    f: &DAMap,
    disk_orbit: &[UnstableDisk],
    a: &ToralAutomorphism,
) -> Vec<f64> {
    assert_eq!(f.dim(), a.dim(), "map and automorphism dimensions differ");
    let proj_s = a.stable_projection();
    let metric = &a.metric;
    disk_orbit
        .iter()
        .map(|disk| {
            let anchor = disk.anchor.lift_trace.last().expect("anchor lift");
            disk.vertices
                .iter()
                .map(|v| metric.norm(&(&proj_s * (v - anchor))))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Maximal (n, eps) u-separated set of mesh vertices under the dynamical
/// leaf metric rho_n = max over 0 <= j < n of arc-length distance along the
/// j-th image polyline. Greedy sweep in leaf order; arc-length coordinates
/// are monotone along the polyline, so the sweep only needs the last
/// selected point and realizes a maximal packing.
pub fn separated_count(
    f: &DAMap,
    disk: &UnstableDisk,
    n: usize,
    eps: f64,
) -> Result<usize, GrowthError> {
    let tables = arc_length_tables(f, disk, n)?;
    if eps <= 0.0 {
        return Err(GrowthError::BadParameter);
    }
    let Some(first) = tables.first() else {
        return Ok(0);
    };
    let count = first.len();
    let guard = eps * (1.0 - 1e-9);
    let mut selected = 0usize;
    let mut last: Option<usize> = None;
    for k in 0..count {
        let ok = match last {
            None => true,
            Some(l) => tables.iter().map(|s| s[k] - s[l]).fold(0.0, f64::max) >= guard,
        };
        if ok {
            selected += 1;
            last = Some(k);
        }
    }
    Ok(selected)
}

/// Arc-length coordinate of every vertex (in leaf order) along the j-th
/// image polyline, for j = 0..n. The mesh is not refined during the
/// evolution: candidate points are the seed vertices, and chord sums over
/// the seed resolution approximate the image arc lengths.
fn arc_length_tables(
    f: &DAMap,
    disk: &UnstableDisk,
    n: usize,
) -> Result<Vec<Vec<f64>>, GrowthError> {
    if disk.dim != 1 {
        return Err(GrowthError::Unsupported { dim: disk.dim });
    }
    if n == 0 {
        return Err(GrowthError::TooShort);
    }
    if disk.vertices.is_empty() {
        return Ok(Vec::new());
    }
    let metric = &f.base.metric;
    let mut order: Vec<usize> = (0..disk.vertices.len()).collect();
    order.sort_by(|&i, &j| disk.params[i][0].total_cmp(&disk.params[j][0]));
    let mut verts: Vec<DVector<f64>> = order.iter().map(|&i| disk.vertices[i].clone()).collect();
    let mut tables = Vec::with_capacity(n);
    for j in 0..n {
        if j > 0 {
            verts = map_vertices(f, &verts);
        }
        let mut s = Vec::with_capacity(verts.len());
        s.push(0.0);
        for k in 1..verts.len() {
            s.push(s[k - 1] + metric.norm(&(&verts[k] - &verts[k - 1])));
        }
        tables.push(s);
    }
    Ok(tables)
}

/// Exact maximum separated count by dynamic programming over the leaf
/// order; quadratic reference oracle for validating the greedy sweep on
/// small meshes.
pub fn separated_count_exact(
    f: &DAMap,
    disk: &UnstableDisk,
    n: usize,
    eps: f64,
) -> Result<usize, GrowthError> {
    let tables = arc_length_tables(f, disk, n)?;
    if tables.is_empty() {
        return Ok(0);
    }
    let count = tables[0].len();
    let guard = eps * (1.0 - 1e-9);
    let dist = |a: usize, b: usize| tables.iter().map(|s| (s[b] - s[a]).abs()).fold(0.0, f64::max);
    let mut dp = vec![1usize; count];
    let mut best = 0usize;
    for i in 0..count {
        for j in 0..i {
            if dist(j, i) >= guard {
                dp[i] = dp[i].max(dp[j] + 1);
            }
        }
        best = best.max(dp[i]);
    }
    Ok(best)
}
