//! Volume-preserving deformations of a linear Anosov automorphism:
//! f = A ∘ h_k ∘ … ∘ h_1 where each h is a periodic shear with unit
//! Jacobian determinant and a closed-form inverse.

use crate::torus::{build_automorphism, IntMatrix, ToralAutomorphism, TorusError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("step {index} is not a diffeomorphism: |eps| * sup|phi'| = {bound} >= 1")]
    NotDiffeo { index: usize, bound: f64 },
    #[error("shear step reads and writes the same coordinate {0}")]
    SelfShear(usize),
    #[error("shear direction must vanish on the read coordinate {read}")]
    DirectionNotTriangular { read: usize },
    #[error("coordinate index {index} out of range for dimension {dim}")]
    BadCoordinate { index: usize, dim: usize },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Torus(#[from] TorusError),
}

/// C^2 periodic profile with closed-form derivative and known sup norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Sine,
    SmoothstepPeriodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub kind: ProfileKind,
    pub frequency: u32,
    pub phase: f64,
}

impl BumpProfile {
    pub fn sine(frequency: u32) -> Self {
        BumpProfile {
            kind: ProfileKind::Sine,
            frequency,
            phase: 0.0,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let u = (self.frequency as f64 * t + self.phase).rem_euclid(1.0);
        match self.kind {
            ProfileKind::Sine => (2.0 * std::f64::consts::PI * u).sin(),
            ProfileKind::SmoothstepPeriodic => {
                // C^2 mirrored smootherstep bump rising on [0, 1/2]
                let s = if u < 0.5 { 2.0 * u } else { 2.0 - 2.0 * u };
                s * s * s * (s * (6.0 * s - 15.0) + 10.0)
            }
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let u = (self.frequency as f64 * t + self.phase).rem_euclid(1.0);
        let f = self.frequency as f64;
        match self.kind {
            ProfileKind::Sine => {
                2.0 * std::f64::consts::PI * f * (2.0 * std::f64::consts::PI * u).cos()
            }
            ProfileKind::SmoothstepPeriodic => {
                let (s, sign) = if u < 0.5 {
                    (2.0 * u, 2.0)
                } else {
                    (2.0 - 2.0 * u, -2.0)
                };
                f * sign * 30.0 * s * s * (s - 1.0) * (s - 1.0)
            }
        }
    }

    /// sup |phi| (exact, by construction both profiles peak at 1).
    pub fn sup_value(&self) -> f64 {
        1.0
    }

    /// sup |phi'| in closed form.
    pub fn sup_derivative(&self) -> f64 {
        let f = self.frequency as f64;
        match self.kind {
            ProfileKind::Sine => 2.0 * std::f64::consts::PI * f,
            // max of 30 s^2 (1-s)^2 on [0,1] is 30/16 at s = 1/2, times the
            // inner slope 2
            ProfileKind::SmoothstepPeriodic => f * 2.0 * 30.0 / 16.0,
        }
    }
}

/// One elementary volume-preserving shear h(x) = x + eps * phi(x_read) * u,
/// with u = e_write or a given unit vector vanishing on the read coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShearStep {
    pub read_coord: usize,
    pub write_coord: usize,
    pub amplitude: f64,
    pub profile: BumpProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
}

impl ShearStep {
    pub fn new(read: usize, write: usize, amplitude: f64, profile: BumpProfile) -> Self {
        ShearStep {
            read_coord: read,
            write_coord: write,
            amplitude,
            profile,
            direction: None,
        }
    }

    fn validate(&self, index: usize, dim: usize) -> Result<DVector<f64>, MapError> {
        for idx in [self.read_coord, self.write_coord] {
            if idx >= dim {
                return Err(MapError::BadCoordinate { index: idx, dim });
            }
        }
        let dir = match &self.direction {
            None => {
                if self.read_coord == self.write_coord {
                    return Err(MapError::SelfShear(self.read_coord));
                }
                let mut e = DVector::zeros(dim);
                e[self.write_coord] = 1.0;
                e
            }
            Some(v) => {
                if v.len() != dim {
                    return Err(MapError::BadCoordinate { index: v.len(), dim });
                }
                let mut d = DVector::from_vec(v.clone());
                if d[self.read_coord].abs() > 1e-14 {
                    return Err(MapError::DirectionNotTriangular {
                        read: self.read_coord,
                    });
                }
                let n = d.norm();
                if n == 0.0 {
                    return Err(MapError::BadCoordinate { index: dim, dim });
                }
                d /= n;
                d
            }
        };
        let bound = self.amplitude.abs() * self.profile.sup_derivative();
        if bound >= 1.0 {
            return Err(MapError::NotDiffeo { index, bound });
        }
        Ok(dir)
    }
}

/// A DA diffeomorphism f = A ∘ h_k ∘ … ∘ h_1 with analytic Jacobian, exact
/// lift and closed-form inverse. Immutable after construction.
#[derive(Debug, Clone)]
pub struct DAMap {
    pub base: ToralAutomorphism,
    pub steps: Vec<ShearStep>,
    pub label: String,
    /// sup-norm bound on f_lift - A_lift, from the amplitude bounds.
    pub displacement_bound: f64,
    /// sup over steps of the analytic bound on ||Dh - I||.
    pub derivative_perturbation: f64,
    directions: Vec<DVector<f64>>,
    a_mat: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    /// Diagnostics-only dilation of one coordinate after the last shear;
    /// breaks volume preservation when != 1.
    diagnostic_dilation: f64,
}

/// Continuous lift of an orbit: consecutive points satisfy
/// lift[n+1] = f_lift(lift[n]) with no re-wrapping.
#[derive(Debug, Clone)]
pub struct OrbitLift {
    pub base_point: DVector<f64>,
    pub lift_trace: Vec<DVector<f64>>,
}

pub fn make_shear_da(
    a: ToralAutomorphism,
    steps: Vec<ShearStep>,
    label: impl Into<String>,
) -> Result<DAMap, MapError> {
    let dim = a.dim();
    let mut directions = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        directions.push(s.validate(i, dim)?);
    }
    let a_mat = a.as_dmatrix();
    let op_norm = a_mat.clone().svd(false, false).singular_values.max();
    let shear_sup: f64 = steps
        .iter()
        .map(|s| s.amplitude.abs() * s.profile.sup_value())
        .sum();
    let displacement_bound = op_norm * shear_sup;
    let derivative_perturbation = steps
        .iter()
        .map(|s| s.amplitude.abs() * s.profile.sup_derivative())
        .fold(0.0, f64::max);
    let a_inv = a.matrix.inverse_exact().to_dmatrix();
    Ok(DAMap {
        base: a,
        steps,
        label: label.into(),
        displacement_bound,
        derivative_perturbation,
        directions,
        a_mat,
        a_inv,
        diagnostic_dilation: 1.0,
    })
}

pub fn wrap(x: &DVector<f64>) -> DVector<f64> {
    x.map(|c| c.rem_euclid(1.0))
}

impl DAMap {
    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Diagnostics-only: scale one coordinate after the shears so the map is
    /// no longer volume preserving. Used to exercise det != +-1 detection.
    pub fn with_diagnostic_dilation(mut self, factor: f64) -> Self {
        self.diagnostic_dilation = factor;
        self
    }

    pub fn is_conservative(&self) -> bool {
        (self.diagnostic_dilation - 1.0).abs() < 1e-15
    }

    /// f(x) reduced mod Z^d.
    pub fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        wrap(&self.lift_evaluate(x))
    }

    /// The lift f~(x~) = A x~ + periodic displacement.
    pub fn lift_evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        for (s, dir) in self.steps.iter().zip(&self.directions) {
            let bump = s.amplitude * s.profile.value(y[s.read_coord]);
            y += dir * bump;
        }
        if self.diagnostic_dilation != 1.0 {
            y[0] *= self.diagnostic_dilation;
        }
        &self.a_mat * y
    }

    /// Exact chain-rule Jacobian A * Dh_k(...) * ... * Dh_1(x).
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut y = x.clone();
        let mut jac = DMatrix::identity(d, d);
        for (s, dir) in self.steps.iter().zip(&self.directions) {
            let slope = s.amplitude * s.profile.derivative(y[s.read_coord]);
            // Dh = I + slope * dir * e_read^T; apply to accumulated jacobian
            let row = jac.row(s.read_coord).into_owned();
            for i in 0..d {
                for j in 0..d {
                    jac[(i, j)] += slope * dir[i] * row[j];
                }
            }
            let bump = s.amplitude * s.profile.value(y[s.read_coord]);
            y += dir * bump;
        }
        if self.diagnostic_dilation != 1.0 {
            let row = jac.row(0) * (self.diagnostic_dilation - 1.0);
            for j in 0..d {
                jac[(0, j)] += row[j];
            }
        }
        &self.a_mat * jac
    }

    /// x with f(x) = y; shears invert in closed form since the read
    /// coordinate is unchanged by the shear itself.
    pub fn inverse_evaluate(&self, y: &DVector<f64>) -> DVector<f64> {
        wrap(&self.inverse_lift_evaluate(y))
    }

    /// Lift of the inverse map.
    pub fn inverse_lift_evaluate(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut x = &self.a_inv * y;
        if self.diagnostic_dilation != 1.0 {
            x[0] /= self.diagnostic_dilation;
        }
        for (s, dir) in self.steps.iter().zip(&self.directions).rev() {
            let bump = s.amplitude * s.profile.value(x[s.read_coord]);
            x -= dir * bump;
        }
        x
    }

    /// Jacobian of the inverse map at y, in closed form.
    pub fn inverse_jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut x = &self.a_inv * y;
        if self.diagnostic_dilation != 1.0 {
            x[0] /= self.diagnostic_dilation;
        }
        let mut jac = self.a_inv.clone();
        if self.diagnostic_dilation != 1.0 {
            let row = jac.row(0) * (1.0 / self.diagnostic_dilation - 1.0);
            for j in 0..d {
                jac[(0, j)] += row[j];
            }
        }
        for (s, dir) in self.steps.iter().zip(&self.directions).rev() {
            let slope = s.amplitude * s.profile.derivative(x[s.read_coord]);
            // Dh^{-1} = I - slope * dir * e_read^T evaluated at the preimage
            let row = jac.row(s.read_coord).into_owned();
            for i in 0..d {
                for j in 0..d {
                    jac[(i, j)] -= slope * dir[i] * row[j];
                }
            }
            let bump = s.amplitude * s.profile.value(x[s.read_coord]);
            x -= dir * bump;
        }
        jac
    }

    /// Continuous forward orbit lift of length n+1 starting at x.
    pub fn orbit_lift(&self, x: &DVector<f64>, n: usize) -> OrbitLift {
        let mut trace = Vec::with_capacity(n + 1);
        trace.push(x.clone());
        for _ in 0..n {
            let next = self.lift_evaluate(trace.last().unwrap());
            trace.push(next);
        }
        OrbitLift {
            base_point: wrap(x),
            lift_trace: trace,
        }
    }
}

/// Declarative map description, as read from config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub steps: Vec<ShearStep>,
}

/// Named preset families. `eps` scales the shear amplitudes.
pub fn preset(name: &str, eps: f64) -> Result<DAMap, MapError> {
    match name {
        "cat" => make_shear_da(
            build_automorphism(IntMatrix::new(2, vec![2, 1, 1, 1])?)?,
            vec![],
            "cat",
        ),
        "cat-da" => {
            let a = build_automorphism(IntMatrix::new(2, vec![2, 1, 1, 1])?)?;
            make_shear_da(
                a,
                vec![
                    ShearStep::new(0, 1, eps, BumpProfile::sine(1)),
                    ShearStep::new(1, 0, -0.5 * eps, BumpProfile::sine(2)),
                ],
                format!("cat-da-{eps}"),
            )
        }
        "tribonacci" => make_shear_da(
            build_automorphism(IntMatrix::new(3, vec![0, 0, 1, 1, 0, 1, 0, 1, 1])?)?,
            vec![],
            "tribonacci",
        ),
        "tribonacci-da" => {
            let a = build_automorphism(IntMatrix::new(3, vec![0, 0, 1, 1, 0, 1, 0, 1, 1])?)?;
            make_shear_da(
                a,
                vec![
                    ShearStep::new(0, 2, eps, BumpProfile::sine(1)),
                    ShearStep::new(2, 1, eps, BumpProfile::sine(1)),
                ],
                format!("tribonacci-da-{eps}"),
            )
        }
        // radial-bump shears concentrated near the fixed point 0, weakening
        // contraction along one stable direction of the 3-torus automorphism
        "katok-da-3d" => {
            let a = build_automorphism(IntMatrix::new(3, vec![0, 0, 1, 1, 0, 1, 0, 1, 1])?)?;
            let bump = BumpProfile {
                kind: ProfileKind::SmoothstepPeriodic,
                frequency: 1,
                phase: 0.5,
            };
            make_shear_da(
                a,
                vec![
                    ShearStep::new(0, 1, eps, bump),
                    ShearStep::new(1, 2, eps, bump),
                    ShearStep::new(2, 0, -eps, bump),
                ],
                format!("katok-da-3d-{eps}"),
            )
        }
        "cat4" => make_shear_da(
            build_automorphism(IntMatrix::new(
                4,
                vec![2, 1, 0, 0, 1, 1, 0, 0, 0, 0, 2, 1, 0, 0, 1, 1],
            )?)?,
            vec![],
            "cat4",
        ),
        other => Err(MapError::UnknownPreset(other.to_string())),
    }
}

/// Resolves a declarative spec into a map over the given base automorphism.
pub fn build_from_spec(base: ToralAutomorphism, spec: &MapSpec, eps: f64) -> Result<DAMap, MapError> {
    if let Some(name) = &spec.preset {
        return preset(name, eps);
    }
    let label = spec.label.clone().unwrap_or_else(|| "custom".to_string());
    make_shear_da(base, spec.steps.clone(), label)
}

/// Conservative preset labels used by the experiment suites.
pub fn conservative_preset_labels() -> Vec<(&'static str, f64)> {
    vec![
        ("cat", 0.0),
        ("cat-da", 0.02),
        ("cat-da", 0.05),
        ("cat-da", 0.1),
        ("tribonacci", 0.0),
        ("tribonacci-da", 0.02),
        ("tribonacci-da", 0.05),
        ("tribonacci-da", 0.1),
        ("katok-da-3d", 0.05),
        ("cat4", 0.0),
    ]
}
