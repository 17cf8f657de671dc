//! DH parameter identification from measured end-effector poses.
//!
//! Residuals between measured and model poses are linearized with the
//! identification Jacobian and the correction is found by a box-constrained
//! least-squares solve (bounded-variable active set). The linearization is
//! iterated Gauss-Newton style with step halving.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{forward_kinematics, pose_difference, DhChain, GeomError, IdentificationJacobian, ParamDelta, ParamMask, Pose};

#[derive(Debug, Error, Clone)]
pub enum CalibError {
    #[error("box-constrained solve exceeded {0} active-set iterations")]
    MaxIterations(usize),
    #[error("{got} measurements cannot determine {free} free parameters (need at least {need})")]
    InsufficientData { got: usize, free: usize, need: usize },
    #[error("calibration did not converge within {} iterations", .0.iterations)]
    NotConverged(Box<CalibrationResult>),
    #[error("bounds must satisfy lower <= 0 <= upper for every free parameter")]
    InvalidBounds,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("accuracy is undefined for true offset {true_offset} and estimate {estimate}")]
    Undefined { true_offset: f64, estimate: f64 },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// One calibration measurement: the encoder joint vector and the externally
/// measured end-effector pose at that configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub theta: Vec<f64>,
    pub measured: Pose,
}

/// Stacked residual `Δ_n = [ℐ_n] − [ℱ_n]`, 7 rows per measurement.
#[derive(Debug, Clone)]
pub struct ResidualStack {
    pub delta: DVector<f64>,
    pub thetas: Vec<Vec<f64>>,
}

impl ResidualStack {
    pub fn norm(&self) -> f64 {
        self.delta.norm()
    }
}

pub fn build_residuals(measurements: &[Measurement], chain: &DhChain) -> ResidualStack {
    let mut delta = DVector::zeros(7 * measurements.len());
    for (i, m) in measurements.iter().enumerate() {
        let d = pose_difference(&m.measured, &forward_kinematics(chain, &m.theta));
        for k in 0..7 {
            delta[7 * i + k] = d[k];
        }
    }
    ResidualStack { delta, thetas: measurements.iter().map(|m| m.theta.clone()).collect() }
}

/// Symmetric box half-widths by parameter type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSpec {
    /// Radians, applied to φ and α corrections.
    pub angle: f64,
    /// Meters, applied to a and d corrections.
    pub length: f64,
}

impl Default for BoundSpec {
    fn default() -> Self {
        BoundSpec { angle: 0.8, length: 0.05 }
    }
}

/// Per-free-parameter bounds on the total correction.
#[derive(Debug, Clone, PartialEq)]
pub struct QpBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, CalibError> {
        if lower.len() != upper.len() {
            return Err(CalibError::Dimension("bound vectors differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(*l <= 0.0 && 0.0 <= *u)) {
            return Err(CalibError::InvalidBounds);
        }
        Ok(QpBounds { lower, upper })
    }

    pub fn uniform(n: usize, half_width: f64) -> Self {
        QpBounds { lower: vec![-half_width; n], upper: vec![half_width; n] }
    }

    pub fn for_mask(mask: &ParamMask, spec: &BoundSpec) -> Result<Self, CalibError> {
        let widths: Vec<f64> = mask
            .free_params()
            .iter()
            .map(|p| if p.kind.is_angle() { spec.angle } else { spec.length })
            .collect();
        Self::new(widths.iter().map(|w| -w).collect(), widths)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Active {
    Free,
    Lower,
    Upper,
}

const PINV_TOL: f64 = 1e-10;

fn solve_free(j: &DMatrix<f64>, rhs: &DVector<f64>, free: &[usize]) -> DVector<f64> {
    let sub = j.select_columns(free);
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (PINV_TOL * smax).max(f64::MIN_POSITIVE);
    svd.solve(rhs, eps).expect("SVD computed with U and V")
}

/// `argmin ‖Δ − J δ‖²` subject to `lower ≤ δ ≤ upper`, by a bounded-variable
/// active-set method starting from `δ = 0`.
pub fn solve_qp(j: &DMatrix<f64>, delta: &DVector<f64>, bounds: &QpBounds) -> Result<DVector<f64>, CalibError> {
    let n = j.ncols();
    if j.nrows() != delta.len() || bounds.len() != n {
        return Err(CalibError::Dimension(format!(
            "J is {}x{}, residual has {} rows, bounds have {} entries",
            j.nrows(),
            n,
            delta.len(),
            bounds.len()
        )));
    }
    let (lb, ub) = (&bounds.lower, &bounds.upper);
    if lb.iter().zip(ub).any(|(l, u)| !(*l <= 0.0 && 0.0 <= *u)) {
        return Err(CalibError::InvalidBounds);
    }
    let mut x = DVector::zeros(n);
    let mut state = vec![Active::Free; n];
    // Degenerate boxes pin their variable.
    for i in 0..n {
        if lb[i] == ub[i] {
            state[i] = Active::Lower;
            x[i] = lb[i];
        }
    }
    let gnorm = (j.transpose() * delta).amax();
    let kkt_tol = 1e-12 * gnorm.max(1.0);
    let cap = 100 * (n + 1);
    let mut iterations = 0;
    loop {
        // Solve over the free set, backing off to the feasible boundary.
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(CalibError::MaxIterations(cap));
            }
            let free: Vec<usize> = (0..n).filter(|&i| state[i] == Active::Free).collect();
            if free.is_empty() {
                break;
            }
            let mut rhs = delta.clone();
            for i in 0..n {
                if state[i] != Active::Free && x[i] != 0.0 {
                    rhs -= j.column(i) * x[i];
                }
            }
            let z = solve_free(j, &rhs, &free);
            let feasible = free.iter().enumerate().all(|(k, &i)| z[k] >= lb[i] && z[k] <= ub[i]);
            if feasible {
                for (k, &i) in free.iter().enumerate() {
                    x[i] = z[k];
                }
                break;
            }
            let mut alpha: f64 = 1.0;
            for (k, &i) in free.iter().enumerate() {
                let step = z[k] - x[i];
                if z[k] < lb[i] && step < 0.0 {
                    alpha = alpha.min((lb[i] - x[i]) / step);
                } else if z[k] > ub[i] && step > 0.0 {
                    alpha = alpha.min((ub[i] - x[i]) / step);
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            for (k, &i) in free.iter().enumerate() {
                x[i] += alpha * (z[k] - x[i]);
                let lo_hit = x[i] <= lb[i] || (z[k] < lb[i] && (x[i] - lb[i]).abs() <= 1e-14 * (1.0 + lb[i].abs()));
                let hi_hit = x[i] >= ub[i] || (z[k] > ub[i] && (x[i] - ub[i]).abs() <= 1e-14 * (1.0 + ub[i].abs()));
                if lo_hit {
                    x[i] = lb[i];
                    state[i] = Active::Lower;
                } else if hi_hit {
                    x[i] = ub[i];
                    state[i] = Active::Upper;
                }
            }
        }
        // Release the bound variable with the largest KKT violation.
        let w = j.transpose() * (delta - j * &x);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if lb[i] == ub[i] {
                continue;
            }
            let v = match state[i] {
                Active::Lower => w[i],
                Active::Upper => -w[i],
                Active::Free => continue,
            };
            if v > kkt_tol && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, _)) => state[i] = Active::Free,
            None => return Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub improvement_tolerance: f64,
    pub max_halvings: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { max_iterations: 50, step_tolerance: 1e-8, improvement_tolerance: 1e-10, max_halvings: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identifiability {
    pub rank: usize,
    pub n_free: usize,
    pub unidentifiable: Vec<String>,
}

impl Identifiability {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.n_free
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub chain: DhChain,
    pub correction: ParamDelta,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub identifiability: Identifiability,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub corrections: BTreeMap<String, f64>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub identifiability: Identifiability,
    pub rank_deficient: bool,
}

impl CalibrationResult {
    pub fn report(&self) -> CalibrationReport {
        let corrections = self
            .correction
            .mask()
            .free_params()
            .into_iter()
            .map(|p| (p.to_string(), self.correction.get(p)))
            .collect();
        CalibrationReport {
            corrections,
            iterations: self.iterations,
            residual_history: self.residual_history.clone(),
            identifiability: self.identifiability.clone(),
            rank_deficient: self.identifiability.rank_deficient(),
        }
    }

    pub fn residual_nonincreasing(&self) -> bool {
        self.residual_history.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Iterated box-constrained identification of the free parameters in `mask`.
/// Bounds apply to the total correction relative to `nominal`.
pub fn calibrate(
    measurements: &[Measurement],
    nominal: &DhChain,
    mask: &ParamMask,
    bounds: &QpBounds,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult, CalibError> {
    let n_free = mask.n_free();
    if n_free == 0 {
        return Err(GeomError::EmptyMask.into());
    }
    if bounds.len() != n_free {
        return Err(CalibError::Dimension(format!("{} bounds for {} free parameters", bounds.len(), n_free)));
    }
    let need = n_free.div_ceil(7);
    if measurements.len() < need {
        return Err(CalibError::InsufficientData { got: measurements.len(), free: n_free, need });
    }
    let thetas: Vec<Vec<f64>> = measurements.iter().map(|m| m.theta.clone()).collect();
    let mut x = vec![0.0; n_free];
    let mut chain = nominal.clone();
    let mut residual = build_residuals(measurements, &chain);
    let mut history = vec![residual.norm()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let jac = IdentificationJacobian::compute(&chain, &thetas, mask)?;
        let local = QpBounds {
            lower: bounds.lower.iter().zip(&x).map(|(l, xi)| (l - xi).min(0.0)).collect(),
            upper: bounds.upper.iter().zip(&x).map(|(u, xi)| (u - xi).max(0.0)).collect(),
        };
        let step = solve_qp(&jac.matrix, &residual.delta, &local)?;
        let current = residual.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial_x: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, s)| xi + t * s).collect();
            let trial_chain = nominal.apply_delta(&ParamDelta::from_free(mask.clone(), &trial_x));
            let trial_res = build_residuals(measurements, &trial_chain);
            if trial_res.norm() <= current {
                accepted = Some((trial_x, trial_chain, trial_res));
                break;
            }
            t *= 0.5;
        }
        let Some((new_x, new_chain, new_res)) = accepted else {
            converged = true;
            break;
        };
        let step_inf = step.amax() * t;
        let improvement = current - new_res.norm();
        x = new_x;
        chain = new_chain;
        residual = new_res;
        history.push(residual.norm());
        if step_inf < opts.step_tolerance || improvement < opts.improvement_tolerance {
            converged = true;
            break;
        }
    }
    let jac = IdentificationJacobian::compute(&chain, &thetas, mask)?;
    let identifiability = Identifiability {
        rank: jac.rank,
        n_free,
        unidentifiable: jac.unidentifiable().iter().map(|p| p.to_string()).collect(),
    };
    if identifiability.rank_deficient() {
        log::warn!(
            "identification Jacobian has rank {} for {} free parameters; unidentifiable: {:?}",
            identifiability.rank,
            n_free,
            identifiability.unidentifiable
        );
    }
    let result = CalibrationResult {
        chain,
        correction: ParamDelta::from_free(mask.clone(), &x),
        iterations,
        residual_history: history,
        identifiability,
    };
    if converged {
        Ok(result)
    } else {
        Err(CalibError::NotConverged(Box::new(result)))
    }
}

/// `100 · min(|true|, |est|) / max(|true|, |est|)`, defined only for nonzero
/// estimates with the same sign as the true offset.
pub fn accuracy_metric(true_offset: f64, estimate: f64) -> Result<f64, CalibError> {
    let ok = true_offset != 0.0
        && estimate != 0.0
        && true_offset.is_finite()
        && estimate.is_finite()
        && true_offset.signum() == estimate.signum();
    if !ok {
        return Err(CalibError::Undefined { true_offset, estimate });
    }
    let (a, b) = (true_offset.abs(), estimate.abs());
    Ok(100.0 * a.min(b) / a.max(b))
}
