//! Gaussian-process regression over poses in S³×ℝ³.
//!
//! The covariance is a product of a squared-exponential kernel on positions and
//! a truncated Gegenbauer (heat-kernel style) series on unit quaternions. The
//! model is an immutable snapshot holding a Cholesky factor of the Gram matrix;
//! [`GpModel::add_observation`] returns a new snapshot, extending the factor by
//! one row when possible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{geodesic_distance, Pose, Quat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("Gram matrix of size {size} is not positive definite even with jitter {jitter:.3e}")]
    SingularGram { size: usize, jitter: f64 },
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("training inputs ({inputs}) and outputs ({outputs}) differ in length")]
    LengthMismatch { inputs: usize, outputs: usize },
    #[error("observation is not finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    /// β, meters.
    pub se_lengthscale: f64,
    /// σ_f.
    pub se_signal: f64,
    /// σ_n, added on matching indices only.
    pub se_noise: f64,
    /// κ.
    pub sphere_lengthscale: f64,
    /// σ.
    pub sphere_signal: f64,
    /// σ_s.
    pub product_scale: f64,
    /// Highest series index N.
    pub series_terms: usize,
    /// σ_ε of the observation model `y = f(x) + ε`.
    pub observation_noise: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            se_lengthscale: 0.25,
            se_signal: 1.0,
            se_noise: 0.0,
            sphere_lengthscale: 0.6,
            sphere_signal: 1.0,
            product_scale: 1.0,
            series_terms: 12,
            observation_noise: 1e-2,
        }
    }
}

impl KernelParams {
    /// Length scales and signal variances must be positive; the two noise
    /// terms may be zero.
    pub fn validate(&self) -> Result<(), GpError> {
        let positive = [
            ("se_lengthscale", self.se_lengthscale),
            ("se_signal", self.se_signal),
            ("sphere_lengthscale", self.sphere_lengthscale),
            ("sphere_signal", self.sphere_signal),
            ("product_scale", self.product_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(GpError::InvalidParams(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("se_noise", self.se_noise), ("observation_noise", self.observation_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GpError::InvalidParams(format!("{name} must be nonnegative and finite, got {v}")));
            }
        }
        if self.series_terms < 1 {
            return Err(GpError::InvalidParams("series_terms must be at least 1".into()));
        }
        Ok(())
    }

    fn series_weight(&self, n: usize) -> f64 {
        let nf = n as f64;
        let k2 = self.sphere_lengthscale * self.sphere_lengthscale;
        (nf + 1.0) * (-0.5 * k2 * nf * (nf + 2.0)).exp()
    }
}

/// `C_n^{(1)}(cos θ) = sin((n+1)θ)/sin θ` for θ in `[0, π]`, with the series
/// limits used close to either pole.
pub fn gegenbauer1(n: usize, theta: f64) -> f64 {
    let m = n as f64 + 1.0;
    let curv = (n as f64) * (n as f64 + 2.0) / 6.0;
    if theta.abs() < 1e-6 {
        return m * (1.0 - curv * theta * theta);
    }
    let e = std::f64::consts::PI - theta;
    if e.abs() < 1e-6 {
        let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
        return sign * m * (1.0 - curv * e * e);
    }
    (m * theta).sin() / theta.sin()
}

fn sphere_series(theta: f64, params: &KernelParams) -> f64 {
    (0..=params.series_terms)
        .map(|n| params.series_weight(n) * gegenbauer1(n, theta))
        .sum()
}

/// Individual addends of the sphere series at distance 0, for truncation checks.
pub fn sphere_series_terms_at_zero(params: &KernelParams) -> Vec<f64> {
    (0..=params.series_terms)
        .map(|n| params.series_weight(n) * (n as f64 + 1.0))
        .collect()
}

/// Kernel on S³ depending only on the geodesic distance, normalized so that
/// `kernel_sphere(q, q) = σ²`.
pub fn kernel_sphere(q1: &Quat, q2: &Quat, params: &KernelParams) -> f64 {
    let sigma2 = params.sphere_signal * params.sphere_signal;
    let d = geodesic_distance(q1, q2);
    if d == 0.0 {
        return sigma2;
    }
    sigma2 * sphere_series(d, params) / sphere_series(0.0, params)
}

pub fn kernel_se(p1: &nalgebra::Vector3<f64>, p2: &nalgebra::Vector3<f64>, params: &KernelParams, same_index: bool) -> f64 {
    let r2 = (p1 - p2).norm_squared();
    let beta2 = params.se_lengthscale * params.se_lengthscale;
    let mut k = params.se_signal * params.se_signal * (-r2 / (2.0 * beta2)).exp();
    if same_index {
        k += params.se_noise * params.se_noise;
    }
    k
}

pub fn kernel_product(x1: &Pose, x2: &Pose, params: &KernelParams, same_index: bool) -> f64 {
    params.product_scale
        * params.product_scale
        * kernel_sphere(&x1.rotation, &x2.rotation, params)
        * kernel_se(&x1.position, &x2.position, params, same_index)
}

/// Kernel matrix over `xs`; `with_nugget` adds the σ_n Kronecker term on the
/// diagonal. The observation noise σ_ε is never included here.
pub fn kernel_matrix(xs: &[Pose], params: &KernelParams, with_nugget: bool) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_product(&xs[i], &xs[j], params, with_nugget && i == j);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    /// Variance clamped at zero.
    pub variance: f64,
    /// Variance before clamping.
    pub raw_variance: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Immutable GP snapshot.
#[derive(Debug, Clone)]
pub struct GpModel {
    params: KernelParams,
    prior_mean: f64,
    inputs: Vec<Pose>,
    outputs: Vec<f64>,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn new(params: KernelParams, prior_mean: f64) -> Result<Self, GpError> {
        params.validate()?;
        Ok(GpModel {
            params,
            prior_mean,
            inputs: Vec::new(),
            outputs: Vec::new(),
            chol: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            jitter: 0.0,
        })
    }

    /// Builds the model from a full training set in one factorization.
    pub fn batch(params: KernelParams, prior_mean: f64, inputs: Vec<Pose>, outputs: Vec<f64>) -> Result<Self, GpError> {
        params.validate()?;
        if inputs.len() != outputs.len() {
            return Err(GpError::LengthMismatch { inputs: inputs.len(), outputs: outputs.len() });
        }
        if outputs.iter().any(|y| !y.is_finite()) || inputs.iter().any(|x| !x.is_finite()) {
            return Err(GpError::NonFinite);
        }
        let mut m = GpModel {
            params,
            prior_mean,
            inputs,
            outputs,
            chol: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            jitter: 0.0,
        };
        m.refactor()?;
        Ok(m)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }
    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }
    pub fn inputs(&self) -> &[Pose] {
        &self.inputs
    }
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }
    pub fn len(&self) -> usize {
        self.inputs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
    /// Diagonal jitter currently added to the Gram matrix (zero when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn noisy_gram(&self) -> DMatrix<f64> {
        let mut k = kernel_matrix(&self.inputs, &self.params, true);
        let s2 = self.params.observation_noise * self.params.observation_noise;
        for i in 0..k.nrows() {
            k[(i, i)] += s2;
        }
        k
    }

    fn refactor(&mut self) -> Result<(), GpError> {
        let k = self.noisy_gram();
        let n = k.nrows();
        let trace = k.trace().max(f64::MIN_POSITIVE);
        let mut rel = 0.0;
        loop {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += rel * trace;
            }
            if let Some(c) = kj.cholesky() {
                if rel > 0.0 {
                    log::warn!("Gram matrix of size {n} needed jitter {:.3e} (relative {rel:.0e})", rel * trace);
                }
                self.jitter = rel * trace;
                self.chol = c.l();
                break;
            }
            rel = if rel == 0.0 { JITTER_START } else { rel * 10.0 };
            if rel > JITTER_MAX * (1.0 + 1e-9) {
                return Err(GpError::SingularGram { size: n, jitter: JITTER_MAX * trace });
            }
        }
        self.update_alpha();
        Ok(())
    }

    fn update_alpha(&mut self) {
        let r = DVector::from_iterator(self.outputs.len(), self.outputs.iter().map(|y| y - self.prior_mean));
        let l = &self.chol;
        let z = l.solve_lower_triangular(&r).expect("Cholesky factor has positive diagonal");
        self.alpha = l.transpose().solve_upper_triangular(&z).expect("Cholesky factor has positive diagonal");
    }

    /// Returns a new snapshot with `(x, y)` appended.
    pub fn add_observation(&self, x: Pose, y: f64) -> Result<GpModel, GpError> {
        if !y.is_finite() || !x.is_finite() {
            return Err(GpError::NonFinite);
        }
        let mut next = self.clone();
        next.inputs.push(x);
        next.outputs.push(y);
        let n = self.inputs.len();
        let kvec = DVector::from_iterator(n, self.inputs.iter().map(|xi| kernel_product(xi, &x, &self.params, false)));
        let s2 = self.params.observation_noise * self.params.observation_noise;
        let knn = kernel_product(&x, &x, &self.params, true) + s2 + self.jitter;
        let l = if n == 0 {
            Some(DVector::zeros(0))
        } else {
            self.chol.solve_lower_triangular(&kvec)
        };
        let appended = l.and_then(|l| {
            let d2 = knn - l.norm_squared();
            // Reject appends that lose most of the diagonal to cancellation.
            if d2.is_finite() && d2 > 1e-12 * knn {
                Some((l, d2.sqrt()))
            } else {
                None
            }
        });
        match appended {
            Some((l, d)) => {
                let mut chol = DMatrix::zeros(n + 1, n + 1);
                chol.view_mut((0, 0), (n, n)).copy_from(&self.chol);
                for j in 0..n {
                    chol[(n, j)] = l[j];
                }
                chol[(n, n)] = d;
                next.chol = chol;
                next.update_alpha();
            }
            None => next.refactor()?,
        }
        Ok(next)
    }

    pub fn posterior(&self, x: &Pose) -> Posterior {
        let prior_var = kernel_product(x, x, &self.params, true);
        if self.inputs.is_empty() {
            return Posterior { mean: self.prior_mean, variance: prior_var, raw_variance: prior_var };
        }
        let n = self.inputs.len();
        let kvec = DVector::from_iterator(n, self.inputs.iter().map(|xi| kernel_product(xi, x, &self.params, false)));
        let mean = self.prior_mean + kvec.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&kvec)
            .expect("Cholesky factor has positive diagonal");
        let raw = prior_var - v.norm_squared();
        Posterior { mean, variance: raw.max(0.0), raw_variance: raw }
    }
}
