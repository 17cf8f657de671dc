//! End-to-end recalibration: experiment design on the arm followed by
//! box-constrained identification, with an optional online stopping rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boed::{BoedConfig, BoedError, BoedSession, BoedTrace, CandidatePool};
use crate::calib::{calibrate, BoundSpec, CalibError, CalibrationOptions, CalibrationResult, QpBounds};
use crate::geom::{DhChain, ParamMask};
use crate::gp::KernelParams;
use crate::sim::SimArm;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Boed(#[from] BoedError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("invalid recalibration configuration: {0}")]
    InvalidConfig(String),
}

/// Stop sampling once the identified correction has settled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingRule {
    pub min_samples: usize,
    pub max_samples: usize,
    /// Number of consecutive estimate changes that must stay below `tolerance`.
    pub window: usize,
    /// Largest allowed change of any free parameter between consecutive estimates.
    pub tolerance: f64,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule { min_samples: 15, max_samples: 40, window: 3, tolerance: 2e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecalibrationConfig {
    pub pool_size: usize,
    /// Candidate joint vectors are drawn uniformly in `±joint_range`.
    pub joint_range: f64,
    /// Fixed sample count, used when `stopping` is `None`.
    pub iterations: usize,
    pub stopping: Option<StoppingRule>,
    pub boed: BoedConfig,
    pub kernel: KernelParams,
    pub bounds: BoundSpec,
    pub mask: ParamMask,
    pub calibration: CalibrationOptions,
}

impl RecalibrationConfig {
    pub fn new(n_joints: usize) -> Self {
        RecalibrationConfig {
            pool_size: 500,
            joint_range: 1.5,
            iterations: 38,
            stopping: None,
            boed: BoedConfig::default(),
            kernel: KernelParams::default(),
            bounds: BoundSpec::default(),
            mask: ParamMask::joint_offsets(n_joints),
            calibration: CalibrationOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecalibrationOutcome {
    pub trace: BoedTrace,
    pub calibration: CalibrationResult,
    pub samples: usize,
    pub stopped_early: bool,
}

/// Runs the design loop on `arm` and identifies corrections to `nominal`.
/// `seed` drives the candidate pool.
pub fn recalibrate(
    arm: &mut SimArm,
    nominal: &DhChain,
    cfg: &RecalibrationConfig,
    seed: u64,
) -> Result<RecalibrationOutcome, PipelineError> {
    let max = match cfg.stopping {
        Some(s) => {
            if s.min_samples == 0 || s.max_samples < s.min_samples || s.window == 0 {
                return Err(PipelineError::InvalidConfig("stopping rule needs 0 < min_samples <= max_samples and window >= 1".into()));
            }
            s.max_samples
        }
        None => cfg.iterations,
    };
    if max == 0 {
        return Err(PipelineError::InvalidConfig("at least one sample is required".into()));
    }
    if cfg.pool_size < max {
        return Err(PipelineError::InvalidConfig(format!("pool of {} cannot supply {max} distinct poses", cfg.pool_size)));
    }
    let bounds = QpBounds::for_mask(&cfg.mask, &cfg.bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = CandidatePool::generate(nominal, cfg.pool_size, cfg.joint_range, &mut rng);
    let mut session = BoedSession::new(arm, nominal.clone(), pool, cfg.kernel, cfg.boed)?;
    let mut previous: Option<Vec<f64>> = None;
    let mut settled = 0;
    let mut last: Option<CalibrationResult> = None;
    let mut stopped_early = false;
    for _ in 0..max {
        session.step()?;
        let Some(rule) = cfg.stopping else { continue };
        let n = session.trace().len();
        if n < cfg.mask.n_free().div_ceil(7).max(rule.min_samples.saturating_sub(rule.window)) {
            continue;
        }
        let res = match solve(session.trace(), nominal, cfg, &bounds) {
            Err(PipelineError::Calib(CalibError::NotConverged(r))) => *r,
            other => other?,
        };
        let est = res.correction.free_values();
        if let Some(prev) = &previous {
            let change = est.iter().zip(prev).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            settled = if change < rule.tolerance { settled + 1 } else { 0 };
        }
        previous = Some(est);
        last = Some(res);
        if n >= rule.min_samples && settled >= rule.window {
            stopped_early = n < rule.max_samples;
            break;
        }
    }
    let trace = session.into_trace();
    let calibration = match last {
        Some(r) => r,
        None => solve(&trace, nominal, cfg, &bounds)?,
    };
    Ok(RecalibrationOutcome { samples: trace.len(), trace, calibration, stopped_early })
}

fn solve(trace: &BoedTrace, nominal: &DhChain, cfg: &RecalibrationConfig, bounds: &QpBounds) -> Result<CalibrationResult, PipelineError> {
    Ok(calibrate(&trace.measurements(), nominal, &cfg.mask, bounds, &cfg.calibration)?)
}
