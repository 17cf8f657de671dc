//! Calibration objective and the GP-UCB experiment design loop that chooses
//! which end-effector poses to measure.

use std::io;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::Measurement;
use crate::geom::{forward_kinematics, geodesic_distance, DhChain, Pose};
use crate::gp::{GpError, GpModel, KernelParams};
use crate::sim::{SimArm, SimError};

#[derive(Debug, Error)]
pub enum BoedError {
    #[error("every remaining candidate pose failed to servo")]
    PoolExhausted,
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace csv: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    /// Position error normalizer, meters.
    pub sup_fp: f64,
    /// Orientation error normalizer, radians.
    pub sup_fq: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights { alpha1: 0.5, alpha2: 0.5, sup_fp: 0.5, sup_fq: std::f64::consts::PI }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), BoedError> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.alpha1) || !in_unit(self.alpha2) {
            return Err(BoedError::InvalidWeights("alpha1 and alpha2 must lie in (0, 1)".into()));
        }
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-12 {
            return Err(BoedError::InvalidWeights("alpha1 + alpha2 must equal 1".into()));
        }
        if !(self.sup_fp > 0.0 && self.sup_fq > 0.0) {
            return Err(BoedError::InvalidWeights("normalizers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    /// Position error, meters.
    pub fp: f64,
    /// Orientation geodesic distance, radians.
    pub fq: f64,
    pub value: f64,
}

pub fn objective_terms(measured: &Pose, computed: &Pose, w: &ObjectiveWeights) -> ObjectiveTerms {
    let fp = (measured.position - computed.position).norm();
    let fq = geodesic_distance(&measured.rotation, &computed.rotation);
    let value = -(w.alpha1 * fp / w.sup_fp + w.alpha2 * fq / w.sup_fq);
    if fp > w.sup_fp {
        log::warn!("position error {fp:.4} m exceeds normalizer {:.4} m", w.sup_fp);
    }
    ObjectiveTerms { fp, fq, value }
}

/// `−(α1·‖p − p̃‖/sup_fp + α2·d(q, q̃)/sup_fq)`; zero is the best value.
pub fn objective_value(measured: &Pose, computed: &Pose, w: &ObjectiveWeights) -> f64 {
    objective_terms(measured, computed, w).value
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub pose: Pose,
    pub theta: Vec<f64>,
}

/// Finite acquisition domain of FK-reachable poses.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    candidates: Vec<Candidate>,
}

impl CandidatePool {
    /// `size` poses from FK of joint vectors drawn uniformly in `±joint_limit`.
    pub fn generate(chain: &DhChain, size: usize, joint_limit: f64, rng: &mut impl Rng) -> Self {
        let n = chain.n_joints();
        let candidates = (0..size)
            .map(|_| {
                let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-joint_limit..joint_limit)).collect();
                Candidate { pose: forward_kinematics(chain, &theta), theta }
            })
            .collect();
        CandidatePool { candidates }
    }

    pub fn from_candidates(candidates: Vec<Candidate>) -> Self {
        CandidatePool { candidates }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, i: usize) -> &Candidate {
        &self.candidates[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter()
    }
}

/// `β_k = 2·log(|pool|·k²·π²/(6δ))`.
pub fn beta_k(pool_size: usize, k: usize, delta: f64) -> f64 {
    let k = k.max(1) as f64;
    2.0 * (pool_size as f64 * k * k * std::f64::consts::PI.powi(2) / (6.0 * delta)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub acquisition: f64,
    pub beta: f64,
    pub mean: f64,
    pub std_dev: f64,
}

/// Acquisition `μ(x) + √β·σ(x)` for each candidate.
pub fn acquisition_values(model: &GpModel, pool: &CandidatePool, beta: f64) -> Vec<(f64, f64, f64)> {
    pool.iter()
        .map(|c| {
            let p = model.posterior(&c.pose);
            (p.mean + beta.sqrt() * p.std_dev(), p.mean, p.std_dev())
        })
        .collect()
}

/// GP-UCB choice over the candidates not marked in `excluded`; ties go to the
/// lowest index. Returns `None` when nothing is eligible.
pub fn ucb_select(model: &GpModel, pool: &CandidatePool, k: usize, delta: f64, excluded: &[bool]) -> Option<Selection> {
    let beta = beta_k(pool.len(), k, delta);
    let mut best: Option<Selection> = None;
    for (i, (a, mean, sd)) in acquisition_values(model, pool, beta).into_iter().enumerate() {
        if excluded.get(i).copied().unwrap_or(false) {
            continue;
        }
        if best.is_none_or(|b| a > b.acquisition) {
            best = Some(Selection { index: i, acquisition: a, beta, mean, std_dev: sd });
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoedRecord {
    pub iteration: usize,
    pub candidate: usize,
    pub commanded: Pose,
    pub measured: Pose,
    pub computed: Pose,
    pub theta: Vec<f64>,
    pub fp: f64,
    pub fq: f64,
    pub objective: f64,
    pub beta: f64,
    pub acquisition: f64,
    pub posterior_mean: f64,
    pub posterior_std: f64,
}

/// Measured poses `ℐ_n`, model poses `ℱ_n` and per-iteration statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoedTrace {
    pub records: Vec<BoedRecord>,
}

const POSE_COLS: [&str; 7] = ["px", "py", "pz", "qw", "qx", "qy", "qz"];

impl BoedTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn measurements(&self) -> Vec<Measurement> {
        self.records
            .iter()
            .map(|r| Measurement { theta: r.theta.clone(), measured: r.measured })
            .collect()
    }

    pub fn truncated(&self, n: usize) -> BoedTrace {
        BoedTrace { records: self.records[..n.min(self.records.len())].to_vec() }
    }

    /// One row per iteration: commanded, measured and computed poses, the
    /// objective terms, β_k, the acquisition value and the encoder angles.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), BoedError> {
        let mut wr = csv::Writer::from_writer(w);
        let n_joints = self.records.first().map_or(0, |r| r.theta.len());
        let mut header = vec!["iter".to_string()];
        for prefix in ["cmd", "meas", "comp"] {
            header.extend(POSE_COLS.iter().map(|c| format!("{prefix}_{c}")));
        }
        header.extend(["f_p", "f_q", "objective", "beta_k", "acquisition"].map(String::from));
        header.extend((1..=n_joints).map(|j| format!("theta{j}")));
        wr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.iteration.to_string()];
            for p in [&r.commanded, &r.measured, &r.computed] {
                row.extend(p.to_vector7().iter().map(|v| format!("{v:e}")));
            }
            row.extend([r.fp, r.fq, r.objective, r.beta, r.acquisition].iter().map(|v| format!("{v:e}")));
            row.extend(r.theta.iter().map(|v| format!("{v:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a trace written by [`BoedTrace::write_csv`]. Posterior statistics
    /// and candidate indices are not stored and come back as zero.
    pub fn read_csv<R: io::Read>(r: R) -> Result<BoedTrace, BoedError> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let n_joints = headers.iter().filter(|h| h.starts_with("theta")).count();
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let vals: Vec<f64> = row
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| BoedError::InvalidConfig(format!("bad number in trace: {e}")))?;
            if vals.len() != 27 + n_joints {
                return Err(BoedError::InvalidConfig("trace row has the wrong number of columns".into()));
            }
            records.push(BoedRecord {
                iteration: vals[0] as usize,
                candidate: 0,
                commanded: Pose::from_vector7(&vals[1..8]),
                measured: Pose::from_vector7(&vals[8..15]),
                computed: Pose::from_vector7(&vals[15..22]),
                fp: vals[22],
                fq: vals[23],
                objective: vals[24],
                beta: vals[25],
                acquisition: vals[26],
                theta: vals[27..].to_vec(),
                posterior_mean: 0.0,
                posterior_std: 0.0,
            });
        }
        Ok(BoedTrace { records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoedConfig {
    pub weights: ObjectiveWeights,
    /// Confidence parameter δ of the β_k schedule.
    pub delta: f64,
    pub prior_mean: f64,
}

impl Default for BoedConfig {
    fn default() -> Self {
        BoedConfig { weights: ObjectiveWeights::default(), delta: 0.1, prior_mean: 0.0 }
    }
}

/// Sequential experiment design state: one [`BoedSession::step`] per measurement.
pub struct BoedSession<'a> {
    arm: &'a mut SimArm,
    nominal: DhChain,
    pool: CandidatePool,
    used: Vec<bool>,
    model: GpModel,
    config: BoedConfig,
    trace: BoedTrace,
    servo_failures: usize,
}

impl<'a> BoedSession<'a> {
    pub fn new(
        arm: &'a mut SimArm,
        nominal: DhChain,
        pool: CandidatePool,
        kernel: KernelParams,
        config: BoedConfig,
    ) -> Result<Self, BoedError> {
        config.weights.validate()?;
        if !(config.delta > 0.0 && config.delta < 1.0) {
            return Err(BoedError::InvalidConfig("delta must lie in (0, 1)".into()));
        }
        if pool.is_empty() {
            return Err(BoedError::InvalidConfig("candidate pool is empty".into()));
        }
        let used = vec![false; pool.len()];
        Ok(BoedSession {
            arm,
            nominal,
            pool,
            used,
            model: GpModel::new(kernel, config.prior_mean)?,
            config,
            trace: BoedTrace::default(),
            servo_failures: 0,
        })
    }

    pub fn trace(&self) -> &BoedTrace {
        &self.trace
    }

    pub fn into_trace(self) -> BoedTrace {
        self.trace
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn servo_failures(&self) -> usize {
        self.servo_failures
    }

    /// Selects, servos to and measures one pose, then updates the GP. Failed
    /// servo attempts discard the candidate and fall through to the next best.
    pub fn step(&mut self) -> Result<&BoedRecord, BoedError> {
        let k = self.trace.len() + 1;
        loop {
            let sel = ucb_select(&self.model, &self.pool, k, self.config.delta, &self.used)
                .ok_or(BoedError::PoolExhausted)?;
            self.used[sel.index] = true;
            let cand = self.pool.get(sel.index).clone();
            let theta = match self.arm.servo_to(&cand.pose, &cand.theta) {
                Ok(t) => t,
                Err(SimError::ServoFailed(e)) => {
                    self.servo_failures += 1;
                    log::info!("candidate {} discarded: {e}", sel.index);
                    continue;
                }
                Err(e) => return Err(BoedError::InvalidConfig(e.to_string())),
            };
            let computed = forward_kinematics(&self.nominal, &theta);
            let measured = self.arm.measure_marker_pose();
            let terms = objective_terms(&measured, &computed, &self.config.weights);
            self.model = self.model.add_observation(measured, terms.value)?;
            self.trace.records.push(BoedRecord {
                iteration: k,
                candidate: sel.index,
                commanded: cand.pose,
                measured,
                computed,
                theta,
                fp: terms.fp,
                fq: terms.fq,
                objective: terms.value,
                beta: sel.beta,
                acquisition: sel.acquisition,
                posterior_mean: sel.mean,
                posterior_std: sel.std_dev,
            });
            return Ok(self.trace.records.last().expect("just pushed"));
        }
    }
}

/// Runs `iterations` steps of the design loop.
pub fn run_boed(
    arm: &mut SimArm,
    nominal: &DhChain,
    pool: CandidatePool,
    kernel: KernelParams,
    config: BoedConfig,
    iterations: usize,
) -> Result<BoedTrace, BoedError> {
    if iterations == 0 {
        return Err(BoedError::InvalidConfig("at least one iteration is required".into()));
    }
    if pool.len() < iterations {
        return Err(BoedError::InvalidConfig(format!("pool of {} cannot supply {iterations} distinct poses", pool.len())));
    }
    let mut session = BoedSession::new(arm, nominal.clone(), pool, kernel, config)?;
    for _ in 0..iterations {
        session.step()?;
    }
    Ok(session.into_trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{ParamDelta, ParamMask, Quat};
    use crate::sim::NoiseModel;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn objective_cases() {
        let w = ObjectiveWeights::default();
        let p = Pose::new(Quat::IDENTITY, Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(objective_value(&p, &p, &w), 0.0);
        let shifted = Pose::new(p.rotation, p.position + Vector3::new(0.5, 0.0, 0.0));
        assert_abs_diff_eq!(objective_value(&shifted, &p, &w), -0.5, epsilon = 1e-12);
        let flipped = Pose::new(Quat::from_axis_angle(&Vector3::x(), std::f64::consts::PI), p.position);
        assert_abs_diff_eq!(objective_value(&flipped, &p, &w), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let w = ObjectiveWeights { alpha1: 0.6, alpha2: 0.5, ..Default::default() };
        assert!(w.validate().is_err());
        assert!(ObjectiveWeights::default().validate().is_ok());
    }

    #[test]
    fn beta_nondecreasing() {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..50 {
            let b = beta_k(500, k, 0.1);
            assert!(b >= prev);
            prev = b;
        }
        assert_abs_diff_eq!(beta_k(500, 1, 0.1), 2.0 * (500.0 * std::f64::consts::PI.powi(2) / 0.6f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn empty_model_selects_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = CandidatePool::generate(&DhChain::wam7(), 20, 1.5, &mut rng);
        let m = GpModel::new(KernelParams::default(), 0.0).unwrap();
        assert_eq!(ucb_select(&m, &pool, 1, 0.1, &[]).unwrap().index, 0);
        let mut ex = vec![false; 20];
        ex[0] = true;
        assert_eq!(ucb_select(&m, &pool, 1, 0.1, &ex).unwrap().index, 1);
    }

    #[test]
    fn explores_away_from_bad_observation() {
        let near = Candidate { pose: Pose::from_translation(0.3, 0.0, 0.5), theta: vec![0.0; 7] };
        let far = Candidate {
            pose: Pose::new(Quat::from_axis_angle(&Vector3::z(), 2.0), Vector3::new(-0.3, 0.4, 0.2)),
            theta: vec![0.0; 7],
        };
        let pool = CandidatePool::from_candidates(vec![near.clone(), far.clone()]);
        let m = GpModel::new(KernelParams::default(), 0.0).unwrap().add_observation(near.pose, -5.0).unwrap();
        let sel = ucb_select(&m, &pool, 10, 0.1, &[]).unwrap();
        let beta = beta_k(2, 10, 0.1);
        let a_near = m.posterior(&near.pose).mean + beta.sqrt() * m.posterior(&near.pose).std_dev();
        let a_far = m.posterior(&far.pose).mean + beta.sqrt() * m.posterior(&far.pose).std_dev();
        assert!(a_far > a_near);
        assert_eq!(sel.index, 1);
    }

    #[test]
    fn noise_free_unfaulted_trace_is_exact() {
        let chain = DhChain::wam7();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = CandidatePool::generate(&chain, 30, 1.5, &mut rng);
        let mut arm = SimArm::new(chain.clone(), &ParamDelta::zeros(ParamMask::none(7)), NoiseModel::zero(), 4).unwrap();
        let trace = run_boed(&mut arm, &chain, pool, KernelParams::default(), BoedConfig::default(), 5).unwrap();
        assert_eq!(trace.len(), 5);
        for r in &trace.records {
            assert_eq!(r.objective, 0.0);
            let d = crate::geom::pose_difference(&r.measured, &r.computed);
            assert!(d.iter().all(|v| v.abs() < 1e-9));
        }
        let picks: std::collections::BTreeSet<usize> = trace.records.iter().map(|r| r.candidate).collect();
        assert_eq!(picks.len(), 5);
    }

    #[test]
    fn csv_round_trip() {
        let chain = DhChain::wam7();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = CandidatePool::generate(&chain, 10, 1.0, &mut rng);
        let mut arm = SimArm::new(chain.clone(), &ParamDelta::zeros(ParamMask::none(7)), NoiseModel::default(), 5).unwrap();
        let trace = run_boed(&mut arm, &chain, pool, KernelParams::default(), BoedConfig::default(), 3).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let back = BoedTrace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in trace.records.iter().zip(&back.records) {
            assert_eq!(a.theta, b.theta);
            assert_eq!(a.objective, b.objective);
            assert_eq!(a.measured.to_vector7(), b.measured.to_vector7());
        }
    }

    #[test]
    fn pool_exhaustion() {
        let unreachable = Candidate { pose: Pose::from_translation(5.0, 0.0, 0.0), theta: vec![0.1; 7] };
        let pool = CandidatePool::from_candidates(vec![unreachable.clone(), unreachable]);
        let chain = DhChain::wam7();
        let mut arm = SimArm::new(chain.clone(), &ParamDelta::zeros(ParamMask::none(7)), NoiseModel::zero(), 1).unwrap();
        let err = run_boed(&mut arm, &chain, pool, KernelParams::default(), BoedConfig::default(), 1).unwrap_err();
        assert!(matches!(err, BoedError::PoolExhausted));
    }
}
