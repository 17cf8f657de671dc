//! Mission executive: reacts to health reports, halts on declared faults,
//! classifies them, drives recalibration and validation, and resumes the
//! mission.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boed::CandidatePool;
use crate::calib::QpBounds;
use crate::geom::{
    forward_kinematics, geodesic_distance, solve_ik, DhChain, GeomError, IkOptions, ParamDelta, ParamId, ParamMask, Pose,
};
use crate::monsid::{
    AmbiguityGroup, ComponentGraph, Declaration, DetectionParams, ElementKind, HealthEvent, HealthStatus, Identification,
    MonsidEngine, MonsidError, StreamCoordinator,
};
use crate::pipeline::{recalibrate, RecalibrationConfig};
use crate::sim::{BlendTrajectory, SimArm, SimError};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid mission: {0}")]
    InvalidMission(String),
    #[error(transparent)]
    Monsid(#[from] MonsidError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecState {
    Nominal,
    Suspect,
    Halted,
    Recalibrating,
    Validating,
    SafeMode,
}

impl ExecState {
    /// States in which the arm may be commanded to move.
    pub fn allows_motion(self) -> bool {
        !matches!(self, ExecState::Halted | ExecState::SafeMode)
    }

    fn can_transition_to(self, to: ExecState) -> bool {
        use ExecState::*;
        matches!(
            (self, to),
            (Nominal, Suspect)
                | (Nominal, Halted)
                | (Suspect, Nominal)
                | (Suspect, Halted)
                | (Halted, Recalibrating)
                | (Halted, SafeMode)
                | (Recalibrating, Validating)
                | (Recalibrating, SafeMode)
                | (Validating, Nominal)
                | (Validating, Recalibrating)
                | (Validating, SafeMode)
        )
    }
}

impl fmt::Display for ExecState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExecState::Nominal => "NOMINAL",
            ExecState::Suspect => "SUSPECT",
            ExecState::Halted => "HALTED",
            ExecState::Recalibrating => "RECALIBRATING",
            ExecState::Validating => "VALIDATING",
            ExecState::SafeMode => "SAFE_MODE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecalibrationScope {
    /// Joint offsets only.
    JointOffsets,
    /// All DH parameters.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum Action {
    Retry,
    Pause,
    Recalibrate { scope: RecalibrationScope },
    SafeMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeverityPolicy {
    pub retry_limit: usize,
    /// Largest joint-level inconsistency (radians) considered fixable by recalibration.
    pub magnitude_cap: f64,
    /// Recalibration attempts allowed per fault before giving up.
    pub max_recalibrations: usize,
}

impl Default for SeverityPolicy {
    fn default() -> Self {
        SeverityPolicy { retry_limit: 3, magnitude_cap: 0.8, max_recalibrations: 2 }
    }
}

impl SeverityPolicy {
    /// Maps a declared fault to a recovery action. Anything not covered below
    /// falls through to safe mode.
    pub fn classify(&self, decl: &Declaration, graph: &ComponentGraph, groups: &[AmbiguityGroup]) -> Action {
        let Identification::Isolated { group } = decl.identification else {
            return Action::SafeMode;
        };
        let Some(g) = groups.get(group) else {
            return Action::SafeMode;
        };
        let kinds: Vec<ElementKind> = g.member_indices.iter().map(|&e| graph.elements()[e].kind).collect();
        let joint_magnitude = decl
            .magnitudes
            .iter()
            .filter(|(k, _)| !k.starts_with("EE_Pose"))
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        match kinds.as_slice() {
            [ElementKind::Encoder] if joint_magnitude <= self.magnitude_cap => {
                Action::Recalibrate { scope: RecalibrationScope::JointOffsets }
            }
            [ElementKind::Command, ElementKind::Actuator] => Action::Pause,
            [ElementKind::Kinematics, ElementKind::EeSensor] => Action::Recalibrate { scope: RecalibrationScope::Full },
            _ => Action::SafeMode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExecCommand {
    Move { step: usize },
    Halt,
    Retry { step: usize },
    Recalibrate { scope: RecalibrationScope },
    Validate,
    Resume { step: usize },
    EnterSafeMode,
}

impl ExecCommand {
    /// Commands that move the arm.
    pub fn is_motion(&self) -> bool {
        matches!(
            self,
            ExecCommand::Move { .. } | ExecCommand::Retry { .. } | ExecCommand::Recalibrate { .. } | ExecCommand::Validate | ExecCommand::Resume { .. }
        )
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub state: ExecState,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<ExecCommand>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: f64,
    pub from: ExecState,
    pub to: ExecState,
}

/// Executive state machine. Ticks once per health slice.
#[derive(Debug, Clone)]
pub struct Executive {
    state: ExecState,
    policy: SeverityPolicy,
    retry_count: usize,
    recal_attempts: usize,
    step: usize,
    fault: Option<Declaration>,
    suspect_open: bool,
    log: Vec<LogRecord>,
    transitions: Vec<Transition>,
}

impl Executive {
    pub fn new(policy: SeverityPolicy) -> Self {
        Executive {
            state: ExecState::Nominal,
            policy,
            retry_count: 0,
            recal_attempts: 0,
            step: 0,
            fault: None,
            suspect_open: false,
            log: Vec::new(),
            transitions: Vec::new(),
        }
    }

    pub fn state(&self) -> ExecState {
        self.state
    }
    pub fn step_index(&self) -> usize {
        self.step
    }
    pub fn retry_count(&self) -> usize {
        self.retry_count
    }
    pub fn fault(&self) -> Option<&Declaration> {
        self.fault.as_ref()
    }
    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Sequence of visited states, starting with the initial one.
    pub fn state_sequence(&self) -> Vec<ExecState> {
        let mut v = vec![ExecState::Nominal];
        v.extend(self.transitions.iter().map(|t| t.to));
        v
    }

    fn record(&mut self, t: f64, event: impl Into<String>, command: Option<ExecCommand>) {
        if let Some(c) = &command {
            debug_assert!(!c.is_motion() || self.state.allows_motion(), "motion command {c:?} in {}", self.state);
        }
        self.log.push(LogRecord { t, state: self.state, event: event.into(), command });
    }

    fn go(&mut self, t: f64, to: ExecState) {
        assert!(self.state.can_transition_to(to), "illegal transition {} -> {}", self.state, to);
        self.transitions.push(Transition { t, from: self.state, to });
        self.state = to;
    }

    /// Starts mission step `step`.
    pub fn begin_step(&mut self, t: f64, step: usize, name: &str) -> Option<ExecCommand> {
        if self.state != ExecState::Nominal {
            return None;
        }
        self.step = step;
        let cmd = ExecCommand::Move { step };
        self.record(t, format!("step {step} ({name}) started"), Some(cmd.clone()));
        Some(cmd)
    }

    pub fn complete_step(&mut self, t: f64, name: &str) {
        self.record(t, format!("step {} ({name}) completed", self.step), None);
    }

    /// One executive tick on a health report.
    pub fn on_health(&mut self, health: &HealthStatus, graph: &ComponentGraph, groups: &[AmbiguityGroup]) -> Vec<ExecCommand> {
        let t = health.t;
        let mut out = Vec::new();
        if !matches!(self.state, ExecState::Nominal | ExecState::Suspect) {
            return out;
        }
        if let Some(decl) = &health.declaration {
            self.go(t, ExecState::Halted);
            self.fault = Some(decl.clone());
            self.recal_attempts = 0;
            self.record(t, format!("fault declared: {:?}", decl.elements), Some(ExecCommand::Halt));
            out.push(ExecCommand::Halt);
            match self.policy.classify(decl, graph, groups) {
                Action::Recalibrate { scope } => {
                    self.go(t, ExecState::Recalibrating);
                    self.recal_attempts += 1;
                    let cmd = ExecCommand::Recalibrate { scope };
                    self.record(t, "policy: recalibrate", Some(cmd.clone()));
                    out.push(cmd);
                }
                Action::Pause => {
                    self.record(t, "policy: pause for operator; none available", None);
                    self.enter_safe_mode(t, &mut out);
                }
                Action::Retry | Action::SafeMode => {
                    self.record(t, "policy: safe mode", None);
                    self.enter_safe_mode(t, &mut out);
                }
            }
            return out;
        }
        let suspect = health.any_suspect();
        if suspect && !self.suspect_open {
            self.suspect_open = true;
            self.record(t, "health suspect", None);
        } else if !suspect && self.suspect_open {
            self.suspect_open = false;
            self.go(t, ExecState::Suspect);
            self.retry_count += 1;
            if self.retry_count > self.policy.retry_limit {
                self.record(t, format!("retry limit {} exceeded; pausing", self.policy.retry_limit), None);
                self.go(t, ExecState::Halted);
                self.record(t, "halt", Some(ExecCommand::Halt));
                out.push(ExecCommand::Halt);
                self.enter_safe_mode(t, &mut out);
            } else {
                self.go(t, ExecState::Nominal);
                let cmd = ExecCommand::Retry { step: self.step };
                self.record(t, format!("transient cleared; retry {}", self.retry_count), Some(cmd.clone()));
                out.push(cmd);
            }
        }
        out
    }

    fn enter_safe_mode(&mut self, t: f64, out: &mut Vec<ExecCommand>) {
        self.go(t, ExecState::SafeMode);
        self.record(t, "safe mode: all motion suspended", Some(ExecCommand::EnterSafeMode));
        out.push(ExecCommand::EnterSafeMode);
    }

    /// Result of the recalibration run requested by the last command.
    pub fn on_recalibrated(&mut self, t: f64, ok: bool, detail: &str) -> Option<ExecCommand> {
        if self.state != ExecState::Recalibrating {
            return None;
        }
        if ok {
            self.go(t, ExecState::Validating);
            self.record(t, format!("recalibration finished: {detail}"), Some(ExecCommand::Validate));
            Some(ExecCommand::Validate)
        } else {
            self.record(t, format!("recalibration failed: {detail}"), None);
            let mut out = Vec::new();
            self.enter_safe_mode(t, &mut out);
            out.pop()
        }
    }

    /// Result of validating the new model.
    pub fn on_validated(&mut self, t: f64, passed: bool, detail: &str) -> Option<ExecCommand> {
        if self.state != ExecState::Validating {
            return None;
        }
        if passed {
            self.go(t, ExecState::Nominal);
            self.fault = None;
            self.suspect_open = false;
            let cmd = ExecCommand::Resume { step: self.step };
            self.record(t, format!("validation passed: {detail}"), Some(cmd.clone()));
            Some(cmd)
        } else if self.recal_attempts < self.policy.max_recalibrations {
            self.recal_attempts += 1;
            self.go(t, ExecState::Recalibrating);
            let cmd = ExecCommand::Recalibrate { scope: RecalibrationScope::JointOffsets };
            self.record(t, format!("validation failed: {detail}; recalibrating again"), Some(cmd.clone()));
            Some(cmd)
        } else {
            self.record(t, format!("validation failed: {detail}"), None);
            let mut out = Vec::new();
            self.enter_safe_mode(t, &mut out);
            out.pop()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub theta: Vec<f64>,
    pub measured: Pose,
    pub uncalibrated: Pose,
    pub calibrated: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub rows: Vec<ValidationRow>,
    /// Mean orientation error (rad) of the model before and after.
    pub orientation_before: f64,
    pub orientation_after: f64,
    /// Mean position error (m) before and after.
    pub position_before: f64,
    pub position_after: f64,
    /// `1 − after/before` for orientation.
    pub orientation_reduction: f64,
    pub servo_failures: usize,
}

/// Compares both models against fresh measurements at `n_test` new poses.
/// Passes when mean orientation error drops by at least 80% and mean position
/// error grows by no more than three marker-noise standard deviations. When
/// the uncalibrated orientation error is already within that noise floor
/// there is nothing to correct and the check passes.
pub fn validate_recalibration(
    before: &DhChain,
    after: &DhChain,
    arm: &mut SimArm,
    n_test: usize,
    joint_range: f64,
    seed: u64,
) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = CandidatePool::generate(before, 4 * n_test.max(1), joint_range, &mut rng);
    let mut rows = Vec::new();
    let mut failures = 0;
    for c in pool.iter() {
        if rows.len() == n_test {
            break;
        }
        let theta = match arm.servo_to(&c.pose, &c.theta) {
            Ok(t) => t,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let measured = arm.measure_marker_pose();
        rows.push(ValidationRow {
            uncalibrated: forward_kinematics(before, &theta),
            calibrated: forward_kinematics(after, &theta),
            theta,
            measured,
        });
    }
    let n = rows.len().max(1) as f64;
    let ori = |f: fn(&ValidationRow) -> &Pose| rows.iter().map(|r| geodesic_distance(&r.measured.rotation, &f(r).rotation)).sum::<f64>() / n;
    let pos = |f: fn(&ValidationRow) -> &Pose| rows.iter().map(|r| (r.measured.position - f(r).position).norm()).sum::<f64>() / n;
    let ob = ori(|r| &r.uncalibrated);
    let oa = ori(|r| &r.calibrated);
    let pb = pos(|r| &r.uncalibrated);
    let pa = pos(|r| &r.calibrated);
    let noise = *arm.noise();
    let reduction = if ob > 0.0 { 1.0 - oa / ob } else { 1.0 };
    let orientation_ok = ob <= 3.0 * noise.sigma_q || reduction >= 0.8;
    let position_ok = pa <= pb + 3.0 * noise.sigma_p;
    ValidationReport {
        passed: rows.len() == n_test && orientation_ok && position_ok,
        rows,
        orientation_before: ob,
        orientation_after: oa,
        position_before: pb,
        position_after: pa,
        orientation_reduction: reduction,
        servo_failures: failures,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionStep {
    pub name: String,
    pub target: Pose,
    /// Seconds allotted to the motion.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionScript {
    /// Encoder configuration at mission start.
    pub start: Vec<f64>,
    pub steps: Vec<MissionStep>,
}

impl MissionScript {
    /// Unstow, probe, scoop, deliver and stow targets for the nominal arm.
    pub fn sample_delivery(chain: &DhChain) -> Self {
        let stow = vec![0.0, -1.2, 0.0, 2.4, 0.0, 0.6, 0.0];
        let configs: [(&str, [f64; 7]); 5] = [
            ("unstow", [0.0, -0.6, 0.0, 1.8, 0.0, 0.5, 0.0]),
            ("probe", [0.4, 0.3, 0.1, 1.4, 0.1, 0.8, 0.2]),
            ("scoop", [0.5, 0.5, 0.1, 1.2, -0.2, 0.9, 0.6]),
            ("deliver", [-0.6, 0.1, -0.1, 1.5, 0.2, 0.6, -0.3]),
            ("stow", [0.0, -1.2, 0.0, 2.4, 0.0, 0.6, 0.0]),
        ];
        let steps = configs
            .iter()
            .map(|(name, q)| MissionStep { name: name.to_string(), target: forward_kinematics(chain, q), duration: 3.0 })
            .collect();
        MissionScript { start: stow, steps }
    }

    pub fn validate(&self, n_joints: usize) -> Result<(), ExecError> {
        if self.start.len() != n_joints {
            return Err(ExecError::InvalidMission(format!("start has {} joints, arm has {n_joints}", self.start.len())));
        }
        if self.steps.is_empty() {
            return Err(ExecError::InvalidMission("mission has no steps".into()));
        }
        if self.steps.iter().any(|s| !(s.duration.is_finite() && s.duration > 0.0)) {
            return Err(ExecError::InvalidMission("step durations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MissionConfig {
    pub detection: DetectionParams,
    pub policy: SeverityPolicy,
    pub recalibration: RecalibrationConfig,
    pub validation_targets: usize,
    /// Telemetry chunk length, seconds.
    pub chunk: f64,
    pub seed: u64,
}

impl MissionConfig {
    pub fn new(n_joints: usize, seed: u64) -> Self {
        MissionConfig {
            detection: DetectionParams::default(),
            policy: SeverityPolicy::default(),
            recalibration: RecalibrationConfig::new(n_joints),
            validation_targets: 10,
            chunk: 0.1,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MissionReport {
    pub completed: bool,
    pub final_state: ExecState,
    pub steps_completed: usize,
    pub transitions: Vec<Transition>,
    pub log: Vec<LogRecord>,
    pub health_events: Vec<HealthEvent>,
    pub believed_chain: DhChain,
    pub slices: usize,
    pub dropped_slices: usize,
}

impl MissionReport {
    pub fn state_sequence(&self) -> Vec<ExecState> {
        let mut v = vec![ExecState::Nominal];
        v.extend(self.transitions.iter().map(|t| t.to));
        v
    }

    /// True when no motion command appears while halted or in safe mode.
    pub fn motion_safe(&self) -> bool {
        self.log.iter().all(|r| r.command.as_ref().is_none_or(|c| !c.is_motion() || r.state.allows_motion()))
    }
}

enum Outcome {
    StepDone,
    Interrupted,
}

struct Runner<'a> {
    arm: &'a mut SimArm,
    cfg: &'a MissionConfig,
    exec: Executive,
    engine: MonsidEngine,
    coordinator: StreamCoordinator,
    believed: DhChain,
    reference: Vec<f64>,
    health_events: Vec<HealthEvent>,
    slices: usize,
    dropped: usize,
    recal_round: u64,
}

impl Runner<'_> {
    fn plan(&self, target: &Pose) -> Result<Vec<f64>, GeomError> {
        solve_ik(&self.believed, target, &self.reference, &IkOptions::default())
    }

    /// Streams the motion to `goal` chunk by chunk, feeding every slice to the
    /// engine and the executive.
    fn run_motion(&mut self, goal: &[f64], duration: f64) -> Result<Outcome, ExecError> {
        let traj = BlendTrajectory { from: self.reference.clone(), to: goal.to_vec(), start: self.arm.time(), duration };
        let end = self.arm.time() + duration;
        while self.arm.time() < end - 1e-9 {
            let len = self.cfg.chunk.min(end - self.arm.time());
            let chunk = self.arm.stream_telemetry(&traj, len);
            self.coordinator.push(chunk);
            for slice in self.coordinator.drain() {
                self.slices += 1;
                let (health, events) = self.engine.step(&slice)?;
                self.health_events.extend(events);
                let cmds = self.exec.on_health(&health, self.engine.graph(), self.engine.groups());
                if cmds.iter().any(|c| matches!(c, ExecCommand::Halt | ExecCommand::Retry { .. })) {
                    self.reference = self.arm.read_encoders();
                    self.sync_drop_counter();
                    return Ok(Outcome::Interrupted);
                }
            }
        }
        self.sync_drop_counter();
        self.reference = goal.to_vec();
        Ok(Outcome::StepDone)
    }

    fn sync_drop_counter(&mut self) {
        let d = self.coordinator.stats().dropped;
        if d > self.dropped {
            self.engine.add_dropped(d - self.dropped);
            self.dropped = d;
        }
    }

    fn recover(&mut self, scope: RecalibrationScope) -> Result<(), ExecError> {
        loop {
            let t = self.arm.time();
            let mut rc = self.cfg.recalibration.clone();
            rc.mask = match scope {
                RecalibrationScope::JointOffsets => ParamMask::joint_offsets(self.believed.n_joints()),
                RecalibrationScope::Full => ParamMask::all(self.believed.n_joints()),
            };
            self.recal_round += 1;
            let seed = self.cfg.seed.wrapping_mul(1000).wrapping_add(self.recal_round);
            let before = self.believed.clone();
            let result = recalibrate(self.arm, &before, &rc, seed);
            let after = match result {
                Ok(out) => {
                    let detail = format!("{} samples, {} iterations", out.samples, out.calibration.iterations);
                    if let Some(p) = saturated_parameter(&out.calibration.correction, &rc) {
                        // The fault exceeds the correctable range; the slewing onset
                        // can hide this from the magnitude seen at declaration.
                        self.exec.on_recalibrated(t, false, &format!("{detail}; correction of {p} saturated at its bound"));
                        return Ok(());
                    }
                    let after = out.calibration.chain;
                    self.exec.on_recalibrated(t, true, &detail);
                    after
                }
                Err(e) => {
                    self.exec.on_recalibrated(t, false, &e.to_string());
                    return Ok(());
                }
            };
            let report = validate_recalibration(
                &before,
                &after,
                self.arm,
                self.cfg.validation_targets,
                rc.joint_range,
                seed ^ 0x5eed,
            );
            let detail = format!(
                "orientation {:.4} -> {:.4} rad, position {:.4} -> {:.4} m",
                report.orientation_before, report.orientation_after, report.position_before, report.position_after
            );
            match self.exec.on_validated(t, report.passed, &detail) {
                Some(ExecCommand::Resume { .. }) => {
                    self.believed = after.clone();
                    self.engine.set_kinematic_model(after);
                    self.engine.reset();
                    self.coordinator = StreamCoordinator::new();
                    self.dropped = 0;
                    self.reference = self.arm.read_encoders();
                    return Ok(());
                }
                Some(ExecCommand::Recalibrate { .. }) => continue,
                _ => return Ok(()),
            }
        }
    }
}

fn saturated_parameter(correction: &ParamDelta, rc: &RecalibrationConfig) -> Option<ParamId> {
    let bounds = QpBounds::for_mask(&rc.mask, &rc.bounds).ok()?;
    let params = rc.mask.free_params();
    correction
        .free_values()
        .iter()
        .enumerate()
        .find(|(i, v)| **v <= bounds.lower[*i] + 1e-6 || **v >= bounds.upper[*i] - 1e-6)
        .map(|(i, _)| params[i])
}

/// Runs `mission` on `arm`, starting from the believed model `nominal`.
pub fn run_mission(arm: &mut SimArm, nominal: &DhChain, mission: &MissionScript, cfg: &MissionConfig) -> Result<MissionReport, ExecError> {
    mission.validate(nominal.n_joints())?;
    arm.set_encoder_configuration(&mission.start);
    let engine = MonsidEngine::new(ComponentGraph::arm(nominal.n_joints()), cfg.detection, nominal.clone())?;
    let mut r = Runner {
        arm,
        cfg,
        exec: Executive::new(cfg.policy),
        engine,
        coordinator: StreamCoordinator::new(),
        believed: nominal.clone(),
        reference: mission.start.clone(),
        health_events: Vec::new(),
        slices: 0,
        dropped: 0,
        recal_round: 0,
    };
    let mut steps_completed = 0;
    let mut step = 0;
    while step < mission.steps.len() {
        let s = &mission.steps[step];
        if r.exec.begin_step(r.arm.time(), step, &s.name).is_none() {
            break;
        }
        loop {
            let goal = match r.plan(&s.target) {
                Ok(g) => g,
                Err(e) => {
                    return Err(ExecError::InvalidMission(format!("step {} ({}) target unreachable: {e}", step, s.name)));
                }
            };
            match r.run_motion(&goal, s.duration)? {
                Outcome::StepDone => break,
                Outcome::Interrupted => match r.exec.state() {
                    ExecState::Nominal => continue,
                    ExecState::Recalibrating => {
                        let scope = match r.exec.log().last().and_then(|l| l.command.clone()) {
                            Some(ExecCommand::Recalibrate { scope }) => scope,
                            _ => RecalibrationScope::JointOffsets,
                        };
                        r.recover(scope)?;
                        if r.exec.state() != ExecState::Nominal {
                            break;
                        }
                    }
                    _ => break,
                },
            }
        }
        if r.exec.state() != ExecState::Nominal {
            break;
        }
        r.exec.complete_step(r.arm.time(), &s.name);
        steps_completed += 1;
        step += 1;
    }
    let final_state = r.exec.state();
    Ok(MissionReport {
        completed: steps_completed == mission.steps.len() && final_state == ExecState::Nominal,
        final_state,
        steps_completed,
        transitions: r.exec.transitions().to_vec(),
        log: r.exec.log().to_vec(),
        health_events: r.health_events,
        believed_chain: r.believed,
        slices: r.slices,
        dropped_slices: r.dropped,
    })
}
