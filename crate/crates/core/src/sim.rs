//! Simulated 7-DOF arm used as the test double for hardware.
//!
//! The arm owns a hidden "true" chain (nominal plus an unknown DH perturbation)
//! and hidden joint faults. Algorithms interact with it only through encoder
//! readings, marker pose measurements and 500 Hz telemetry streams.
//!
//! Encoder bias `b` on a joint means the reported angle equals the physical
//! angle plus `b`. Under closed-loop control the joint is therefore physically
//! displaced by `-b` while its feedback keeps reporting the commanded
//! trajectory, which in DH terms is a joint-offset error `δφ = -b`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{forward_kinematics, solve_ik, DhChain, GeomError, IkOptions, ParamDelta, Pose, Quat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("servo failed: {0}")]
    ServoFailed(GeomError),
    #[error("invalid fault script: {0}")]
    InvalidScript(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

/// Measurement noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Marker position noise per axis, meters.
    pub sigma_p: f64,
    /// Marker orientation noise, radians (angle of a random-axis rotation).
    pub sigma_q: f64,
    /// Encoder noise, radians; also used for the velocity channel in rad/s.
    pub sigma_enc: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { sigma_p: 1e-3, sigma_q: 0.5_f64.to_radians(), sigma_enc: 5e-4 }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        NoiseModel { sigma_p: 0.0, sigma_q: 0.0, sigma_enc: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("sigma_p", self.sigma_p), ("sigma_q", self.sigma_q), ("sigma_enc", self.sigma_enc)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidNoise(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    /// Reported angle offset from the physical angle.
    #[default]
    Encoder,
    /// Joint displaced without the command or encoder reflecting it being commanded.
    Actuator,
}

/// One scripted fault. `joint` is one-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    pub time: f64,
    pub joint: usize,
    pub bias: f64,
    #[serde(default)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<FaultInjection>", into = "Vec<FaultInjection>")]
pub struct FaultScript {
    entries: Vec<FaultInjection>,
}

impl TryFrom<Vec<FaultInjection>> for FaultScript {
    type Error = SimError;
    fn try_from(v: Vec<FaultInjection>) -> Result<Self, SimError> {
        FaultScript::new(v)
    }
}

impl From<FaultScript> for Vec<FaultInjection> {
    fn from(s: FaultScript) -> Self {
        s.entries
    }
}

impl FaultScript {
    pub fn new(entries: Vec<FaultInjection>) -> Result<Self, SimError> {
        for e in &entries {
            if !(e.time.is_finite() && e.time >= 0.0 && e.bias.is_finite()) {
                return Err(SimError::InvalidScript(format!("non-finite or negative entry {e:?}")));
            }
            if e.joint == 0 {
                return Err(SimError::InvalidScript("joint indices are one-based".into()));
            }
        }
        if entries.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(SimError::InvalidScript("injection times must be nondecreasing".into()));
        }
        Ok(FaultScript { entries })
    }

    pub fn empty() -> Self {
        FaultScript::default()
    }

    pub fn entries(&self) -> &[FaultInjection] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A timestamped message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub t: f64,
    pub value: T,
}

/// The four telemetry channels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetryStreams {
    pub commands: Vec<Stamped<Vec<f64>>>,
    pub positions: Vec<Stamped<Vec<f64>>>,
    pub velocities: Vec<Stamped<Vec<f64>>>,
    pub ee_pose: Vec<Stamped<Pose>>,
}

impl TelemetryStreams {
    pub fn extend(&mut self, other: TelemetryStreams) {
        self.commands.extend(other.commands);
        self.positions.extend(other.positions);
        self.velocities.extend(other.velocities);
        self.ee_pose.extend(other.ee_pose);
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }
}

/// Joint-space reference as a function of time.
pub trait Trajectory {
    fn joints(&self, t: f64) -> Vec<f64>;
}

/// Independent sinusoids per joint around a center configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidTrajectory {
    pub center: Vec<f64>,
    pub amplitude: f64,
    pub frequencies: Vec<f64>,
}

impl SinusoidTrajectory {
    /// Amplitude 0.3 rad, frequencies spread over 0.10–0.25 Hz.
    pub fn default_for(center: Vec<f64>) -> Self {
        let n = center.len();
        let frequencies = (0..n)
            .map(|j| 0.10 + 0.15 * j as f64 / (n.max(2) - 1) as f64)
            .collect();
        SinusoidTrajectory { center, amplitude: 0.3, frequencies }
    }
}

impl Trajectory for SinusoidTrajectory {
    fn joints(&self, t: f64) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.frequencies)
            .enumerate()
            .map(|(j, (c, f))| c + self.amplitude * (2.0 * PI * f * t + 0.7 * j as f64).sin())
            .collect()
    }
}

/// Smooth cosine blend between two configurations, holding at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendTrajectory {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub start: f64,
    pub duration: f64,
}

impl Trajectory for BlendTrajectory {
    fn joints(&self, t: f64) -> Vec<f64> {
        let s = if self.duration <= 0.0 { 1.0 } else { ((t - self.start) / self.duration).clamp(0.0, 1.0) };
        let w = 0.5 - 0.5 * (PI * s).cos();
        self.from.iter().zip(&self.to).map(|(a, b)| a + w * (b - a)).collect()
    }
}

/// Holds a fixed configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldTrajectory(pub Vec<f64>);

impl Trajectory for HoldTrajectory {
    fn joints(&self, _t: f64) -> Vec<f64> {
        self.0.clone()
    }
}

pub const TELEMETRY_DT: f64 = 0.002;
pub const ACTUATOR_TAU: f64 = 0.05;
/// Rate at which an injected displacement is physically realized by the joint
/// controller, rad/s.
pub const FAULT_SLEW_RATE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct SimArm {
    nominal: DhChain,
    truth: DhChain,
    noise: NoiseModel,
    ik: IkOptions,
    rng: ChaCha8Rng,
    bias_target: Vec<f64>,
    bias_applied: Vec<f64>,
    actuator_target: Vec<f64>,
    actuator_applied: Vec<f64>,
    physical: Vec<f64>,
    prev_physical: Vec<f64>,
    prev_input: Vec<f64>,
    lagged_bias: Vec<f64>,
    prev_bias: Vec<f64>,
    script: FaultScript,
    script_cursor: usize,
    next_sample: u64,
}

impl SimArm {
    pub fn new(nominal: DhChain, true_delta: &ParamDelta, noise: NoiseModel, seed: u64) -> Result<Self, SimError> {
        noise.validate()?;
        let n = nominal.n_joints();
        let truth = nominal.apply_delta(true_delta);
        Ok(SimArm {
            nominal,
            truth,
            noise,
            ik: IkOptions::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            bias_target: vec![0.0; n],
            bias_applied: vec![0.0; n],
            actuator_target: vec![0.0; n],
            actuator_applied: vec![0.0; n],
            physical: vec![0.0; n],
            prev_physical: vec![0.0; n],
            prev_input: vec![0.0; n],
            lagged_bias: vec![0.0; n],
            prev_bias: vec![0.0; n],
            script: FaultScript::empty(),
            script_cursor: 0,
            next_sample: 0,
        })
    }

    pub fn with_ik_options(mut self, ik: IkOptions) -> Self {
        self.ik = ik;
        self
    }

    /// Installs a fault script; entries fire during telemetry streaming once
    /// the stream clock passes their time.
    pub fn set_fault_script(&mut self, script: FaultScript) -> Result<(), SimError> {
        if let Some(e) = script.entries().iter().find(|e| e.joint > self.n_joints()) {
            return Err(SimError::InvalidScript(format!("joint {} out of range", e.joint)));
        }
        self.script = script;
        self.script_cursor = 0;
        Ok(())
    }

    /// Applies an encoder bias immediately (joint is zero-based).
    pub fn inject_encoder_bias(&mut self, joint: usize, bias: f64) {
        self.bias_target[joint] = bias;
        self.bias_applied[joint] = bias;
        self.lagged_bias[joint] = bias;
        self.prev_bias[joint] = bias;
    }

    /// The nominal chain, which algorithms are allowed to know.
    pub fn nominal(&self) -> &DhChain {
        &self.nominal
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn n_joints(&self) -> usize {
        self.nominal.n_joints()
    }

    /// Stream clock, seconds.
    pub fn time(&self) -> f64 {
        self.next_sample as f64 * TELEMETRY_DT
    }

    fn normal(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sigma).expect("finite nonnegative sigma").sample(&mut self.rng)
    }

    fn encoder_values(&mut self) -> Vec<f64> {
        let n = self.n_joints();
        (0..n).map(|j| self.physical[j] + self.bias_applied[j] + self.normal(self.noise.sigma_enc)).collect()
    }

    /// Current encoder readings.
    pub fn read_encoders(&mut self) -> Vec<f64> {
        self.encoder_values()
    }

    /// Visual-servo emulation: drives the physical tool pose to `target` using
    /// the true kinematics, seeding the solver from `hint` (encoder frame).
    /// Returns the encoder readings at the reached configuration.
    pub fn servo_to(&mut self, target: &Pose, hint: &[f64]) -> Result<Vec<f64>, SimError> {
        let seed: Vec<f64> = hint.iter().zip(&self.bias_applied).map(|(h, b)| h - b).collect();
        let physical = solve_ik(&self.truth, target, &seed, &self.ik).map_err(SimError::ServoFailed)?;
        self.settle_at(physical);
        Ok(self.encoder_values())
    }

    fn settle_at(&mut self, physical: Vec<f64>) {
        self.bias_applied.clone_from(&self.bias_target);
        self.actuator_applied.clone_from(&self.actuator_target);
        self.prev_input.clone_from(&physical);
        self.lagged_bias.clone_from(&self.bias_applied);
        self.prev_bias.clone_from(&self.bias_applied);
        self.prev_physical.clone_from(&physical);
        self.physical = physical;
    }

    /// Places the arm so that its encoders read `encoders` (noise-free) at rest.
    pub fn set_encoder_configuration(&mut self, encoders: &[f64]) {
        let physical = encoders.iter().zip(&self.bias_target).map(|(e, b)| e - b).collect();
        self.settle_at(physical);
    }

    /// Externally observed tool pose with marker noise.
    pub fn measure_marker_pose(&mut self) -> Pose {
        let truth = forward_kinematics(&self.truth, &self.physical);
        self.corrupt_pose(&truth)
    }

    fn corrupt_pose(&mut self, truth: &Pose) -> Pose {
        let sp = self.noise.sigma_p;
        let dp = Vector3::new(self.normal(sp), self.normal(sp), self.normal(sp));
        let angle = self.normal(self.noise.sigma_q).abs();
        let rotation = if angle > 0.0 {
            let axis = loop {
                let v = Vector3::new(
                    StandardNormal.sample(&mut self.rng),
                    StandardNormal.sample(&mut self.rng),
                    StandardNormal.sample(&mut self.rng),
                );
                if v.norm() > 1e-9 {
                    break v;
                }
            };
            (Quat::from_axis_angle(&axis, angle) * truth.rotation).canonical()
        } else {
            truth.rotation
        };
        Pose::new(rotation, truth.position + dp)
    }

    fn apply_due_faults(&mut self, k: u64) {
        while let Some(e) = self.script.entries().get(self.script_cursor).copied() {
            let onset = (e.time / TELEMETRY_DT).round() as u64;
            if k <= onset {
                break;
            }
            let j = e.joint - 1;
            match e.kind {
                FaultKind::Encoder => self.bias_target[j] = e.bias,
                FaultKind::Actuator => self.actuator_target[j] = e.bias,
            }
            log::debug!("fault injected at t={:.3}: joint {} {:?} {:+.4}", k as f64 * TELEMETRY_DT, e.joint, e.kind, e.bias);
            self.script_cursor += 1;
        }
    }

    /// Emits `duration` seconds of 500 Hz telemetry following `trajectory`,
    /// continuing from the current stream clock. Faults take effect strictly
    /// after their scripted time and are slewed in at [`FAULT_SLEW_RATE`].
    pub fn stream_telemetry(&mut self, trajectory: &dyn Trajectory, duration: f64) -> TelemetryStreams {
        let n = self.n_joints();
        let samples = (duration / TELEMETRY_DT).round() as u64;
        let decay = (-TELEMETRY_DT / ACTUATOR_TAU).exp();
        let slew = FAULT_SLEW_RATE * TELEMETRY_DT;
        let mut out = TelemetryStreams::default();
        for _ in 0..samples {
            let k = self.next_sample;
            let t = k as f64 * TELEMETRY_DT;
            if k > 0 {
                self.prev_physical.clone_from(&self.physical);
                for j in 0..n {
                    self.physical[j] = decay * self.physical[j] + (1.0 - decay) * self.prev_input[j];
                    self.lagged_bias[j] = decay * self.lagged_bias[j] + (1.0 - decay) * self.prev_bias[j];
                }
            }
            self.apply_due_faults(k);
            for j in 0..n {
                let db = (self.bias_target[j] - self.bias_applied[j]).clamp(-slew, slew);
                self.bias_applied[j] += db;
                let da = (self.actuator_target[j] - self.actuator_applied[j]).clamp(-slew, slew);
                self.actuator_applied[j] += da;
            }
            let reference = trajectory.joints(t);
            let command: Vec<f64> = (0..n).map(|j| reference[j] - self.bias_applied[j]).collect();
            let input: Vec<f64> = (0..n).map(|j| command[j] + self.actuator_applied[j]).collect();
            let encoders: Vec<f64> = (0..n)
                .map(|j| self.physical[j] + self.lagged_bias[j] + self.normal(self.noise.sigma_enc))
                .collect();
            // Central difference; the next physical sample is already determined
            // by the input held over the coming interval.
            let velocities: Vec<f64> = (0..n)
                .map(|j| {
                    let next = decay * self.physical[j] + (1.0 - decay) * input[j];
                    let prev = if k > 0 { self.prev_physical[j] } else { self.physical[j] };
                    let span = if k > 0 { 2.0 * TELEMETRY_DT } else { TELEMETRY_DT };
                    (next - prev) / span + self.normal(self.noise.sigma_enc)
                })
                .collect();
            let true_pose = forward_kinematics(&self.truth, &self.physical);
            let ee = self.corrupt_pose(&true_pose);
            out.commands.push(Stamped { t, value: command });
            out.positions.push(Stamped { t, value: encoders });
            out.velocities.push(Stamped { t, value: velocities });
            out.ee_pose.push(Stamped { t, value: ee });
            self.prev_input = input;
            self.prev_bias.clone_from(&self.bias_applied);
            self.next_sample += 1;
        }
        out
    }

    /// Random joint vector within `±limit` of zero.
    pub fn random_joints(rng: &mut impl Rng, n: usize, limit: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-limit..limit)).collect()
    }
}
