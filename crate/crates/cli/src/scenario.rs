//! Scenario configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use recal_core::boed::{BoedConfig, ObjectiveWeights};
use recal_core::calib::BoundSpec;
use recal_core::exec::{MissionConfig, MissionScript, SeverityPolicy};
use recal_core::geom::{DhChain, DhParam, ParamDelta, ParamId, ParamMask};
use recal_core::gp::KernelParams;
use recal_core::monsid::DetectionParams;
use recal_core::pipeline::{RecalibrationConfig, StoppingRule};
use recal_core::sim::{FaultKind, FaultScript, NoiseModel};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub chain: DhChain,
    /// Static DH perturbation of the true arm, keyed by parameter name.
    pub true_delta: BTreeMap<ParamId, f64>,
    pub fault_script: FaultScript,
    pub noise: NoiseModel,
    pub seed: u64,
    pub pool_size: usize,
    pub boed: BoedSection,
    pub gp: KernelParams,
    pub qp_bounds: BoundSpec,
    pub mask: MaskSpec,
    pub validation_targets: usize,
    pub monsid: MonsidSection,
    pub mission: Option<MissionSection>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            chain: DhChain::wam7(),
            true_delta: BTreeMap::new(),
            fault_script: FaultScript::default(),
            noise: NoiseModel::default(),
            seed: 0,
            pool_size: 500,
            boed: BoedSection::default(),
            gp: KernelParams::default(),
            qp_bounds: BoundSpec::default(),
            mask: MaskSpec::default(),
            validation_targets: 10,
            monsid: MonsidSection::default(),
            mission: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoedSection {
    pub iterations: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta: f64,
    pub joint_range: f64,
    pub stopping: Option<StoppingRule>,
}

impl Default for BoedSection {
    fn default() -> Self {
        let w = ObjectiveWeights::default();
        BoedSection { iterations: 38, alpha1: w.alpha1, alpha2: w.alpha2, delta: 0.1, joint_range: 1.5, stopping: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSpec {
    Named(MaskPreset),
    List(Vec<ParamId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPreset {
    JointOffsets,
    All,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::Named(MaskPreset::JointOffsets)
    }
}

impl MaskSpec {
    pub fn build(&self, n_joints: usize) -> Result<ParamMask, CliError> {
        match self {
            MaskSpec::Named(MaskPreset::JointOffsets) => Ok(ParamMask::joint_offsets(n_joints)),
            MaskSpec::Named(MaskPreset::All) => Ok(ParamMask::all(n_joints)),
            MaskSpec::List(ids) => ParamMask::from_params(n_joints, ids).map_err(|e| CliError::Config(format!("mask: {e}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonsidSection {
    pub params: DetectionParams,
    pub n_joints: usize,
    pub duplicate_encoders: bool,
    /// Length of the telemetry run for `detect`, seconds.
    pub duration: f64,
    /// Center of the excitation trajectory.
    pub center: Vec<f64>,
}

impl Default for MonsidSection {
    fn default() -> Self {
        MonsidSection {
            params: DetectionParams::default(),
            n_joints: 7,
            duplicate_encoders: false,
            duration: 10.0,
            center: vec![0.0, 0.5, 0.0, 1.2, 0.0, 0.5, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionSection {
    /// Defaults to the sample-delivery mission for the configured chain.
    pub script: Option<MissionScript>,
    pub policy: SeverityPolicy,
    pub chunk: f64,
}

impl Default for MissionSection {
    fn default() -> Self {
        MissionSection { script: None, policy: SeverityPolicy::default(), chunk: 0.1 }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let s: Scenario = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| CliError::Config(m);
        let n = self.chain.n_joints();
        self.noise.validate().map_err(|e| cfg(e.to_string()))?;
        self.gp.validate().map_err(|e| cfg(format!("gp: {e}")))?;
        self.monsid.params.validate().map_err(|e| cfg(format!("monsid: {e}")))?;
        self.mask.build(n)?;
        for id in self.true_delta.keys() {
            if id.joint >= n {
                return Err(cfg(format!("true_delta: {id} is outside a {n}-joint chain")));
            }
        }
        if self.fault_script.entries().iter().any(|f| f.joint == 0 || f.joint > n) {
            return Err(cfg(format!("fault_script: joints must be in 1..={n}")));
        }
        if self.boed.iterations == 0 {
            return Err(cfg("boed.iterations must be positive".into()));
        }
        if !(self.boed.delta > 0.0 && self.boed.delta < 1.0) {
            return Err(cfg("boed.delta must lie in (0, 1)".into()));
        }
        if !(self.boed.alpha1 >= 0.0 && self.boed.alpha2 >= 0.0 && self.boed.alpha1 + self.boed.alpha2 > 0.0) {
            return Err(cfg("boed.alpha1 and boed.alpha2 must be nonnegative and not both zero".into()));
        }
        if self.boed.joint_range.is_nan() || self.boed.joint_range <= 0.0 {
            return Err(cfg("boed.joint_range must be positive".into()));
        }
        let max_samples = self.boed.stopping.map_or(self.boed.iterations, |s| s.max_samples);
        if self.pool_size < max_samples {
            return Err(cfg(format!("pool_size {} is smaller than the {max_samples} samples requested", self.pool_size)));
        }
        if self.validation_targets == 0 {
            return Err(cfg("validation_targets must be positive".into()));
        }
        if self.monsid.n_joints == 0 {
            return Err(cfg("monsid.n_joints must be positive".into()));
        }
        if self.monsid.duration.is_nan() || self.monsid.duration <= 0.0 || self.monsid.center.len() != n {
            return Err(cfg(format!("monsid needs a positive duration and a {n}-joint center")));
        }
        if let Some(m) = &self.mission {
            if m.chunk.is_nan() || m.chunk <= 0.0 {
                return Err(cfg("mission.chunk must be positive".into()));
            }
            self.mission_script().validate(n).map_err(|e| cfg(e.to_string()))?;
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    /// Static perturbation of the true arm.
    pub fn truth(&self) -> ParamDelta {
        let n = self.chain.n_joints();
        let entries: Vec<(ParamId, f64)> = self.true_delta.iter().map(|(k, v)| (*k, *v)).collect();
        ParamDelta::from_entries(n, &entries).expect("validated")
    }

    /// Ground-truth offsets seen by a calibration: the static perturbation
    /// plus `−b` on the offset of every encoder-biased joint.
    pub fn effective_truth(&self) -> BTreeMap<ParamId, f64> {
        let mut out = self.true_delta.clone();
        for f in self.fault_script.entries() {
            if f.kind == FaultKind::Encoder {
                *out.entry(ParamId::new(DhParam::Phi, f.joint - 1)).or_insert(0.0) -= f.bias;
            }
        }
        out.retain(|_, v| *v != 0.0);
        out
    }

    pub fn recalibration_config(&self) -> Result<RecalibrationConfig, CliError> {
        let n = self.chain.n_joints();
        let mut rc = RecalibrationConfig::new(n);
        rc.pool_size = self.pool_size;
        rc.joint_range = self.boed.joint_range;
        rc.iterations = self.boed.iterations;
        rc.stopping = self.boed.stopping;
        rc.boed = BoedConfig {
            weights: ObjectiveWeights { alpha1: self.boed.alpha1, alpha2: self.boed.alpha2, ..ObjectiveWeights::default() },
            delta: self.boed.delta,
            ..BoedConfig::default()
        };
        rc.kernel = self.gp;
        rc.bounds = self.qp_bounds;
        rc.mask = self.mask.build(n)?;
        Ok(rc)
    }

    pub fn mission_script(&self) -> MissionScript {
        self.mission.as_ref().and_then(|m| m.script.clone()).unwrap_or_else(|| MissionScript::sample_delivery(&self.chain))
    }

    pub fn mission_config(&self) -> Result<MissionConfig, CliError> {
        let m = self.mission.clone().unwrap_or_default();
        let mut mc = MissionConfig::new(self.chain.n_joints(), self.seed);
        mc.detection = self.monsid.params;
        mc.policy = m.policy;
        mc.recalibration = self.recalibration_config()?;
        mc.validation_targets = self.validation_targets;
        mc.chunk = m.chunk;
        Ok(mc)
    }
}
