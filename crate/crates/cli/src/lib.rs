//! Command implementations behind the `recal` binary.

pub mod artifacts;
pub mod scenario;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use recal_core::calib::{accuracy_metric, CalibError};
use recal_core::exec::{run_mission, validate_recalibration, ExecState};
use recal_core::monsid::{analyze_ambiguity_groups, coordinate, ComponentGraph, HealthEventKind, MonsidEngine};
use recal_core::pipeline::{recalibrate, PipelineError};
use recal_core::sim::{FaultKind, SimArm, SinusoidTrajectory};

use artifacts::{CalibrationArtifact, EngineStateArtifact, GroupRow, ValidationArtifactRow};
pub use scenario::Scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_SAFE_MODE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) | CliError::Io(_) => EXIT_FAILED,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Summary of one command run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub message: String,
    pub artifacts: Vec<PathBuf>,
}

fn out_file(dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> PathBuf {
    let p = dir.join(name);
    written.push(p.clone());
    p
}

fn build_arm(s: &Scenario, encoder_faults_now: bool) -> Result<SimArm, CliError> {
    let mut arm = SimArm::new(s.chain.clone(), &s.truth(), s.noise, s.seed).map_err(|e| CliError::Config(e.to_string()))?;
    if encoder_faults_now {
        for f in s.fault_script.entries() {
            if f.kind == FaultKind::Encoder {
                arm.inject_encoder_bias(f.joint - 1, f.bias);
            }
        }
    } else {
        arm.set_fault_script(s.fault_script.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(arm)
}

/// Runs the design loop, identifies the correction and validates it on fresh
/// poses. Encoder faults in the script are active for the whole run.
pub fn cmd_calibrate(s: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    let rc = s.recalibration_config()?;
    let mut arm = build_arm(s, true)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let truth = s.effective_truth();
    let outcome = match recalibrate(&mut arm, &s.chain, &rc, s.seed.wrapping_add(1)) {
        Ok(o) => o,
        Err(PipelineError::Calib(CalibError::NotConverged(result))) => {
            let art = CalibrationArtifact::new(&result, &s.chain, &truth, 0, false, None, false);
            art.write(&out_file(out, "calibration.json", &mut written))?;
            return Ok(Outcome {
                exit_code: EXIT_NOT_CONVERGED,
                message: format!("calibration did not converge after {} iterations", result.iterations),
                artifacts: written,
            });
        }
        Err(PipelineError::InvalidConfig(m)) => return Err(CliError::Config(m)),
        Err(e) => return Err(runtime(e)),
    };
    let f = fs::File::create(out_file(out, "boed_trace.csv", &mut written))?;
    outcome.trace.write_csv(f).map_err(runtime)?;

    let report = validate_recalibration(
        &s.chain,
        &outcome.calibration.chain,
        &mut arm,
        s.validation_targets,
        rc.joint_range,
        s.seed.wrapping_add(2),
    );
    let rows: Vec<ValidationArtifactRow> = report.rows.iter().enumerate().map(|(i, r)| ValidationArtifactRow::new(i, r)).collect();
    artifacts::write_validation_csv(&out_file(out, "validation.csv", &mut written), &rows)?;

    let art = CalibrationArtifact::new(
        &outcome.calibration,
        &s.chain,
        &truth,
        outcome.samples,
        outcome.stopped_early,
        Some(&report),
        true,
    );
    art.write(&out_file(out, "calibration.json", &mut written))?;
    let mut message = format!("{} samples; ", outcome.samples);
    for (k, v) in &art.corrections {
        if v.abs() > 1e-6 {
            message.push_str(&format!("{k} = {v:+.4} "));
        }
    }
    if let Some(a) = art.accuracy {
        message.push_str(&format!("; accuracy {a:.1}%"));
    }
    message.push_str(&format!(
        "; validation {} (orientation {:.4} -> {:.4} rad)",
        if report.passed { "passed" } else { "FAILED" },
        report.orientation_before,
        report.orientation_after
    ));
    Ok(Outcome { exit_code: if report.passed { EXIT_OK } else { EXIT_FAILED }, message, artifacts: written })
}

/// Streams scripted telemetry through the coordinator and the detection engine.
pub fn cmd_detect(s: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    if s.monsid.duplicate_encoders {
        return Err(CliError::Config("the runtime engine does not support duplicated encoders".into()));
    }
    if s.monsid.n_joints != s.chain.n_joints() {
        return Err(CliError::Config("monsid.n_joints must match the chain".into()));
    }
    let mut engine = MonsidEngine::new(ComponentGraph::arm(s.chain.n_joints()), s.monsid.params, s.chain.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut arm = build_arm(s, false)?;
    arm.set_encoder_configuration(&s.monsid.center);
    let traj = SinusoidTrajectory::default_for(s.monsid.center.clone());
    let streams = arm.stream_telemetry(&traj, s.monsid.duration);
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    artifacts::write_streams(out, &streams, &mut written)?;

    let (slices, stats) = coordinate(streams);
    engine.add_dropped(stats.dropped);
    let mut events = Vec::new();
    for slice in &slices {
        let (_, ev) = engine.step(slice).map_err(runtime)?;
        events.extend(ev);
    }
    artifacts::write_jsonl(&out_file(out, "health.jsonl", &mut written), &events)?;
    let state = EngineStateArtifact {
        counters: engine.counters(),
        coordinator: stats,
        declaration: engine.declaration().cloned(),
    };
    artifacts::write_json(&out_file(out, "engine_state.json", &mut written), &state)?;
    let message = match &state.declaration {
        Some(d) => format!("{} slices; FAULTY at t = {:.2} s: {}", state.counters.slices_processed, d.t, d.elements.join(", ")),
        None => format!(
            "{} slices; no fault declared ({} suspect episodes)",
            state.counters.slices_processed, state.counters.suspect_episodes
        ),
    };
    debug_assert!(events.iter().filter(|e| e.event == HealthEventKind::Faulty).count() == state.counters.declarations);
    Ok(Outcome { exit_code: EXIT_OK, message, artifacts: written })
}

/// Replays the mission with live detection and recovery.
pub fn cmd_mission(s: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    if s.mission.is_none() {
        return Err(CliError::Config("scenario has no mission section".into()));
    }
    let script = s.mission_script();
    let mc = s.mission_config()?;
    let mut arm = build_arm(s, false)?;
    let report = run_mission(&mut arm, &s.chain, &script, &mc).map_err(runtime)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    artifacts::write_jsonl(&out_file(out, "mission.jsonl", &mut written), &report.log)?;
    artifacts::write_jsonl(&out_file(out, "health.jsonl", &mut written), &report.health_events)?;
    let sequence: Vec<String> = report.state_sequence().iter().map(|s| s.to_string()).collect();
    let message = format!(
        "{}/{} steps; final state {}; states {}",
        report.steps_completed,
        script.steps.len(),
        report.final_state,
        sequence.join(" -> ")
    );
    let exit_code = if report.final_state == ExecState::SafeMode {
        EXIT_SAFE_MODE
    } else if report.completed {
        EXIT_OK
    } else {
        EXIT_FAILED
    };
    Ok(Outcome { exit_code, message, artifacts: written })
}

/// Prints the ambiguity-group table and writes it as JSON.
pub fn cmd_ambiguity(s: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    let n = s.monsid.n_joints;
    let graph = if s.monsid.duplicate_encoders {
        ComponentGraph::arm_with_duplicate_encoders(n)
    } else {
        ComponentGraph::arm(n)
    };
    let groups = analyze_ambiguity_groups(&graph);
    let rows: Vec<GroupRow> = groups.iter().map(|g| GroupRow::new(g, &graph)).collect();
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    artifacts::write_json(&out_file(out, "ambiguity_groups.json", &mut written), &rows)?;
    let mut table = format!("{:>3}  {:<40}  signature\n", "id", "members");
    for r in &rows {
        table.push_str(&format!("{:>3}  {:<40}  {}\n", r.id, r.members.join(", "), r.signature.join(" ")));
    }
    table.push_str(&format!("{} groups", rows.len()));
    Ok(Outcome { exit_code: EXIT_OK, message: table, artifacts: written })
}

pub(crate) fn accuracy_of(truth: &std::collections::BTreeMap<recal_core::geom::ParamId, f64>, est: impl Fn(recal_core::geom::ParamId) -> f64) -> Option<f64> {
    let (id, v) = truth.iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
    Some(accuracy_metric(*v, est(*id)).unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ambiguity_counts() {
        let dir = std::env::temp_dir().join(format!("recal-amb-{}", std::process::id()));
        let mut s = Scenario::default();
        assert!(cmd_ambiguity(&s, &dir).unwrap().message.ends_with("15 groups"));
        s.monsid.n_joints = 1;
        assert!(cmd_ambiguity(&s, &dir).unwrap().message.ends_with("3 groups"));
        s.monsid.n_joints = 7;
        s.monsid.duplicate_encoders = true;
        assert!(cmd_ambiguity(&s, &dir).unwrap().message.ends_with("22 groups"));
        let _ = fs::remove_dir_all(dir);
    }
}
