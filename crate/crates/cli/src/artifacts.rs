//! Artifact schemas with matching writers and loaders.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use recal_core::calib::{CalibrationReport, CalibrationResult};
use recal_core::exec::{ValidationReport, ValidationRow};
use recal_core::geom::{DhChain, ParamId};
use recal_core::monsid::{AmbiguityGroup, ComponentGraph, CoordinatorStats, Declaration, EngineCounters};
use recal_core::sim::TelemetryStreams;

use crate::{accuracy_of, CliError};

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub passed: bool,
    pub orientation_before: f64,
    pub orientation_after: f64,
    pub orientation_reduction: f64,
    pub position_before: f64,
    pub position_after: f64,
}

/// Contents of `calibration.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub converged: bool,
    pub samples: usize,
    pub stopped_early: bool,
    pub corrections: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub injected: BTreeMap<String, f64>,
    /// Present only when the scenario injects a fault.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub report: CalibrationReport,
    pub chain: DhChain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSummary>,
}

impl CalibrationArtifact {
    pub fn new(
        result: &CalibrationResult,
        nominal: &DhChain,
        truth: &BTreeMap<ParamId, f64>,
        samples: usize,
        stopped_early: bool,
        validation: Option<&ValidationReport>,
        converged: bool,
    ) -> Self {
        let report = result.report();
        let accuracy = accuracy_of(truth, |id| result.chain.param(id) - nominal.param(id));
        CalibrationArtifact {
            converged,
            samples,
            stopped_early,
            corrections: report.corrections.clone(),
            injected: truth.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            accuracy,
            report,
            chain: result.chain.clone(),
            validation: validation.map(|v| ValidationSummary {
                passed: v.passed,
                orientation_before: v.orientation_before,
                orientation_after: v.orientation_after,
                orientation_reduction: v.orientation_reduction,
                position_before: v.position_before,
                position_after: v.position_after,
            }),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        read_json(path)
    }
}

/// One row of `validation.csv`: a held-out pose under the three sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationArtifactRow {
    pub pose: usize,
    pub meas_px: f64,
    pub meas_py: f64,
    pub meas_pz: f64,
    pub meas_qw: f64,
    pub meas_qx: f64,
    pub meas_qy: f64,
    pub meas_qz: f64,
    pub uncal_px: f64,
    pub uncal_py: f64,
    pub uncal_pz: f64,
    pub uncal_qw: f64,
    pub uncal_qx: f64,
    pub uncal_qy: f64,
    pub uncal_qz: f64,
    pub cal_px: f64,
    pub cal_py: f64,
    pub cal_pz: f64,
    pub cal_qw: f64,
    pub cal_qx: f64,
    pub cal_qy: f64,
    pub cal_qz: f64,
}

impl ValidationArtifactRow {
    pub fn new(pose: usize, r: &ValidationRow) -> Self {
        // Quaternions share the measured hemisphere so columns plot continuously.
        let m = r.measured.canonical().to_vector7();
        let align = |p: &recal_core::geom::Pose| {
            let mut v = p.to_vector7();
            if v[3] * m[3] + v[4] * m[4] + v[5] * m[5] + v[6] * m[6] < 0.0 {
                for x in &mut v[3..] {
                    *x = -*x;
                }
            }
            v
        };
        let u = align(&r.uncalibrated);
        let c = align(&r.calibrated);
        ValidationArtifactRow {
            pose,
            meas_px: m[0],
            meas_py: m[1],
            meas_pz: m[2],
            meas_qw: m[3],
            meas_qx: m[4],
            meas_qy: m[5],
            meas_qz: m[6],
            uncal_px: u[0],
            uncal_py: u[1],
            uncal_pz: u[2],
            uncal_qw: u[3],
            uncal_qx: u[4],
            uncal_qy: u[5],
            uncal_qz: u[6],
            cal_px: c[0],
            cal_py: c[1],
            cal_pz: c[2],
            cal_qw: c[3],
            cal_qx: c[4],
            cal_qy: c[5],
            cal_qz: c[6],
        }
    }
}

pub fn write_validation_csv(path: &Path, rows: &[ValidationArtifactRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_validation_csv(path: &Path) -> Result<Vec<ValidationArtifactRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Contents of `engine_state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStateArtifact {
    pub counters: EngineCounters,
    pub coordinator: CoordinatorStats,
    pub declaration: Option<Declaration>,
}

/// One entry of `ambiguity_groups.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub id: usize,
    pub members: Vec<String>,
    /// Names of the checks that flag this group.
    pub signature: Vec<String>,
}

impl GroupRow {
    pub fn new(g: &AmbiguityGroup, graph: &ComponentGraph) -> Self {
        let signature = g.signature_checks.iter().map(|&c| graph.checks()[c].name.clone()).collect();
        GroupRow { id: g.id, members: g.members.clone(), signature }
    }
}

/// Per-channel telemetry CSVs: commands, positions, velocities, ee_pose.
pub fn write_streams(dir: &Path, s: &TelemetryStreams, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let n = s.commands.first().map_or(0, |c| c.value.len());
    let joint_header: Vec<String> = std::iter::once("t".to_string()).chain((1..=n).map(|j| format!("j{j}"))).collect();
    for (name, data) in [("commands.csv", &s.commands), ("positions.csv", &s.positions), ("velocities.csv", &s.velocities)] {
        let p = dir.join(name);
        let mut w = csv::Writer::from_path(&p).map_err(csv_err)?;
        w.write_record(&joint_header).map_err(csv_err)?;
        for m in data {
            let rec: Vec<String> = std::iter::once(m.t).chain(m.value.iter().copied()).map(|v| v.to_string()).collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        written.push(p);
    }
    let p = dir.join("ee_pose.csv");
    let mut w = csv::Writer::from_path(&p).map_err(csv_err)?;
    w.write_record(["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]).map_err(csv_err)?;
    for m in &s.ee_pose {
        let rec: Vec<String> = std::iter::once(m.t).chain(m.value.to_vector7()).map(|v| v.to_string()).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    written.push(p);
    Ok(())
}

/// Reads one of the per-joint channel CSVs back as (t, values) rows.
pub fn read_channel_csv(path: &Path) -> Result<Vec<(f64, Vec<f64>)>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))))
            .collect::<Result<_, _>>()?;
        let (t, rest) = vals.split_first().ok_or_else(|| CliError::Runtime("empty row".into()))?;
        out.push((*t, rest.to_vec()));
    }
    Ok(out)
}
