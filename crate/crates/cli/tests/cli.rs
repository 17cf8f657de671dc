use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use recal_cli::artifacts::*;
use recal_core::boed::BoedTrace;
use recal_core::exec::LogRecord;
use recal_core::monsid::{HealthEvent, HealthEventKind};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn recal(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recal"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .env_remove("MANIP_RECAL_OUT")
        .output()
        .unwrap()
}

fn run(cmd: &str, config: &str, out: &Path) -> i32 {
    let o = recal(&[cmd, "--config", scenario(config).to_str().unwrap()], out);
    o.status.code().unwrap()
}

#[test]
fn malformed_config_exits_3_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"noise": {"sigma_p": 0.001, "sigma_x": 1}}"#).unwrap();
    let out = dir.path().join("out");
    for cmd in ["calibrate", "detect", "mission", "ambiguity"] {
        let o = recal(&[cmd, "--config", cfg.to_str().unwrap()], &out);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        assert!(!out.exists());
    }
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(recal(&["calibrate", "--config", cfg.to_str().unwrap()], &out).status.code(), Some(3));
    std::fs::write(&cfg, r#"{"fault_script": [{"time": 1.0, "joint": 9, "bias": 0.1, "kind": "encoder"}]}"#).unwrap();
    assert_eq!(recal(&["detect", "--config", cfg.to_str().unwrap()], &out).status.code(), Some(3));
    let missing = dir.path().join("missing.json");
    assert_eq!(recal(&["detect", "--config", missing.to_str().unwrap()], &out).status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn calibrate_test1_recovers_offset_and_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("calibrate", "test1.json", dir.path()), 0);
    let cal = CalibrationArtifact::read(&dir.path().join("calibration.json")).unwrap();
    assert!(cal.converged);
    assert_eq!(cal.samples, 38);
    assert!(cal.accuracy.unwrap() >= 90.0);
    assert!((cal.corrections["phi7"] - cal.injected["phi7"]).abs() < 0.05);
    assert!(cal.validation.as_ref().unwrap().passed);
    let again = serde_json::to_string_pretty(&cal).unwrap() + "\n";
    assert_eq!(again, std::fs::read_to_string(dir.path().join("calibration.json")).unwrap());

    let trace = BoedTrace::read_csv(std::fs::File::open(dir.path().join("boed_trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.len(), 38);
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    // Quaternions are renormalized on load, so compare numerically.
    let original = std::fs::read_to_string(dir.path().join("boed_trace.csv")).unwrap();
    let rewritten = String::from_utf8(buf).unwrap();
    assert_eq!(original.lines().count(), rewritten.lines().count());
    for (a, b) in original.lines().zip(rewritten.lines()).skip(1) {
        for (x, y) in a.split(',').zip(b.split(',')) {
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    let rows = read_validation_csv(&dir.path().join("validation.csv")).unwrap();
    assert_eq!(rows.len(), 10);
    let copy = dir.path().join("validation_copy.csv");
    write_validation_csv(&copy, &rows).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(dir.path().join("validation.csv")).unwrap());
}

#[test]
fn zero_fault_calibration_omits_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("calibrate", "zero_fault.json", dir.path()), 0);
    let text = std::fs::read_to_string(dir.path().join("calibration.json")).unwrap();
    assert!(!text.contains("\"accuracy\""));
    let cal = CalibrationArtifact::read(&dir.path().join("calibration.json")).unwrap();
    assert!(cal.accuracy.is_none());
    assert!(cal.validation.unwrap().passed);
}

#[test]
fn detect_joint6_bias_names_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("detect", "detect_j6.json", dir.path()), 0);
    let events: Vec<HealthEvent> = read_jsonl(&dir.path().join("health.jsonl")).unwrap();
    let faulty: Vec<_> = events.iter().filter(|e| e.event == HealthEventKind::Faulty).collect();
    assert_eq!(faulty.len(), 1);
    assert_eq!(faulty[0].elements, vec!["J6_Angle_Pos".to_string()]);
    assert!(faulty[0].t >= 2.10 - 1e-9 && faulty[0].t <= 2.30 + 1e-9);
    let state: EngineStateArtifact = read_json(&dir.path().join("engine_state.json")).unwrap();
    assert!((499..=501).contains(&state.counters.slices_processed));
    assert_eq!(state.counters.slices_dropped, 0);
    assert_eq!(state.declaration.unwrap().elements, vec!["J6_Angle_Pos".to_string()]);
    for ch in ["commands.csv", "positions.csv", "velocities.csv"] {
        let rows = read_channel_csv(&dir.path().join(ch)).unwrap();
        assert_eq!(rows.len(), 5000, "{ch}");
        assert_eq!(rows[0].1.len(), 7);
    }
    assert_eq!(read_channel_csv(&dir.path().join("ee_pose.csv")).unwrap()[10].1.len(), 7);
}

#[test]
fn detect_nominal_has_no_faulty_records() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("detect", "nominal.json", dir.path()), 0);
    let events: Vec<HealthEvent> = read_jsonl(&dir.path().join("health.jsonl")).unwrap();
    assert!(events.iter().all(|e| e.event != HealthEventKind::Faulty));
}

fn states(log: &[LogRecord]) -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for r in log {
        let s = r.state.to_string();
        if v.last() != Some(&s) {
            v.push(s);
        }
    }
    v
}

#[test]
fn mission_exit_codes_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = dir.path().join("t1");
    assert_eq!(run("mission", "mission_test1.json", &t1), 0);
    let log: Vec<LogRecord> = read_jsonl(&t1.join("mission.jsonl")).unwrap();
    assert_eq!(states(&log), ["NOMINAL", "HALTED", "RECALIBRATING", "VALIDATING", "NOMINAL"]);
    assert!(log.last().unwrap().event.contains("stow"));

    let nominal = dir.path().join("nominal");
    assert_eq!(run("mission", "nominal.json", &nominal), 0);
    let log: Vec<LogRecord> = read_jsonl(&nominal.join("mission.jsonl")).unwrap();
    assert_eq!(states(&log), ["NOMINAL"]);

    let unfixable = dir.path().join("unfixable");
    assert_eq!(run("mission", "unfixable.json", &unfixable), 4);
    let log: Vec<LogRecord> = read_jsonl(&unfixable.join("mission.jsonl")).unwrap();
    assert_eq!(log.last().unwrap().state.to_string(), "SAFE_MODE");

    // A scenario without a mission section is a configuration error.
    assert_eq!(run("mission", "test1.json", &dir.path().join("none")), 3);
}

#[test]
fn ambiguity_tables() {
    let dir = tempfile::tempdir().unwrap();
    for (cfg, n) in [("ambiguity_one_joint.json", 3), ("ambiguity_duplicate_encoders.json", 22), ("test1.json", 15)] {
        let out = dir.path().join(cfg);
        assert_eq!(run("ambiguity", cfg, &out), 0);
        let rows: Vec<GroupRow> = read_json(&out.join("ambiguity_groups.json")).unwrap();
        assert_eq!(rows.len(), n, "{cfg}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_recal")).args(["ambiguity", "--out"]).arg(dir.path().join("print")).output().unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("J2_Angle_Cmd, Shoulder Joint 2"));
    assert!(text.contains("15 groups"));
}

#[test]
fn runs_are_deterministic_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let cfg = scenario("zero_fault.json");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(recal(&["calibrate", "--config", cfg], &a).status.code(), Some(0));
    assert_eq!(recal(&["calibrate", "--config", cfg], &b).status.code(), Some(0));
    assert_eq!(recal(&["calibrate", "--config", cfg, "--seed", "99"], &c).status.code(), Some(0));
    for f in ["boed_trace.csv", "calibration.json", "validation.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("boed_trace.csv")).unwrap(), std::fs::read(c.join("boed_trace.csv")).unwrap());
    let (d, e) = (dir.path().join("d"), dir.path().join("e"));
    run("detect", "detect_j6.json", &d);
    run("detect", "detect_j6.json", &e);
    for f in ["health.jsonl", "engine_state.json", "positions.csv", "ee_pose.csv"] {
        assert_eq!(std::fs::read(d.join(f)).unwrap(), std::fs::read(e.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_recal"))
        .args(["ambiguity", "--quiet"])
        .env("MANIP_RECAL_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(target.join("ambiguity_groups.json").exists());
}
