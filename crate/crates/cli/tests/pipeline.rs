//! End-to-end pipeline tests driving the real binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use scenario_forge::ingest::{log_to_csv, ActorTrack, DrivingLog, Sample};

fn forge(db: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenario-forge"))
        .arg("--db")
        .arg(db)
        .args(args)
        .output()
        .expect("spawn scenario-forge")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Overtake log with adjustable timing, so the mined class has spread in
/// every slot parameter.
fn jittered_overtake_log(idx: usize) -> DrivingLog {
    let dt = 0.1;
    let n = 301;
    let v_target = 25.0 + 0.6 * idx as f64;
    let t_out = 2.0 + 0.3 * idx as f64;
    let t_back = 10.0 + 0.4 * idx as f64;
    let dur = 3.0 + 0.2 * (idx % 4) as f64;
    let track = |actor: &str, is_ego: bool, x0: f64, v: f64, ramps: &[(f64, f64, f64)]| {
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                let mut y = 0.0;
                let mut lane = 1;
                for &(r0, r1, dir) in ramps {
                    let u: f64 = ((t - r0) / (r1 - r0)).clamp(0.0, 1.0);
                    y += dir * 3.5 * u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
                    if u >= 0.5 {
                        lane -= dir as i32;
                    }
                }
                Sample {
                    t,
                    x: x0 + v * t,
                    y,
                    v,
                    a: 0.0,
                    heading: 0.0,
                    lane_index: lane,
                }
            })
            .collect();
        ActorTrack {
            actor: actor.to_string(),
            is_ego,
            samples,
        }
    };
    DrivingLog {
        dt,
        source_id: format!("jitter-{idx}"),
        actors: vec![
            track("ego", true, 0.0, 20.0, &[]),
            track(
                "t1",
                false,
                -30.0,
                v_target,
                &[(t_out, t_out + dur, 1.0), (t_back, t_back + dur, -1.0)],
            ),
        ],
        metadata: BTreeMap::new(),
    }
}

fn ingest_builtin(db: &Path, name: &str) -> String {
    let out = forge(db, &["ingest", "--builtin", name]);
    assert_ok(&out, "ingest builtin");
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    parsed["log_id"].as_str().unwrap().to_string()
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db");

    // Fig.-style synthetic log plus jittered companions for class spread.
    let mut log_ids = vec![ingest_builtin(&db, "two-overtakes")];
    for idx in 0..4 {
        let csv_path = dir.path().join(format!("jitter-{idx}.csv"));
        std::fs::write(&csv_path, log_to_csv(&jittered_overtake_log(idx))).unwrap();
        let out = forge(&db, &["ingest", csv_path.to_str().unwrap()]);
        assert_ok(&out, "ingest csv");
        let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        log_ids.push(parsed["log_id"].as_str().unwrap().to_string());
    }

    let timeline = dir.path().join("timeline.csv");
    let out = forge(
        &db,
        &[
            "decompose",
            &log_ids[0],
            "--dump-timeline",
            timeline.to_str().unwrap(),
        ],
    );
    assert_ok(&out, "decompose");
    assert!(timeline.exists());

    for id in &log_ids {
        assert_ok(&forge(&db, &["mine", id]), "mine");
    }

    let out = forge(
        &db,
        &["fit", "overtakes", "--pattern", "overtake-of-ego"],
    );
    assert_ok(&out, "fit");

    let batch = dir.path().join("batch.json");
    let out = forge(
        &db,
        &[
            "generate", "overtakes", "-n", "5", "--tail-c", "2.0", "--seed", "7", "--out",
            batch.to_str().unwrap(),
        ],
    );
    assert_ok(&out, "generate");

    let results_a = dir.path().join("results-a");
    let results_b = dir.path().join("results-b");
    for results in [&results_a, &results_b] {
        let out = forge(
            &db,
            &[
                "simulate",
                batch.to_str().unwrap(),
                "--seed",
                "3",
                "--jobs",
                "2",
                "--out",
                results.to_str().unwrap(),
            ],
        );
        assert_ok(&out, "simulate");
    }
    // Determinism across runs: byte-identical results.
    assert_eq!(
        std::fs::read(results_a.join("results.json")).unwrap(),
        std::fs::read(results_b.join("results.json")).unwrap()
    );

    let report_json = dir.path().join("report.json");
    let out = forge(
        &db,
        &[
            "report",
            results_a.to_str().unwrap(),
            batch.to_str().unwrap(),
            "--out",
            report_json.to_str().unwrap(),
        ],
    );
    assert_ok(&out, "report json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_json).unwrap()).unwrap();
    assert_eq!(report["v"], 1);
    assert_eq!(report["n_scenarios"], 5);

    let report_txt = dir.path().join("report.txt");
    let out = forge(
        &db,
        &[
            "report",
            results_a.to_str().unwrap(),
            batch.to_str().unwrap(),
            "--out",
            report_txt.to_str().unwrap(),
        ],
    );
    assert_ok(&out, "report txt");
    let text = std::fs::read_to_string(&report_txt).unwrap();
    assert!(text.contains("RECOMMENDATION"));

    assert_ok(&forge(&db, &["audit"]), "audit");
}

#[test]
fn generate_unknown_class_exits_2_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db");
    let out = forge(
        &db,
        &["generate", "nope", "--out", dir.path().join("b.json").to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "UnknownClass");
}

#[test]
fn missing_db_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_scenario-forge"))
        .env_remove("SCENARIO_FORGE_DB")
        .args(["audit"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "Usage");
}

#[test]
fn db_from_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_scenario-forge"))
        .env("SCENARIO_FORGE_DB", dir.path().join("db"))
        .args(["audit"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_log_id_is_an_invariant_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(&dir.path().join("db"), &["decompose", "deadbeef"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "Db");
}

#[test]
fn reingesting_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db");
    let a = ingest_builtin(&db, "two-overtakes");
    let b = ingest_builtin(&db, "two-overtakes");
    assert_eq!(a, b, "content-addressed ids must match");
}
