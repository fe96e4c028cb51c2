use std::path::Path;
use std::process::{Command, Output};

fn knac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knac"))
        .args(args)
        .current_dir(cwd)
        .env_remove("KNAC_DATA_DIR")
        .output()
        .expect("run knac")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn demo(dir: &Path, scenario: &str, seed: &str, out: &str) -> Output {
    let o = knac(&["demo", "--scenario", scenario, "--seed", seed, "-o", out], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn demo_is_deterministic_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path(), "split", "7", "a");
    demo(dir.path(), "split", "7", "b");
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for name in ["recommendations.json", "recommendations.txt"] {
        let got = std::fs::read_to_string(dir.path().join("a").join(name)).unwrap();
        let want = std::fs::read_to_string(golden.join(format!("demo_split_{name}"))).unwrap();
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn lambda_split_of_one_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path(), "split", "7", "d");
    let o = knac(
        &[
            "recommend",
            "--data", "d/dataset/features.csv",
            "--expert", "d/dataset/expert.csv",
            "--clusters", "d/dataset/clusters.csv",
            "--lambda-split", "1.0",
            "-o", "out",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_split"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn recommend_writes_json_text_and_matrices() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path(), "merge", "11", "d");
    let o = knac(
        &[
            "recommend",
            "--data", "d/dataset/features.csv",
            "--expert", "d/dataset/expert.csv",
            "--clusters", "d/dataset/clusters.csv",
            "--epsilon-split", "0.8", "--lambda-split", "0.1",
            "--epsilon-merge", "0.8", "--lambda-merge", "0.2",
            "--linkage", "average",
            "--seed", "11",
            "--format", "json",
            "-o", "out",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let recs = json["recommendations"].as_array().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["type"], "merge");
    assert!(std::fs::read_to_string(dir.path().join("out/recommendations.txt")).unwrap().starts_with("MERGE"));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/matrices.json")).unwrap()).unwrap();
    assert_eq!(m["h_sim"].as_array().unwrap().len(), 4);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out/recommendations.json")).unwrap(),
        std::fs::read_to_string(dir.path().join("d/recommendations.json")).unwrap(),
    );
}

#[test]
fn session_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    demo(cwd, "split", "7", "d");
    let inputs = [
        "--data", "d/dataset/features.csv",
        "--expert", "d/dataset/expert.csv",
        "--clusters", "d/dataset/clusters.csv",
        "--truth", "d/dataset/truth.csv",
    ];
    let mut start = vec!["start", "--id", "s1", "--data-dir", "store", "--seed", "7"];
    start.extend(inputs);
    let o = knac(&start, cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("r0-s0: SPLIT EXPERT CLUSTER E_2"));

    let o = knac(&["apply", "--session", "s1", "--accept", "nope", "--data-dir", "store"], cwd);
    assert_eq!(o.status.code(), Some(2));

    let o = knac(&["apply", "--session", "s1", "--accept", "r0-s0", "--data-dir", "store"], cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"parent\":\"E_2\""));
    assert!(cwd.join("store/s1/kb/v2.json").is_file());
    assert_eq!(std::fs::read_to_string(cwd.join("store/s1/decisions.log")).unwrap().lines().count(), 1);

    let o = Command::new(env!("CARGO_BIN_EXE_knac"))
        .args(["eval", "--session", "s1", "--format", "json"])
        .current_dir(cwd)
        .env("KNAC_DATA_DIR", "store")
        .output()
        .unwrap();
    let history: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(history[1]["vs_truth"]["v_measure"], 1.0);

    let o = knac(&["auto-expert", "--session", "s1", "--data-dir", "store"], cwd);
    assert!(o.status.success());
    assert!(stdout(&o).contains("converged"));

    let o = knac(&["eval", "--truth", "d/dataset/truth.csv", "--labels", "d/final_labels.csv"], cwd);
    assert!(stdout(&o).contains("v-measure 1.0000"), "{}", stdout(&o));
}

#[test]
fn explain_lists_rules() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path(), "split", "7", "d");
    let o = knac(
        &[
            "explain",
            "--data", "d/dataset/features.csv",
            "--expert", "d/dataset/expert.csv",
            "--kmeans", "4",
            "--seed", "7",
            "--recommendation", "r0-s0",
            "-o", "out",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("Precision: 1.00"), "{text}");
    assert!(dir.path().join("out/explanations.json").is_file());
}
