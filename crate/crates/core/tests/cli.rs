mod common;

use std::path::Path;

use assert_cmd::Command;

fn bin() -> Command {
    Command::cargo_bin("scene-ground").unwrap()
}

fn fx(name: &str) -> String {
    common::fixtures().join(name).display().to_string()
}

fn run_args(cmd: &mut Command, tasks: &str, out: &Path) {
    cmd.args(["--tasks", &fx(tasks)])
        .args(["--scenes", &fx("scenes")])
        .args(["--backend", &format!("scripted:{}", fx("scripts.json"))])
        .args(["--out", &out.display().to_string()]);
}

fn stdout(out: &std::process::Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn transcribe_full_and_filtered() {
    let out = bin()
        .args(["transcribe", &fx("scenes/scene0592_00.json")])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("scene0592_00: Scene center: ["));
    assert_eq!(text.lines().count(), 15);
    assert!(text.contains("copier, id=6, ctr="));

    let out = bin()
        .args([
            "transcribe",
            &fx("scenes/scene0592_00.json"),
            "--utterance",
            common::CORNER_UTTERANCE,
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains(
        "chair, id=18, ctr=[-2.98, -3.31, 0.39], size=[0.53, 0.61, 0.81], rgb=[60, 58, 50];"
    ));
    assert!(!text.contains("copier"));
    assert!(!text.contains("monitor"));
}

#[test]
fn transcribe_missing_file_is_an_input_error() {
    bin()
        .args(["transcribe", "/no/such/scene.json"])
        .assert()
        .code(2);
}

#[test]
fn ground_prints_id_and_appends_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.args(["ground", "--task-id", "t00"]);
    run_args(&mut cmd, "tasks.jsonl", dir.path());
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout(&out), "18\n");
    let traces = std::fs::read_to_string(dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 1);
    let trace: serde_json::Value = serde_json::from_str(traces.lines().next().unwrap()).unwrap();
    assert_eq!(trace["task_id"], "t00");
    assert_eq!(trace["outcome"], "answered");
    assert_eq!(trace["rounds_used"], 2);
}

#[test]
fn ground_unknown_task_and_unanswered_task() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.args(["ground", "--task-id", "nope"]);
    run_args(&mut cmd, "tasks.jsonl", dir.path());
    cmd.assert().code(2);

    let mut cmd = bin();
    cmd.args(["ground", "--task-id", "t07", "--max-rounds", "3"]);
    run_args(&mut cmd, "tasks.jsonl", dir.path());
    cmd.assert().code(1);
}

#[test]
fn ground_scanrefer_prints_box() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.args(["ground", "--task-id", "t08", "--protocol", "scanrefer"]);
    run_args(&mut cmd, "tasks.jsonl", dir.path());
    let out = cmd.output().unwrap();
    assert!(out.status.success());
    assert_eq!(
        stdout(&out),
        "center=[2.10, -2.40, 0.40] size=[0.50, 0.50, 0.80]\n"
    );
}

#[test]
fn eval_report_is_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.args(["eval", "--jobs", "4"]);
    run_args(&mut cmd, "tasks.jsonl", dir.path());
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let expected = "   Overall      Easy      Hard View Dep. View Ind.\n      70.0      66.7      75.0      50.0      75.0\n      7/10       4/6       3/4       1/2       6/8\n";
    assert_eq!(stdout(&out), expected);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("report.txt")).unwrap(),
        expected
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["overall"]["correct"], 7);
    let traces = std::fs::read_to_string(dir.path().join("traces.jsonl")).unwrap();
    let ids: Vec<String> = traces
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["task_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids, (0..10).map(|i| format!("t{i:02}")).collect::<Vec<_>>());
}

#[test]
fn eval_subset_is_seeded() {
    let report = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = bin();
        cmd.args(["eval", "--subset", "4", "--seed", seed]);
        run_args(&mut cmd, "tasks.jsonl", dir.path());
        assert!(cmd.output().unwrap().status.success());
        std::fs::read_to_string(dir.path().join("traces.jsonl")).unwrap()
    };
    let a = report("5");
    assert_eq!(a.lines().count(), 4);
    assert_eq!(a, report("5"));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "tasks = {:?}\nscenes = {:?}\nbackend = {:?}\nprotocol = \"scanrefer\"\n",
            fx("tasks.jsonl"),
            fx("scenes"),
            format!("scripted:{}", fx("scripts.json"))
        ),
    )
    .unwrap();
    let out = bin()
        .args([
            "ground",
            "--task-id",
            "t08",
            "--config",
            &config.display().to_string(),
        ])
        .args([
            "--out",
            &dir.path().display().to_string(),
            "--protocol",
            "referit3d",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout(&out), "49\n");
}

#[test]
fn build_finetune_counts_and_is_reproducible() {
    let build = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = bin();
        cmd.args(["build-finetune", "--jobs", "2"]);
        run_args(&mut cmd, "train_tasks.jsonl", dir.path());
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(
            stdout(&out),
            "records=5 correct_first_try=3 self_corrected=2 dropped=1\n"
        );
        let data = std::fs::read(dir.path().join("finetune.jsonl")).unwrap();
        assert!(dir.path().join("finetune_stats.json").is_file());
        data
    };
    let first = build();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 5);
    assert_eq!(first, build());
}

#[test]
fn build_finetune_requires_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("t.jsonl");
    std::fs::write(
        &tasks,
        "{\"task_id\": \"t00\", \"scene_id\": \"scene0592_00\", \"utterance\": \"the chair\"}\n",
    )
    .unwrap();
    bin()
        .args([
            "build-finetune",
            "--tasks",
            &tasks.display().to_string(),
            "--scenes",
            &fx("scenes"),
        ])
        .args(["--backend", &format!("scripted:{}", fx("scripts.json"))])
        .args(["--out", &dir.path().display().to_string()])
        .assert()
        .code(2);
}
