use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kdlt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlt"))
        .args(args)
        .env("KDLT_THREADS", "1")
        .output()
        .expect("spawn kdlt")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(kdlt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kdlt(&[]).status.code(), Some(2));
    assert_eq!(kdlt(&["gen-data"]).status.code(), Some(2));
    assert_eq!(kdlt(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_with_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(kdlt(&["gen-data", "--out", s(&data), "--n", "3"]).status.success());
    let o = kdlt(&["eval", "--ckpt", s(&dir.path().join("none.kdlt")), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("none.kdlt"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_idempotent_and_guards_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = kdlt(&["gen-data", "--out", s(d), "--n", "9", "--seed", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = fs::read(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.tsv")).unwrap());
    for i in 0..9 {
        for sub in ["hr", "lr"] {
            let name = format!("{sub}/{i:06}.png");
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
        }
    }

    let again = kdlt(&["gen-data", "--out", s(&a), "--n", "9", "--seed", "5"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    assert_eq!(fs::read(a.join("manifest.tsv")).unwrap(), manifest);
    let forced = kdlt(&["gen-data", "--out", s(&a), "--n", "9", "--seed", "5", "--force"]);
    assert!(forced.status.success());
    assert_ne!(fs::read(a.join("manifest.tsv")).unwrap(), manifest);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs = 1\nlambda_four = 3\n").unwrap();
    let o = kdlt(&[
        "train-teacher",
        "--config",
        s(&cfg),
        "--data",
        s(dir.path()),
        "--out",
        s(&dir.path().join("t.kdlt")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("lambda_four") && e.contains('2'), "{e}");
    assert!(!dir.path().join("t.kdlt").exists());
}

#[test]
fn oracle_check_reports_deviation() {
    let o = kdlt(&["oracle-check", "--trials", "60", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("max deviation"));
    assert!(text.contains("beam: 60 trials, 0 failures"), "{text}");
}

fn pipeline(root: &Path) -> (Vec<u8>, Vec<u8>, String, String) {
    let data = root.join("data");
    let test = root.join("test");
    let teacher = root.join("teacher.kdlt");
    let student = root.join("student.kdlt");
    let sweep = root.join("sweep.csv");
    let tiny = ["--epochs", "1", "--set", "batch_size=4", "--seed", "2"];
    let run = |args: Vec<&str>| {
        let o = kdlt(&args);
        assert!(o.status.success(), "{:?}: {}", args, stderr(&o));
        o
    };
    run(vec!["gen-data", "--out", s(&data), "--n", "8", "--seed", "1"]);
    run(vec!["gen-data", "--out", s(&test), "--n", "6", "--seed", "9"]);
    let mut a = vec!["train-teacher", "--data", s(&data), "--out", s(&teacher)];
    a.extend(tiny);
    let echoed = stdout(&run(a));
    assert!(echoed.contains("batch_size = 4") && echoed.contains("epochs = 1"), "{echoed}");
    let mut a = vec!["distill-student", "--data", s(&data), "--teacher", s(&teacher), "--out", s(&student)];
    a.extend(tiny);
    run(a);
    let report = stdout(&run(vec!["eval", "--ckpt", s(&student), "--data", s(&test)]));
    run(vec!["sweep", "--ckpt", s(&student), "--data", s(&test), "--out", s(&sweep), "--blur", "0,2", "--noise", "0,0.1"]);
    let csv = fs::read_to_string(&sweep).unwrap();
    (fs::read(&teacher).unwrap(), fs::read(&student).unwrap(), report, csv)
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    assert_eq!(first.0, second.0, "teacher checkpoints differ");
    assert_eq!(first.1, second.1, "student checkpoints differ");
    assert_eq!(first.2, second.2);
    assert_eq!(first.3, second.3);
    assert!(first.2.contains("average_accuracy=") && first.2.contains("samples=6"), "{}", first.2);
    assert_eq!(first.3.lines().count(), 5);
    assert!(first.3.starts_with("axis,level,accuracy"));
}
