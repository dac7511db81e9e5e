use std::fs;
use std::process::{Command, Output};

fn privshape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privshape")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn run_is_reproducible_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let csv = dir.path().join(format!("run{i}.csv"));
        let tr = dir.path().join(format!("run{i}.tsv"));
        let out = privshape(&[
            "run",
            "--trig-count",
            "600",
            "--trials",
            "2",
            "--out",
            csv.to_str().unwrap(),
            "--transcript",
            tr.to_str().unwrap(),
        ]);
        stdout(&out);
        files.push((fs::read(csv).unwrap(), fs::read(tr).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let csv = String::from_utf8(files[0].0.clone()).unwrap();
    assert!(csv.starts_with("# privshape-run v1\n"));
    assert!(csv.contains("\nkind,trial,name,value,label\n"));
    assert!(csv.contains("summary,,ari_mean,"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    fs::write(&cfg, "trig_count = 400\ntask = classification\n").unwrap();
    let text = stdout(&privshape(&["run", "--config", cfg.to_str().unwrap(), "--epsilon", "2"]));
    assert!(text.contains("# epsilon = 2\n"));
    assert!(text.contains("# trig_count = 400\n"));
    assert!(text.contains("metric,0,accuracy,"));
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let out = privshape(&["run", "--c", "one"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let out = privshape(&["run", "--epsilon", "0"]);
    assert_eq!(out.status.code(), Some(1));

    let out = privshape(&["transform", "--input", "/nonexistent/file.tsv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_then_transform() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trig.tsv");
    stdout(&privshape(&["gen", "--count", "4", "--lengths", "200,400", "--out", path.to_str().unwrap()]));
    let text = stdout(&privshape(&["transform", "--input", path.to_str().unwrap()]));
    assert_eq!(text, "0\tcdcbab\n1\tdcbabcd\n0\tcdcbab\n1\tdcbabcd\n");

    let text = stdout(&privshape(&["transform", "--input", path.to_str().unwrap(), "--no-compress", "--w", "100"]));
    assert_eq!(text.lines().next(), Some("0\tda"));
}

#[test]
fn sweep_reports_each_value() {
    let text = stdout(&privshape(&[
        "sweep",
        "--param",
        "epsilon",
        "--values",
        "1,4",
        "--trig-count",
        "400",
    ]));
    assert!(text.starts_with("# privshape-sweep v1\n"));
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("epsilon,")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("epsilon,1,ari,"));
}
