use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use clipmimic::render::{read_demo, write_demo};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clipmimic"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn one_line_error(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_demo(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    ok(&["gen-demo", "--task", "backflip", "--steps", "40", "--updates", "2", "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn gen_demo_is_byte_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let a = small_demo(d.path(), "a.vdm", "4");
    let b = small_demo(d.path(), "b.vdm", "4");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let demo = read_demo(&a).unwrap();
    assert_eq!(demo.len(), 40);
    assert!(demo.has_states());
}

#[test]
fn bad_flags_fail_with_one_line() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("x.vdm");
    one_line_error(&run(&["gen-demo", "--task", "backflip", "--steps", "0", "--out", s(&out)]));
    assert!(one_line_error(&run(&["gen-demo", "--task", "cartwheel", "--out", s(&out)])).contains("cartwheel"));
    one_line_error(&run(&["gen-demo", "--nonsense"]));
    assert!(!out.exists());
    let e = one_line_error(&run(&["eval", "--random", "--demo", s(&out), "--metric", "nope"]));
    assert!(e.contains("nope"));
}

#[test]
fn oracle_training_on_frames_only_demo_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let demo = small_demo(d.path(), "d.vdm", "1");
    let mut v = read_demo(&demo).unwrap();
    v.states = None;
    v.actions = None;
    let frames_only = d.path().join("frames.vdm");
    write_demo(&v, &frames_only).unwrap();
    let run_dir = d.path().join("run");
    let e = one_line_error(&run(&["train", "--demo", s(&frames_only), "--run-dir", s(&run_dir), "--pretrain", "5", "--online", "0", "--updates", "1"]));
    assert!(e.contains("oracle"), "{e}");
    let e = one_line_error(&run(&["eval", "--random", "--demo", s(&frames_only), "--metric", "mse"]));
    assert!(e.contains("frames-only"), "{e}");
}

#[test]
fn sync_training_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let demo = small_demo(d.path(), "d.vdm", "2");
    let mut metrics = Vec::new();
    for name in ["r1", "r2"] {
        let run_dir = d.path().join(name);
        let out = ok(&["train", "--demo", s(&demo), "--run-dir", s(&run_dir), "--pretrain", "10", "--online", "5", "--updates", "2", "--mode", "sync", "--seed", "1"]);
        assert!(out.contains("annotations 15"), "{out}");
        metrics.push(std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(metrics[0].lines().count(), 3);
}

#[test]
fn pretrain_then_fine_tune() {
    let d = tempfile::tempdir().unwrap();
    let demo = small_demo(d.path(), "d.vdm", "3");
    let out = ok(&["pretrain", "--demo", s(&demo), "--run-dir", s(&d.path().join("pre")), "--pretrain", "10"]);
    let predictor = out.lines().find_map(|l| l.strip_prefix("predictor ")).unwrap().to_string();
    assert!(Path::new(&predictor).join("manifest.json").is_file());
    let out = ok(&[
        "train", "--demo", s(&demo), "--run-dir", s(&d.path().join("ft")), "--pretrain", "5", "--online", "5", "--updates", "1",
        "--init-predictor", &predictor,
    ]);
    assert!(out.contains("annotations 10"), "{out}");
}

#[test]
fn replayed_demo_policy_has_zero_mse() {
    let d = tempfile::tempdir().unwrap();
    let demo = d.path().join("d.vdm");
    let pol = d.path().join("pol");
    ok(&["gen-demo", "--task", "backflip", "--steps", "30", "--updates", "1", "--seed", "5", "--out", s(&demo), "--policy-out", s(&pol)]);
    let csv = ok(&["eval", "--policy", s(&pol), "--demo", s(&demo), "--metric", "mse", "--seed", "5"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,mse"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 30);
    assert!(values.iter().all(|&v| v == 0.0), "{csv}");
    let rating = ok(&["eval", "--policy", s(&pol), "--demo", s(&demo), "--metric", "oracle-rating", "--seed", "5"]);
    assert_eq!(rating.trim(), "oracle-rating 5.000000");
    let reward = ok(&["eval", "--random", "--demo", s(&demo), "--metric", "backflip-reward"]);
    assert!(reward.starts_with("backflip-reward "));
}

#[test]
fn export_video_writes_identical_frames() {
    let d = tempfile::tempdir().unwrap();
    let demo = small_demo(d.path(), "d.vdm", "6");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["export-video", "--traj", s(&demo), "--out", s(&a)]);
    ok(&["export-video", "--traj", s(&demo), "--out", s(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 40);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap());
    }
    one_line_error(&run(&["export-video", "--traj", s(&d.path().join("missing.json")), "--out", s(&a)]));
}

#[test]
fn variants_report_needs_enough_clips() {
    let d = tempfile::tempdir().unwrap();
    let demo = small_demo(d.path(), "d.vdm", "7");
    let e = one_line_error(&run(&["variants-report", "--demo", s(&demo), "--annotations", "50", "--seeds", "1", "--epochs", "1"]));
    assert!(e.contains("400"), "{e}");
}

#[test]
fn serve_answers_status() {
    let d = tempfile::tempdir().unwrap();
    let demo = small_demo(d.path(), "d.vdm", "8");
    let run_dir = d.path().join("run");
    ok(&["train", "--demo", s(&demo), "--run-dir", s(&run_dir), "--pretrain", "5", "--online", "0", "--updates", "1"]);
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut child = bin()
        .args(["serve", "--run-dir", s(&run_dir), "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let response = loop {
        if let Ok(mut stream) = TcpStream::connect(("127.0.0.1", port)) {
            stream.write_all(b"GET /api/status HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
            let mut out = String::new();
            stream.read_to_string(&mut out).unwrap();
            break out;
        }
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"annotations\":5"), "{response}");
}
