use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdegen_core::bench::{read_timing_csv, TIMING_HEADER};
use pdegen_core::cli::{TrainState, TRAIN_LOG_HEADER};
use pdegen_core::oracle::{Field, NORMS_HEADER};

const RUN: &str = "\
[model]
resolution = 32
precision = \"f64\"

[data]
c_min = 3.0
c_max = 6.0
samples = 32
batch = 8

[train]
epochs = 10
seed = 3
workers = 1
";

fn pdegen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdegen"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn pdegen")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pdegen(dir, args);
    assert!(
        out.status.success(),
        "pdegen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

struct LogRow {
    kind: String,
    wall: f64,
    epoch: usize,
    loss: String,
}

fn read_log(path: &Path) -> Vec<LogRow> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# format=1"));
    assert_eq!(lines.next(), Some(TRAIN_LOG_HEADER));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 7, "{l}");
            LogRow {
                kind: f[0].to_string(),
                wall: f[1].parse().unwrap(),
                epoch: f[2].parse().unwrap(),
                loss: f[4].to_string(),
            }
        })
        .collect()
}

fn losses(rows: &[LogRow]) -> Vec<String> {
    rows.iter().filter(|r| r.kind == "minibatch").map(|r| r.loss.clone()).collect()
}

fn read_field(path: &Path) -> Field {
    Field::read(fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn train_writes_log_checkpoint_and_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", RUN);
    ok(dir.path(), &["train", "--config", "run.toml", "--out", "a"]);
    let out = dir.path().join("a");
    for f in ["checkpoint.bin", "state.bin", "effective.toml", "train_log.csv", "timing.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let rows = read_log(&out.join("train_log.csv"));
    assert_eq!(rows.iter().filter(|r| r.kind == "minibatch").count(), 40);
    assert_eq!(rows.iter().filter(|r| r.kind == "epoch").count(), 10);
    assert!(rows.windows(2).all(|w| w[1].wall >= w[0].wall && w[1].epoch >= w[0].epoch));
    let state = TrainState::from_bytes(&fs::read(out.join("state.bin")).unwrap()).unwrap();
    assert_eq!(state.epoch, 10);

    // two workers give the same loss column, bit for bit
    ok(dir.path(), &["train", "--config", "run.toml", "--out", "b"]);
    let two = RUN.replace("workers = 1", "workers = 2");
    write(dir.path(), "two.toml", &two);
    ok(dir.path(), &["train", "--config", "two.toml", "--out", "c"]);
    let one = losses(&rows);
    assert_eq!(losses(&read_log(&dir.path().join("b/train_log.csv"))), one);
    assert_eq!(losses(&read_log(&dir.path().join("c/train_log.csv"))), one);
    assert_eq!(
        fs::read(out.join("checkpoint.bin")).unwrap(),
        fs::read(dir.path().join("b/checkpoint.bin")).unwrap()
    );

    // the echoed configuration reproduces the run
    let echoed = fs::read_to_string(out.join("effective.toml")).unwrap();
    write(dir.path(), "echo.toml", &echoed.replace("dir = \"a\"", "dir = \"d\""));
    ok(dir.path(), &["train", "--config", "echo.toml"]);
    assert_eq!(losses(&read_log(&dir.path().join("d/train_log.csv"))), one);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let four = RUN.replace("epochs = 10", "epochs = 4");
    write(dir.path(), "four.toml", &four);
    write(dir.path(), "two.toml", &RUN.replace("epochs = 10", "epochs = 2"));
    ok(dir.path(), &["train", "--config", "four.toml", "--out", "full"]);
    ok(dir.path(), &["train", "--config", "two.toml", "--out", "part"]);
    ok(dir.path(), &["train", "--config", "four.toml", "--out", "part", "--resume"]);
    let full = read_log(&dir.path().join("full/train_log.csv"));
    let part = read_log(&dir.path().join("part/train_log.csv"));
    assert_eq!(losses(&part), losses(&full));
    assert_eq!(
        fs::read(dir.path().join("full/checkpoint.bin")).unwrap(),
        fs::read(dir.path().join("part/checkpoint.bin")).unwrap()
    );
    assert!(part.windows(2).all(|w| w[1].wall >= w[0].wall));

    // resuming with a different configuration is refused
    write(dir.path(), "other.toml", &four.replace("seed = 3", "seed = 4"));
    let out = pdegen(dir.path(), &["train", "--config", "other.toml", "--out", "part", "--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &RUN.replace("epochs = 10", "epochs = 1"));
    ok(dir.path(), &["train", "--config", "run.toml", "--out", "a"]);
    ok(dir.path(), &["train", "--config", "run.toml", "--out", "b", "--seed-override", "9"]);
    let a = losses(&read_log(&dir.path().join("a/train_log.csv")));
    let b = losses(&read_log(&dir.path().join("b/train_log.csv")));
    assert_ne!(a, b);
    let echoed = fs::read_to_string(dir.path().join("b/effective.toml")).unwrap();
    assert!(echoed.contains("seed = 9"), "{echoed}");
}

#[test]
fn socket_ranks_reproduce_the_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let ports: Vec<u16> = (0..2)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port())
        .collect();
    let base = RUN.replace("epochs = 10", "epochs = 2").replace("workers = 1", "workers = 2");
    write(dir.path(), "inproc.toml", &base);
    let tcp = format!(
        "{base}\n[transport]\nkind = \"tcp\"\naddresses = [\"127.0.0.1:{}\", \"127.0.0.1:{}\"]\n",
        ports[0], ports[1]
    );
    write(dir.path(), "tcp.toml", &tcp);
    ok(dir.path(), &["train", "--config", "inproc.toml", "--out", "inproc"]);
    let children: Vec<_> = (0..2)
        .map(|r| {
            Command::new(env!("CARGO_BIN_EXE_pdegen"))
                .args(["train", "--config", "tcp.toml", "--out", "tcp", "--rank", &r.to_string()])
                .current_dir(dir.path())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in children {
        assert!(c.wait().unwrap().success());
    }
    assert_eq!(
        losses(&read_log(&dir.path().join("tcp/train_log.csv"))),
        losses(&read_log(&dir.path().join("inproc/train_log.csv")))
    );
}

#[test]
fn solve_infer_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["solve", "--c", "0", "--n", "16", "--out", "zero.bin"]);
    assert!(read_field(&d.join("zero.bin")).data.iter().all(|&v| v == 0.0));

    let stdout = ok(d, &["solve", "--c", "3", "--n", "128", "--out", "fd.bin"]);
    assert!(stdout.starts_with("solve_sec="), "{stdout}");
    let fd = read_field(&d.join("fd.bin"));
    let peak = fd.data.iter().cloned().fold(f64::MIN, f64::max);
    assert!((peak - 1.0).abs() < 2e-2, "{peak}");
    ok(d, &["solve", "--c", "3", "--n", "128", "--out", "fd2.bin"]);
    assert_eq!(fs::read(d.join("fd.bin")).unwrap(), fs::read(d.join("fd2.bin")).unwrap());

    write(
        d,
        "run.toml",
        &RUN.replace("resolution = 32", "resolution = 128")
            .replace("samples = 32", "samples = 2")
            .replace("batch = 8", "batch = 2")
            .replace("epochs = 10", "epochs = 1"),
    );
    ok(d, &["train", "--config", "run.toml", "--out", "m"]);
    let stdout = ok(d, &["infer", "--checkpoint", "m/checkpoint.bin", "--c", "3", "--out", "g.bin"]);
    assert!(stdout.starts_with("infer_sec="), "{stdout}");
    ok(d, &["infer", "--checkpoint", "m/checkpoint.bin", "--c", "3", "--out", "g2.bin"]);
    assert_eq!(fs::read(d.join("g.bin")).unwrap(), fs::read(d.join("g2.bin")).unwrap());
    let g = read_field(&d.join("g.bin"));
    assert!(g.data.iter().all(|&v| v > 0.0 && v < 1.0));

    let csv = ok(d, &["compare", "g.bin", "fd.bin"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# format=1"));
    assert_eq!(lines[1], NORMS_HEADER);
    let row: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(&row[..2], &["128", "3"]);
    assert!(row[2..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));

    let out = pdegen(d, &["compare", "g.bin", "zero.bin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_the_timing_table() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &RUN.replace("samples = 32", "samples = 8"));
    let stdout = ok(dir.path(), &["bench", "--config", "run.toml", "--p", "1,2", "--epochs", "2", "--out", "t.csv"]);
    assert!(!stdout.is_empty());
    let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(text.contains(TIMING_HEADER));
    let rows = read_timing_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.iter().map(|r| (r.p, r.epoch)).collect::<Vec<_>>(), [(1, 1), (1, 2), (2, 1), (2, 2)]);
    assert_eq!(rows[0].loss.to_bits(), rows[2].loss.to_bits());
    assert!(rows.iter().all(|r| r.comm_sec >= 0.0 && r.compute_sec >= 0.0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bad.toml", &RUN.replace("seed = 3", "seed = 3\nbogus = 1"));
    let out = pdegen(d, &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 14") && err.contains("bogus"), "{err}");

    assert_eq!(pdegen(d, &["train", "--config", "missing.toml"]).status.code(), Some(2));
    assert_eq!(pdegen(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(pdegen(d, &["--help"]).status.code(), Some(0));

    write(d, "run.toml", RUN);
    assert_eq!(pdegen(d, &["train", "--config", "run.toml", "--rank", "0"]).status.code(), Some(2));

    write(
        d,
        "diverge.toml",
        &format!("{}\n[optimizer]\nkind = \"sgd\"\nlr = 1e300\n", RUN.replace("epochs = 10", "epochs = 3")),
    );
    let out = pdegen(d, &["train", "--config", "diverge.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let lonely = TcpListener::bind("127.0.0.1:0").unwrap();
    let peer = lonely.local_addr().unwrap().port();
    drop(lonely);
    write(
        d,
        "tcp.toml",
        &format!(
            "{}collective_timeout_sec = 1.0\n\n[transport]\nkind = \"tcp\"\naddresses = [\"127.0.0.1:{port}\", \"127.0.0.1:{peer}\"]\n",
            RUN.replace("workers = 1", "workers = 2")
        ),
    );
    let out = pdegen(d, &["train", "--config", "tcp.toml", "--out", "y", "--rank", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
