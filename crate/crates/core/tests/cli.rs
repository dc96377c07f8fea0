use std::path::Path;
use std::process::{Command, Output};

fn winlin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winlin"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

const SMALL: &[&str] = &[
    "--set", "model.preset=toy",
    "--set", "data.tile_size=32",
    "--set", "data.train_count=4",
    "--set", "data.val_count=2",
    "--set", "data.test_count=2",
    "--set", "data.root=data",
];

#[test]
fn gen_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
        [SMALL, extra].concat()
    }

    ok(&winlin(d, &with(&["--out", "data", "gen-data"])));
    assert!(d.join("data/train/manifest.csv").exists());
    assert!(d.join("data/test/manifest.csv").exists());

    ok(&winlin(d, &with(&["--out", "run", "--set", "train.epochs=1", "--set", "train.batch_size=2", "train"])));
    let ck = d.join("run/last.bfck");
    assert!(ck.exists());
    assert!(d.join("run/train_log.csv").exists());
    assert!(d.join("run/run_config.txt").exists());

    ok(&winlin(d, &with(&["--out", "tuned", "--set", "train.epochs=1", "--set", "train.batch_size=2", "train", "--from", "run/last.bfck"])));
    assert!(d.join("tuned/last.bfck").exists());

    ok(&winlin(d, &with(&["--out", "ev", "eval", "--checkpoint", "run/last.bfck"])));
    let metrics = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(metrics.contains("\nval_tta,"));

    ok(&winlin(d, &with(&["--out", "pred", "predict", "--checkpoint", "run/last.bfck", "--input", "data/test/images", "--tta"])));
    let masks: Vec<_> = std::fs::read_dir(d.join("pred")).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "pgm")).collect();
    assert_eq!(masks.len(), 2);

    // a checkpoint from a different architecture is refused
    let o = winlin(d, &with(&["--out", "bad", "--set", "model.fpn_dim=32", "eval", "--checkpoint", "run/last.bfck"]));
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("model."), "{err}");
}

#[test]
fn bench_and_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&winlin(d, &["--out", "b", "--set", "bench.dims=[64,64,16,2]", "--set", "bench.windows=[4,8]", "bench"]));
    let csv = std::fs::read_to_string(d.join("b/bench.csv")).unwrap();
    assert!(csv.contains("kernel,window,flops,peak_bytes,wall_ms,ratio"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("exact") || l.starts_with("linear")).count(), 4);

    ok(&winlin(d, &["--out", "g", "gradcheck", "--seeds", "1"]));
    let g = std::fs::read_to_string(d.join("g/gradcheck.csv")).unwrap();
    assert!(!g.contains("FAIL"));
}

#[test]
fn bad_config_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "train.epochs=three\n").unwrap();
    let o = winlin(dir.path(), &["--config", "c.cfg", "bench"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("train.epochs"), "{err}");
}
