use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# quick run
seeds = 0
pretrain.epochs = 2
adapter.iters = 50
scenario.stream_length = 640
bench.methods = source, tent, tent+adapter
bench.per_batch = true
";

fn shiftadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftadapt"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn stages_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let run = || {
        for stage in ["pretrain", "train-adapter", "bench"] {
            ok(shiftadapt(dir.path(), &[stage, "--config", "small.cfg", "--output.dir", "out"]));
        }
    };
    run();
    let first = snapshot(&dir.path().join("out"));
    for f in ["bench/results.csv", "bench/aggregate.csv", "bench/per_batch.csv", "bench/manifest.json"] {
        assert!(first.contains_key(f), "missing {f}");
    }
    run();
    assert_eq!(snapshot(&dir.path().join("out")), first);

    let results = String::from_utf8(first["bench/results.csv"].clone()).unwrap();
    // 3 methods x 7 distributions x 1 seed, plus header.
    assert_eq!(results.lines().count(), 22);
}

#[test]
fn config_echo_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(shiftadapt(dir.path(), &["config", "--tta.lr=0.002", "--seeds", "4,5"]));
    assert!(text.contains("tta.lr = 0.002"));
    assert!(text.contains("seeds = 4,5"));
}

#[test]
fn errors_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = shiftadapt(dir.path(), &["pretrain", "--no.such.key", "1"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("no.such.key"));

    let missing = shiftadapt(dir.path(), &["bench", "--output.dir", "nothing"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("checkpoint"));
}

#[test]
fn aborted_cells_fail_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    ok(shiftadapt(dir.path(), &["pretrain", "--config", "small.cfg", "--output.dir", "out"]));
    // 64 samples cannot hold a 50:1 imbalanced stream with every class present.
    let out = shiftadapt(
        dir.path(),
        &["bench", "--config", "small.cfg", "--output.dir", "out", "--bench.methods", "source", "--scenario.stream_length", "64"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aborted source"));
    let manifest = fs::read_to_string(dir.path().join("out/bench/manifest.json")).unwrap();
    assert!(manifest.contains("infeasible"));
}
