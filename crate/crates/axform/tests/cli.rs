use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axform::report::parse_report;

const SMALL: &str = "\
train_per_family = 3
val_per_family = 1
test_per_family = 2
points = 128
output_points = 128
interim_points = 16
encoder_hidden = 16
latent = 32
attn_widths = 16
folding_hidden = 16
completion_latent = 32
feature_widths = 32,16
coarse_points = 16
epochs = 2
batch_size = 2
";

fn axform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axform")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = axform(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its contents, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if dir.exists() {
        walk(dir, dir, &mut out);
    }
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    data: PathBuf,
}

fn fixture(extra: &str) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let cfg = root.join("cfg.txt");
    fs::write(&cfg, format!("{SMALL}{extra}")).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out-dir", s(&data)]);
    Fixture { _tmp: tmp, root, cfg, data }
}

fn report(path: &Path) -> Vec<axform::report::MetricRow> {
    parse_report(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let f = fixture("");
    let rep = f.root.join("rep.csv");
    ok(&["eval", "--pred", s(&f.data), "--gt", s(&f.data), "--metrics", "cd-l1,cd-l2,fscore,jsd", "--report", s(&rep)]);
    let rows = report(&rep);
    assert!(!rows.is_empty());
    for r in rows {
        let want = if r.metric == "fscore" { 1.0 } else { 0.0 };
        assert_eq!(r.value, want, "{} {}", r.metric, r.category);
    }
}

#[test]
fn smoke_train_and_eval_reconstruction() {
    let f = fixture("");
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&run)]);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let rep = f.root.join("rep.csv");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint.axck")), "--data", s(&f.data),
         "--metrics", "cd-l1,cd-l2,fscore,jsd,mmd-cov-nna", "--report", s(&rep)]);
    let rows = report(&rep);
    for m in ["cd-l1", "cd-l2", "fscore", "jsd", "mmd-cd", "cov", "1-nna"] {
        let avg = rows.iter().find(|r| r.metric == m && r.category == "average").unwrap();
        assert!(avg.value.is_finite(), "{m}");
        assert_eq!(rows.iter().filter(|r| r.metric == m).count(), 4, "{m}: three categories and the average");
    }
}

#[test]
fn vanilla_and_full_completion_share_the_coarse_cloud() {
    let f = fixture("task = complete\n");
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&run)]);
    let ck = run.join("checkpoint.axck");
    let input = f.data.join("plane/test/0000.partial.pcf");
    let (full, van) = (f.root.join("full"), f.root.join("van"));
    ok(&["complete", "--checkpoint", s(&ck), "--input", s(&input), "--out", s(&full)]);
    ok(&["complete", "--checkpoint", s(&ck), "--input", s(&input), "--out", s(&van), "--vanilla"]);
    assert_eq!(fs::read(full.join("coarse.pcf")).unwrap(), fs::read(van.join("coarse.pcf")).unwrap());
    assert_ne!(fs::read(full.join("final.pcf")).unwrap(), fs::read(van.join("final.pcf")).unwrap());
}

#[test]
fn resumed_training_equals_uninterrupted() {
    let f = fixture("");
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    ok(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&a), "--set", "epochs=4"]);
    ok(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&b), "--set", "epochs=2"]);
    let first = b.join("first.axck");
    fs::rename(b.join("checkpoint.axck"), &first).unwrap();
    ok(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&b), "--set", "epochs=4", "--resume", s(&first)]);
    assert_eq!(fs::read(a.join("checkpoint.axck")).unwrap(), fs::read(b.join("checkpoint.axck")).unwrap());
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
}

#[test]
fn checkpoint_cadence_writes_intermediate_files() {
    let f = fixture("");
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&run), "--set", "epochs=3", "--set", "checkpoint_every=1"]);
    let names: Vec<_> = snapshot(&run).into_keys().map(|p| p.display().to_string()).collect();
    assert_eq!(names, ["checkpoint.axck", "checkpoint_e0001.axck", "checkpoint_e0002.axck", "config.txt", "loss.csv"]);
}

/// Runs every subcommand twice into fresh output paths and compares the
/// bytes; also checks that nothing is written outside those paths.
#[test]
fn every_subcommand_is_deterministic_and_contained() {
    let f = fixture("branches = 4\nfamilies = plane\n");
    let comp_cfg = f.root.join("comp.txt");
    fs::write(&comp_cfg, format!("{SMALL}task = complete\n")).unwrap();
    let before = snapshot(&f.root);
    let mut outputs = Vec::new();
    for round in 0..2 {
        let o = f.root.join(format!("round{round}"));
        let p = |n: &str| o.join(n);
        ok(&["gen-data", "--config", s(&f.cfg), "--out-dir", s(&p("data")), "--threads", "1"]);
        ok(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&p("run"))]);
        let ck = p("run").join("checkpoint.axck");
        ok(&["eval", "--checkpoint", s(&ck), "--data", s(&f.data), "--metrics", "cd-l1,cd-l2,fscore,jsd,mmd-cov-nna", "--report", s(&p("rep.csv"))]);
        let reference = f.data.join("plane/train/0000.pcf");
        ok(&["assign", "--checkpoint", s(&ck), "--reference", s(&reference), "--out-map", s(&p("map.tsv"))]);
        ok(&["segment", "--checkpoint", s(&ck), "--map", s(&p("map.tsv")), "--input", s(&f.data.join("plane/test/0000.pcf")), "--out", s(&p("seg.pcf"))]);
        ok(&["train", "--config", s(&comp_cfg), "--data", s(&f.data), "--out", s(&p("crun"))]);
        ok(&["complete", "--checkpoint", s(&p("crun").join("checkpoint.axck")), "--input", s(&f.data.join("plane/test/0001.partial.pcf")), "--out", s(&p("comp"))]);
        outputs.push(snapshot(&o));
    }
    assert_eq!(outputs[0].len(), outputs[1].len());
    for (k, v) in &outputs[0] {
        assert!(outputs[1][k] == *v, "{} differs between runs", k.display());
    }
    let mut after = snapshot(&f.root);
    after.retain(|k, _| !k.starts_with("round0") && !k.starts_with("round1"));
    let mut before = before;
    before.insert(PathBuf::from("comp.txt"), fs::read(&comp_cfg).unwrap());
    assert_eq!(after.keys().collect::<Vec<_>>(), before.keys().collect::<Vec<_>>());
}

#[test]
fn exit_codes() {
    let f = fixture("");
    let run = f.root.join("run");
    // Usage errors name the flag.
    let out = axform(&["train", "--data", s(&f.data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    let out = axform(&["train", "--data", s(&f.data), "--out", s(&run), "--set", "lr=abc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
    // Data errors carry the path and byte offset.
    let bad = f.data.join("plane/test/0000.pcf");
    let mut bytes = fs::read(&bad).unwrap();
    bytes.truncate(20);
    fs::write(&bad, bytes).unwrap();
    let out = axform(&["train", "--config", s(&f.cfg), "--data", s(&f.data), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("0000.pcf") && err.contains("byte 20"), "{err}");
    // A diverging run aborts numerically.
    let g = fixture("");
    let out = axform(&["train", "--config", s(&g.cfg), "--data", s(&g.data), "--out", s(&g.root.join("run")), "--set", "lr=1e300", "--set", "epochs=3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parameter norms"));
}
