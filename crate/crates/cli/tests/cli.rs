use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asl_core::encoder::{encode_checkpoint, init_params, read_checkpoint};
use asl_core::synth::{read_manifest, SynthConfig};
use asl_core::trainer::TrainConfig;

fn asl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = asl(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], cwd: &Path, code: i32) -> String {
    let out = asl(args, cwd);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

const SMALL: [&str; 10] = [
    "--refs",
    "20",
    "--pos-queries",
    "5",
    "--easy-neg",
    "5",
    "--hard-neg",
    "5",
    "--train-images",
    "16",
];

fn gen_small(dir: &Path, out: &str, seed: &str) {
    let mut args = vec!["gen-data", "--seed", seed, "--out", out, "--train-hard-neg", "6"];
    args.extend(SMALL);
    ok(&args, dir);
}

fn train_small(dir: &Path, data: &str, out: &str, epochs: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--seed",
        "3",
        "--data",
        data,
        "--out",
        out,
        "--epochs",
        epochs,
        "--hidden",
        "32",
        "--dim",
        "8",
        "--heldout-pairs",
        "4",
    ];
    args.extend(extra);
    ok(&args, dir)
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_echoes_counts() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "a", "7");
    gen_small(tmp.path(), "b", "7");
    assert_eq!(files_under(&tmp.path().join("a")), files_under(&tmp.path().join("b")));
    for name in ["manifest.json", "gt.csv", "train_pairs.csv"] {
        assert!(tmp.path().join("a").join(name).is_file(), "{name}");
    }
    let m = read_manifest(&tmp.path().join("a")).unwrap();
    assert_eq!(m.queries.len(), 15);
    let stdout = ok(
        &["gen-data", "--seed", "1", "--out", "c"]
            .iter()
            .copied()
            .chain(SMALL)
            .collect::<Vec<_>>(),
        tmp.path(),
    );
    assert!(
        stdout.contains("queries 15 (positive 5, easy negative 5, hard negative 5)"),
        "{stdout}"
    );
}

#[test]
fn gen_data_rejects_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(&["gen-data", "--seed", "1", "--out", "x", "--refs", "0"], tmp.path(), 2);
    assert!(err.contains("refs must be ≥ 1"), "{err}");
    let err = fails(&["gen-data", "--out", "x"], tmp.path(), 2);
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"seed": 4, "synth": {"refs": 12, "pos_queries": 3, "easy_neg": 2, "hard_neg": 2, "train_images": 8, "train_hard_neg": 2}}"#,
    )
    .unwrap();
    ok(
        &["gen-data", "--config", "cfg.json", "--out", "d", "--easy-neg", "4"],
        tmp.path(),
    );
    let m = read_manifest(&tmp.path().join("d")).unwrap();
    assert_eq!(m.references.len(), 12);
    assert_eq!(m.queries.len(), 3 + 4 + 2);

    fs::write(tmp.path().join("typo.json"), r#"{"synth": {"reffs": 3}}"#).unwrap();
    let err = fails(
        &["gen-data", "--config", "typo.json", "--seed", "1", "--out", "e"],
        tmp.path(),
        2,
    );
    assert!(err.contains("reffs"), "{err}");
}

#[test]
fn train_writes_checkpoint_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "2");
    let stdout = train_small(tmp.path(), "d", "m.ckpt", "1", &["--mode", "baseline"]);
    assert!(
        stdout.contains("final loss") && stdout.contains("held-out mean ratio"),
        "{stdout}"
    );
    let log = fs::read_to_string(tmp.path().join("m.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch,loss,mean_ratio_heldout\n1,"));
}

#[test]
fn train_rejects_unknown_mode() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "2");
    let err = fails(
        &["train", "--seed", "1", "--data", "d", "--out", "m", "--mode", "fancy"],
        tmp.path(),
        2,
    );
    for mode in [
        "baseline",
        "asl-crop",
        "asl-negative",
        "asl-positive",
        "triplet",
        "asl-full",
    ] {
        assert!(err.contains(mode), "{err}");
    }
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "2");
    train_small(tmp.path(), "d", "m.ckpt", "2", &["--lr", "0"]);
    let trained = read_checkpoint(&tmp.path().join("m.ckpt")).unwrap();
    assert_eq!(
        encode_checkpoint(&trained),
        encode_checkpoint(&init_params(3, trained.dims()))
    );
}

#[test]
fn divergence_exits_with_its_code() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "2");
    let err = fails(
        &[
            "train",
            "--seed",
            "1",
            "--data",
            "d",
            "--out",
            "m",
            "--epochs",
            "2",
            "--lr",
            "1e300",
            "--no-clip",
            "--mode",
            "asl-crop",
        ],
        tmp.path(),
        4,
    );
    assert!(err.contains("epoch"), "{err}");
}

#[test]
fn embed_match_eval_sweep_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d", "5");
    train_small(dir, "d", "m.ckpt", "2", &[]);

    ok(&["embed", "--checkpoint", "m.ckpt", "--data", "d", "--out", "e"], dir);
    ok(&["embed", "--checkpoint", "m.ckpt", "--data", "d", "--out", "e2"], dir);
    assert_eq!(files_under(&dir.join("e")), files_under(&dir.join("e2")));
    let refs = asl_core::descriptor::read_descriptors(&dir.join("e/refs.asld"), Some(8)).unwrap();
    let queries = asl_core::descriptor::read_descriptors(&dir.join("e/queries.asld"), Some(8)).unwrap();
    assert_eq!(refs.descriptors.len(), 20);
    assert_eq!(queries.descriptors.len(), 15);

    ok(
        &[
            "match",
            "--embeddings",
            "e",
            "--out",
            "off.csv",
            "--filter",
            "off",
            "--eps",
            "-1",
        ],
        dir,
    );
    ok(
        &[
            "match",
            "--embeddings",
            "e",
            "--out",
            "on.csv",
            "--filter",
            "on",
            "--eps",
            "-1",
        ],
        dir,
    );
    let off = fs::read_to_string(dir.join("off.csv")).unwrap();
    let on = fs::read_to_string(dir.join("on.csv")).unwrap();
    let off_lines: std::collections::BTreeSet<&str> = off.lines().collect();
    assert!(on.lines().all(|l| off_lines.contains(l)));
    assert!(on.lines().count() <= off.lines().count());

    let table = ok(
        &["eval", "--predictions", "on.csv", "--gt", "d/gt.csv", "--out", "r.json"],
        dir,
    );
    assert!(table.contains("micro_ap"));
    let stdout = ok(
        &[
            "sweep",
            "--predictions",
            "off.csv",
            "--data",
            "d",
            "--fractions",
            "0,0.5,1",
            "--out",
            "s.csv",
            "--svg",
            "s.svg",
        ],
        dir,
    );
    let sweep = fs::read_to_string(dir.join("s.csv")).unwrap();
    assert_eq!(sweep, stdout);
    assert_eq!(sweep.lines().count(), 1 + 3);
    assert!(fs::read_to_string(dir.join("s.svg")).unwrap().starts_with("<svg"));

    let table = ok(&["compare", "--a", "r.json", "--b", "r.json", "--out", "c.csv"], dir);
    assert!(table.contains("+0.000000"));
    assert!(fs::read_to_string(dir.join("c.csv"))
        .unwrap()
        .starts_with("metric,a,b,delta\n"));
}

#[test]
fn checkpoint_problems_exit_five() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d", "5");
    train_small(dir, "d", "m.ckpt", "1", &[]);
    let mut bytes = fs::read(dir.join("m.ckpt")).unwrap();
    bytes[0] = b'Z';
    fs::write(dir.join("bad.ckpt"), &bytes).unwrap();
    let err = fails(
        &["embed", "--checkpoint", "bad.ckpt", "--data", "d", "--out", "e"],
        dir,
        5,
    );
    assert!(err.contains("magic"), "{err}");

    // A 16-pixel dataset does not fit a checkpoint trained on 64 pixels.
    ok(
        &["gen-data", "--seed", "5", "--out", "small", "--image-size", "16"]
            .iter()
            .copied()
            .chain(SMALL)
            .collect::<Vec<_>>(),
        dir,
    );
    fails(
        &["embed", "--checkpoint", "m.ckpt", "--data", "small", "--out", "e"],
        dir,
        5,
    );
    fails(
        &["embed", "--checkpoint", "missing.ckpt", "--data", "d", "--out", "e"],
        dir,
        3,
    );
}

#[test]
fn eval_fixture_and_parse_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("gt.csv"), "query_id,ref_id\n1,1\n2,2\n").unwrap();
    fs::write(dir.join("p.csv"), "query_id,ref_id,score\n1,1,0.9\n1,2,0.8\n2,2,0.7\n").unwrap();
    ok(
        &["eval", "--predictions", "p.csv", "--gt", "gt.csv", "--out", "r.json"],
        dir,
    );
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert!((report["micro_ap"].as_f64().unwrap() - 0.833333).abs() < 1e-6);

    fs::write(dir.join("bad.csv"), "query_id,ref_id,score\n1,1,0.9\n2,x,0.7\n").unwrap();
    let err = fails(
        &["eval", "--predictions", "bad.csv", "--gt", "gt.csv", "--out", "r2.json"],
        dir,
        6,
    );
    assert!(err.contains("line 3"), "{err}");
    fails(
        &[
            "eval",
            "--predictions",
            "nope.csv",
            "--gt",
            "gt.csv",
            "--out",
            "r2.json",
        ],
        dir,
        3,
    );
}

#[test]
fn help_lists_module_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = ok(&["gen-data", "--help"], tmp.path());
    let s = SynthConfig::default();
    for (flag, value) in [("--refs", s.refs.to_string()), ("--hard-neg", s.hard_neg.to_string())] {
        let line_at = gen.find(flag).unwrap_or_else(|| panic!("{flag} missing"));
        assert!(gen[line_at..].contains(&format!("[default: {value}]")), "{flag}");
    }
    let train = ok(&["train", "--help"], tmp.path());
    let t = TrainConfig::default();
    for needle in [
        format!("[default: {}]", t.epochs),
        format!("[default: {}]", t.lr),
        format!("[default: {}]", t.mode.name()),
        format!("[default: {}]", t.loss.lambda),
    ] {
        assert!(train.contains(&needle), "{needle}");
    }
    let m = ok(&["match", "--help"], tmp.path());
    assert!(m.contains("[default: on]") && m.contains("[default: 0.05]") && m.contains("[default: 0.7]"));
    for cmd in ["embed", "eval", "sweep", "compare"] {
        ok(&[cmd, "--help"], tmp.path());
    }
}
