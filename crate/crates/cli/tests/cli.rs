use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use l2c_core::codec::unpack_archive;

fn l2c(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2c"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// One toy fixture shared by every test in this file.
fn toy_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let o = l2c(&["make-toy", s(d.path()), "--seed", "0"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("train accuracy 1.0000") || stdout(&o).contains("train accuracy 0.9"));
        d
    })
    .path()
}

// short schedule: enough to reach CR 4 on the toy model
const QUICK: [&str; 6] = ["--epochs", "2", "--transform-iters", "40", "--finetune-iters", "40"];

fn compress(out: &Path, extra: &[&str]) -> Output {
    let dir = toy_dir();
    let (m, c) = (dir.join("toy.l2rm"), dir.join("calib.l2ca"));
    let mut args = vec!["compress", s(&m), s(&c), "-o", s(out)];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    l2c(&args)
}

fn model() -> PathBuf {
    toy_dir().join("toy.l2rm")
}

fn calib() -> PathBuf {
    toy_dir().join("calib.l2ca")
}

#[test]
fn compress_verify_decompress_report() {
    let work = tempfile::tempdir().unwrap();
    let arch = work.path().join("a.l2cm");
    let o = compress(&arch, &["--target-cr", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("layer,numel,sparsity,entropy_bits_per_weight,distinct_symbols,nominal_bits,layer_cr"));
    assert!(text.contains("file CR") && text.contains("entropy CR"));

    let o = l2c(&["verify", s(&arch), s(&model()), s(&calib())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("max abs output deviation"));

    let dec = work.path().join("d.l2rm");
    let o = l2c(&["decompress", s(&arch), "-o", s(&dec)]);
    assert_eq!(o.status.code(), Some(0));
    l2c_core::model_io::load_raw_model(&dec).unwrap();

    let o = l2c(&["report", s(&arch)]);
    assert_eq!(o.status.code(), Some(0));
    let csv = stdout(&o);
    let total = csv.lines().last().unwrap();
    assert!(total.starts_with("TOTAL,"));
    let cr: f64 = total.rsplit(',').next().unwrap().parse().unwrap();
    let bits = l2c_core::model_io::original_bits(&l2c_core::model_io::load_raw_model(model()).unwrap());
    let bytes = std::fs::metadata(&arch).unwrap().len();
    assert!((cr - bits as f64 / (8.0 * bytes as f64)).abs() < 1e-6);

    let o = l2c(&["report", s(&arch), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["file_bytes"], bytes);
}

#[test]
fn target_one_is_near_lossless() {
    let work = tempfile::tempdir().unwrap();
    let arch = work.path().join("a.l2cm");
    let o = compress(&arch, &["--target-cr", "1", "--no-finetune", "--calib-limit", "64"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unreachable_target_exits_three() {
    let work = tempfile::tempdir().unwrap();
    let arch = work.path().join("a.l2cm");
    let o = compress(&arch, &["--target-cr", "1000"]);
    assert_eq!(o.status.code(), Some(3));
    // the archive is still written
    assert!(arch.exists());
}

#[test]
fn input_errors_exit_two() {
    let work = tempfile::tempdir().unwrap();
    let missing = work.path().join("nope.l2ca");
    let o = l2c(&["compress", s(&model()), s(&missing), "-o", s(&work.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let garbage = work.path().join("g.l2cm");
    std::fs::write(&garbage, b"not an archive").unwrap();
    for cmd in ["decompress", "report"] {
        assert_eq!(l2c(&[cmd, s(&garbage)]).status.code(), Some(2), "{cmd}");
    }
    assert_eq!(l2c(&["verify", s(&garbage), s(&model()), s(&calib())]).status.code(), Some(2));
    let o = l2c(&["compress", s(&model()), s(&calib()), "--transform", "cubic"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupted_archive_exits_two_and_edited_table_exits_one() {
    let work = tempfile::tempdir().unwrap();
    let arch = work.path().join("a.l2cm");
    assert_eq!(compress(&arch, &["--target-cr", "4"]).status.code(), Some(0));
    let bytes = std::fs::read(&arch).unwrap();
    let a = unpack_archive(&bytes).unwrap();

    let bd = a.breakdown().unwrap();
    let end = bd.preamble + bd.topology + bd.layers[0].header + bd.layers[0].payload;
    let mut flipped = bytes.clone();
    flipped[(end - 9) as usize] ^= 1;
    let bad = work.path().join("flipped.l2cm");
    std::fs::write(&bad, &flipped).unwrap();
    let o = l2c(&["decompress", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));

    let mut edited = a.clone();
    let layer = 1;
    let counts = &mut edited.layers[layer].table.counts;
    let top = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap();
    counts[top] -= 1;
    counts[if top == 0 { 1 } else { 0 }] += 1;
    let ed = work.path().join("edited.l2cm");
    std::fs::write(&ed, edited.to_bytes().unwrap()).unwrap();
    let o = l2c(&["verify", s(&ed), s(&model()), s(&calib())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&a.layers[layer].name), "{err}");
}

#[test]
fn seeded_compress_is_byte_identical() {
    let work = tempfile::tempdir().unwrap();
    let (a, b) = (work.path().join("a.l2cm"), work.path().join("b.l2cm"));
    compress(&a, &["--seed", "3"]);
    compress(&b, &["--seed", "3"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn make_toy_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let o = l2c(&["make-toy", s(d.path()), "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["toy.l2rm", "calib.l2ca", "eval_inputs.l2ca", "eval_labels.l2ca"] {
        assert_eq!(std::fs::read(d.path().join(f)).unwrap(), std::fs::read(toy_dir().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn untrainable_toy_exits_four() {
    let d = tempfile::tempdir().unwrap();
    let o = l2c(&["make-toy", s(d.path()), "--steps", "1"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn bench_codec_table() {
    let a = l2c(&["bench-codec", "--n", "20000", "--seed", "1"]);
    let b = l2c(&["bench-codec", "--n", "20000", "--seed", "1"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    for family in ["uniform", "gaussian", "laplacian", "zipf"] {
        assert!(text.contains(family));
    }
    let o = l2c(&["bench-codec", "--n", "50000", "--dist", "zipf", "--json"]);
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let last = rows.as_array().unwrap().last().unwrap();
    assert!(last["range_bytes"].as_u64() < last["huffman_bytes"].as_u64());
}
