//! Replays the checked-in fuzz corpus through the same entry points the fuzz
//! targets exercise, so the seeds stay meaningful on a stable toolchain.

use std::path::PathBuf;

use l2c_core::codec::{huffman_decode, range_decode, unpack_archive};
use l2c_core::model_io::{CalibrationSet, ModelManifest};

#[path = "../fuzz/fuzz_targets/split.rs"]
mod split;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn model_seeds() {
    for (name, data) in seeds("load_model") {
        let parsed = ModelManifest::from_bytes(&data);
        assert_eq!(parsed.is_ok(), name == "toy", "{name}");
        if let Ok(m) = parsed {
            assert_eq!(ModelManifest::from_bytes(&m.to_bytes().unwrap()).unwrap(), m);
        }
    }
}

#[test]
fn calibration_seeds() {
    for (name, data) in seeds("load_calibration") {
        let c = CalibrationSet::from_bytes(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(c.to_bytes().unwrap(), data, "{name}");
    }
}

#[test]
fn archive_seeds() {
    for (name, data) in seeds("unpack_archive") {
        match unpack_archive(&data) {
            Ok(a) => {
                for layer in &a.layers {
                    assert_eq!(layer.decode().unwrap().len() as u64, layer.table.total);
                }
                l2c_core::pipeline::decompress(&data).unwrap();
            }
            Err(_) => assert_eq!(name, "empty"),
        }
    }
}

#[test]
fn decoder_seeds() {
    for (name, data) in seeds("range_decode") {
        let (table, n, payload) = split::split(&data).expect("well-formed seed");
        assert_eq!(range_decode(payload, &table, n).unwrap().len(), n, "{name}");
    }
    for (name, data) in seeds("huffman_decode") {
        let (table, n, payload) = split::split(&data).expect("well-formed seed");
        assert_eq!(huffman_decode(payload, &table, n).unwrap().len(), n, "{name}");
    }
}

#[test]
fn truncated_seeds_never_panic() {
    for target in ["load_model", "load_calibration", "unpack_archive", "range_decode", "huffman_decode"] {
        for (_, data) in seeds(target) {
            for cut in (0..data.len()).step_by(1 + data.len() / 64) {
                let d = &data[..cut];
                match target {
                    "load_model" => drop(ModelManifest::from_bytes(d)),
                    "load_calibration" => drop(CalibrationSet::from_bytes(d)),
                    "unpack_archive" => drop(unpack_archive(d)),
                    _ => {
                        if let Some((t, n, p)) = split::split(d) {
                            let _ = range_decode(p, &t, n);
                            let _ = huffman_decode(p, &t, n);
                        }
                    }
                }
            }
        }
    }
}
