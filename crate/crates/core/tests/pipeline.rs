use l2c_core::autodiff::forward;
use l2c_core::calibrate::CalibConfig;
use l2c_core::codec::{unpack_archive, CompressedArchive};
use l2c_core::error::Error;
use l2c_core::model_io::{load_calibration, load_raw_model, original_bits, CalibrationSet, ModelManifest};
use l2c_core::pipeline::{self, max_abs_deviation, outputs_on};
use l2c_core::report::report;
use l2c_core::toy::{accuracy, load_eval, train_toy, write_toy, ToyArtifacts, ToyConfig, CALIB_FILE, MODEL_FILE};

fn toy() -> ToyArtifacts {
    train_toy(&ToyConfig {
        hidden: 16,
        steps: 300,
        ..ToyConfig::default()
    })
    .unwrap()
}

fn fast(cr: f64) -> CalibConfig {
    CalibConfig {
        cr_target: cr,
        epochs: 2,
        transform_iters: 40,
        finetune_iters: 40,
        ..CalibConfig::default()
    }
}

/// Moves one count from the most frequent symbol to another one, keeping
/// the total so the archive still parses.
fn edit_table(a: &mut CompressedArchive, layer: usize) {
    let counts = &mut a.layers[layer].table.counts;
    let top = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap();
    let other = if top == 0 { counts.len() - 1 } else { 0 };
    assert_ne!(top, other);
    counts[top] -= 1;
    counts[other] += 1;
}

#[test]
fn toy_files_are_deterministic_and_reload() {
    let cfg = ToyConfig {
        hidden: 16,
        steps: 300,
        ..ToyConfig::default()
    };
    let a = train_toy(&cfg).unwrap();
    let b = train_toy(&cfg).unwrap();
    assert!(a.reached_target(&cfg), "train accuracy {}", a.train_accuracy);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_toy(da.path(), &a).unwrap();
    write_toy(db.path(), &b).unwrap();
    for entry in std::fs::read_dir(da.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(da.path().join(&name)).unwrap(),
            std::fs::read(db.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let model = load_raw_model(da.path().join(MODEL_FILE)).unwrap();
    let calib = load_calibration(da.path().join(CALIB_FILE)).unwrap();
    assert_eq!(model, a.model);
    assert_eq!(calib.count(), cfg.calib_count);
    let (inputs, labels) = load_eval(da.path()).unwrap();
    assert_eq!(accuracy(&model, &inputs, &labels).unwrap(), a.eval_accuracy);
}

#[test]
fn decompressed_model_matches_in_memory_result() {
    let art = toy();
    let out = pipeline::compress(&art.model, &art.calib, &fast(8.0)).unwrap();
    let decoded = pipeline::decompress(&out.bytes).unwrap();
    assert_eq!(decoded, out.compressed);
    let a = outputs_on(&decoded, &art.calib).unwrap();
    let b = outputs_on(&out.compressed, &art.calib).unwrap();
    assert_eq!(max_abs_deviation(&a, &b), 0.0);

    // the file round-trips through the raw model format
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.l2rm");
    l2c_core::model_io::save_raw_model(&decoded, &p).unwrap();
    assert_eq!(load_raw_model(&p).unwrap(), decoded);
}

#[test]
fn verify_reports_deviation_and_catches_edits() {
    let art = toy();
    let out = pipeline::compress(&art.model, &art.calib, &fast(8.0)).unwrap();
    let v = pipeline::verify(&out.bytes, &art.model, &art.calib).unwrap();
    assert!(v.passed());

    // independent recomputation of the final-output error
    let ours = outputs_on(&out.compressed, &art.calib).unwrap();
    let theirs = outputs_on(&art.model, &art.calib).unwrap();
    let (x, y) = (ours.last().unwrap(), theirs.last().unwrap());
    let mse: f64 = x.data.iter().zip(&y.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.data.len() as f64;
    assert!((v.mse - mse).abs() <= 1e-12 * mse.max(1.0));
    let max = x.data.iter().zip(&y.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert_eq!(v.max_abs_deviation, max);

    for layer in 0..out.archive.layers.len() {
        let mut edited = out.archive.clone();
        edit_table(&mut edited, layer);
        let bytes = edited.to_bytes().unwrap();
        let v = pipeline::verify(&bytes, &art.model, &art.calib).unwrap();
        let (name, _) = v.mismatch.expect("edited table must fail");
        assert_eq!(name, out.archive.layers[layer].name);
    }

    // a different model is rejected as well
    let other = train_toy(&ToyConfig {
        hidden: 8,
        steps: 10,
        ..ToyConfig::default()
    })
    .unwrap();
    assert!(!pipeline::verify(&out.bytes, &other.model, &other.calib).unwrap().passed());
}

#[test]
fn corrupted_payload_fails_checksum() {
    let art = toy();
    let out = pipeline::compress(&art.model, &art.calib, &fast(8.0)).unwrap();
    let mut bytes = out.bytes.clone();
    // last payload byte of the first layer sits right before its checksum
    let a = unpack_archive(&bytes).unwrap();
    let bd = a.breakdown().unwrap();
    let end_of_first = bd.preamble + bd.topology + bd.layers[0].header + bd.layers[0].payload;
    bytes[(end_of_first - 9) as usize] ^= 0x40;
    match pipeline::decompress(&bytes) {
        Err(Error::Checksum { layer }) => assert_eq!(layer, a.layers[0].name),
        other => panic!("expected checksum failure, got {other:?}"),
    }
}

#[test]
fn report_totals_match_file_size() {
    let art = toy();
    let out = pipeline::compress(&art.model, &art.calib, &fast(12.0)).unwrap();
    let r = report(&out.archive).unwrap();
    assert_eq!(r.file_bytes, out.bytes.len() as u64);
    assert_eq!(r.total.layer_cr, out.file_cr());
    assert_eq!(r.original_bits, original_bits(&art.model));
    for (row, s) in r.layers.iter().zip(&out.result.streams) {
        let zeros = s.symbols.iter().filter(|&&q| q == 0).count();
        assert_eq!(row.sparsity, zeros as f64 / s.symbols.len() as f64);
    }
}

#[test]
fn compression_is_deterministic() {
    let art = toy();
    let a = pipeline::compress(&art.model, &art.calib, &fast(8.0)).unwrap();
    let b = pipeline::compress(&art.model, &art.calib, &fast(8.0)).unwrap();
    assert_eq!(a.bytes, b.bytes);
}

#[test]
fn mismatched_calibration_is_an_input_error() {
    let art = toy();
    let bad = CalibrationSet::new(vec![3], vec![0.0; 9]).unwrap();
    assert!(pipeline::compress(&art.model, &bad, &fast(8.0)).is_err());
    assert!(outputs_on(&art.model, &bad).is_err());
    let m: &ModelManifest = &art.model;
    let x = l2c_core::autodiff::batch_tensor(&[2], &[art.calib.sample(0)]);
    assert_eq!(forward(m, &x).unwrap().len(), m.output_points().len());
}
