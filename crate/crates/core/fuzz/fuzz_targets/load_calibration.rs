#![no_main]

use libfuzzer_sys::fuzz_target;
use l2c_core::model_io::CalibrationSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = CalibrationSet::from_bytes(data) {
        let once = c.to_bytes().expect("parsed set re-serializes");
        let twice = CalibrationSet::from_bytes(&once).expect("own output parses").to_bytes().unwrap();
        assert_eq!(once, twice);
    }
});
