#![no_main]

use libfuzzer_sys::fuzz_target;
use l2c_core::model_io::ModelManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = ModelManifest::from_bytes(data) {
        // whatever parses must serialize to a stable form
        let once = m.to_bytes().expect("parsed model re-serializes");
        let twice = ModelManifest::from_bytes(&once).expect("own output parses").to_bytes().unwrap();
        assert_eq!(once, twice);
    }
});
