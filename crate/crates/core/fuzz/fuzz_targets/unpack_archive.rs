#![no_main]

use libfuzzer_sys::fuzz_target;
use l2c_core::codec::unpack_archive;
use l2c_core::pipeline;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = unpack_archive(data) {
        for layer in &a.layers {
            let _ = layer.decode();
        }
        let _ = pipeline::decompress(data);
    }
});
