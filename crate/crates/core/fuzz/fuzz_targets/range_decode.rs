#![no_main]

use libfuzzer_sys::fuzz_target;
use l2c_core::codec::range_decode;

mod split;

fuzz_target!(|data: &[u8]| {
    if let Some((table, n, payload)) = split::split(data) {
        let _ = range_decode(payload, &table, n);
    }
});
