#![no_main]

use libfuzzer_sys::fuzz_target;
use l2c_core::codec::huffman_decode;

mod split;

fuzz_target!(|data: &[u8]| {
    if let Some((table, n, payload)) = split::split(data) {
        let _ = huffman_decode(payload, &table, n);
    }
});
