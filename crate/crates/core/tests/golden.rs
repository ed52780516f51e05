//! Pinned bitstreams. Archives written by one build must decode in the next,
//! so any change to these bytes is a format change.

use l2c_core::codec::{huffman_decode, huffman_encode, range_decode, range_encode};
use l2c_core::entropy::exact_table;

const STREAM: [i64; 10] = [-1, -1, -1, 0, -2, -1, 1, -1, -1, -2];

#[test]
fn range_bitstream_is_stable() {
    let t = exact_table(&STREAM).unwrap();
    assert_eq!((t.symbol_min, t.counts.clone()), (-2, vec![2, 6, 1, 1]));
    let bytes = range_encode(&STREAM, &t).unwrap();
    assert_eq!(bytes, [0xd4, 0x72, 0x75, 0x2d, 0x18]);
    assert_eq!(range_decode(&bytes, &t, STREAM.len()).unwrap(), STREAM);
}

#[test]
fn huffman_bitstream_is_stable() {
    let t = exact_table(&STREAM).unwrap();
    let bytes = huffman_encode(&STREAM, &t).unwrap();
    assert_eq!(bytes, [0x1a, 0x72]);
    assert_eq!(huffman_decode(&bytes, &t, STREAM.len()).unwrap(), STREAM);
}
