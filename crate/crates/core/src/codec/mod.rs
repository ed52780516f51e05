//! Lossless stage: static-model entropy coders and the archive container.

pub mod archive;
pub mod bench;
pub mod huffman;
pub mod range;

pub use archive::{
    pack_archive, unpack_archive, ArchiveTopology, CompressedArchive, LayerRecord, LayerStream,
    QuantizedBias, SizeBreakdown,
};
pub use huffman::{huffman_bits, huffman_decode, huffman_encode};
pub use range::{range_decode, range_encode};
