//! Archive format, index coding and the compress/decompress pipelines.

mod archive;
pub mod index;
mod pipeline;

pub use archive::{ArchiveHeader, CompressedArchive, MAGIC, VERSION};
pub use index::{decode_indices, encode_indices};
pub use pipeline::{
    compress, compress_with_outcome, decompress, emulate, inspect, DecompressMode, Decompressor, InspectReport,
    PLANNING_INDEX_BITS,
};
