//! On-disk formats: GTEN tensors, tensor bundles (checkpoints) and binary PGM masks.

mod bundle;
mod gten;
mod pgm;

pub use bundle::{read_bundle, read_bundle_from, write_bundle, write_bundle_to, BUNDLE_MAGIC};
pub use gten::{read_gten, read_gten_file, write_gten, write_gten_file, DType, GTEN_MAGIC};
pub use pgm::{read_pgm, write_pgm, IndexMask};
