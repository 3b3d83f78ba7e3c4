//! File formats: raw volumes with text headers, PGM slices, versioned CSV
//! tables and directory manifests.

pub mod dataset;
pub mod pgm;
pub mod table;
pub mod volume;

pub use dataset::{read_result, read_series, read_truth, write_result, write_series, write_truth, StoredResult};
pub use pgm::{export_slice, read_pgm, Window};
pub use table::{read_csv, write_csv};
pub use volume::{read_mask, read_scalar, read_vector, read_volume, write_mask, write_scalar, write_vector};
