//! File formats: PFM float maps, 8-bit PNGs, ASCII PLY clouds, the dataset
//! directory layout, and the checkpoint container.

use std::path::Path;

use crate::{Error, Result};

pub mod checkpoint;
pub mod dataset;
pub mod pfm;
pub mod png;
pub mod ply;

/// Attach the offending path to an I/O error; a bare "No such file or
/// directory" is useless in a run touching dozens of files.
pub(crate) fn with_path<T>(r: std::io::Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| Error::format(format!("{}: {e}", path.display())))
}
