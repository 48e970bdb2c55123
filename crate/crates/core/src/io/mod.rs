//! File formats: ASCII PLY geometry, PNM depth/mask rasters, rigid-transform
//! text files, and ordered key-value sidecars.

mod kv;
mod ply;
mod pnm;
mod transform_io;

pub use kv::KeyValues;
pub use ply::{read_ply_cloud, read_ply_mesh, write_ply_cloud, write_ply_mesh};
pub use pnm::{
    read_depth_text, read_pbm, read_pgm16, write_depth_text, write_pbm, write_pgm16,
};
pub use transform_io::{read_transform, write_transform_flat, write_transform_kv};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
