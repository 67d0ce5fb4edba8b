//! Sparse-voxel signed-distance-field surface reconstruction.
//!
//! The crate reconstructs surfaces from posed multi-view images by
//! optimizing SDF values stored at the corners of a sparse voxel octree:
//!
//! - [`lattice`]: coordinate systems, voxel records, octree state, checkpoints
//! - [`assoc`]: occupancy bitmask + sorted lookup tables over the finest lattice
//! - [`field`]: trilinear SDF evaluation and analytic corner gradients
//! - [`geoinit`]: geometric initialization from point maps (similarity
//!   alignment, negative-distance assignment, visibility sign carving)
//! - [`render`]: octree ray traversal, SDF alpha compositing, sharpness schedule
//! - [`losses`]: loss terms with analytic gradients and weight schedules
//! - [`adapt`]: pruning, field-preserving subdivision, regularizer routing
//! - [`trainer`]: optimization loop with a hand-written backward pass
//! - [`meshx`]: marching cubes extraction, Chamfer / F1 metrics
//! - [`synth`]: analytic ground-truth scenes for end-to-end verification

pub mod adapt;
pub mod assoc;
pub mod config;
mod error;
pub mod field;
pub mod geoinit;
pub mod io;
pub mod kdtree;
pub mod lattice;
pub mod losses;
mod mc_tables;
pub mod meshx;
pub mod render;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Configure the global worker pool (0 keeps the library default). Must
/// run before any parallel work; later calls fail harmlessly.
pub fn build_thread_pool(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))
}
