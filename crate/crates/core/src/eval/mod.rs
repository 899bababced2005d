//! Reconstruction metrics, voxelization, phantoms and ray-cast radiographs.

pub mod drr;
pub mod metrics;
pub mod phantom;
pub mod volume;

use thiserror::Error;

use crate::geometry::GeometryError;

pub use drr::{raycast_drr, DrrObject};
pub use metrics::{compare_volumes, dice, hd95, masd, nsd, MetricReport, DEFAULT_NSD_TAU};
pub use phantom::{generate_phantoms, generate_phantoms_with, PhantomConfig, PhantomFamily};
pub use volume::{voxelize_mesh, voxelize_mesh_on, voxelize_points, BinaryVolume, Grid, VoxelMethod};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input geometry")]
    EmptyInput,
    #[error("voxel spacing {0} mm outside [0.25, 5]")]
    InvalidSpacing(f64),
    #[error("geometry has zero volume at this spacing")]
    ZeroVolume,
    #[error("volumes are not on a common grid: {0}")]
    MisalignedGrids(String),
    #[error("volume has no surface voxels")]
    EmptySurface,
    #[error(transparent)]
    Camera(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(String),
    #[error("malformed volume file: {0}")]
    Format(String),
}
