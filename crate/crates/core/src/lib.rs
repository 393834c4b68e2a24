//! Scene coordinate regression with a scene-agnostic cross-attention
//! regressor conditioned on per-scene map codes.

pub mod autodiff;
pub mod binio;
pub mod buffers;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod maploc;
pub mod pretrain;
pub mod regressor;
pub mod seeds;
pub mod synthworld;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Format(#[from] binio::FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
}
