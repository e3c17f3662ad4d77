#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod density;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod guidance;
pub mod image;
pub mod io;
pub mod mesh;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod sds;
pub mod texture;

pub use error::{Error, OracleError, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/splats.md")]
mod book_splats {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/schedules.md")]
mod book_schedules {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/distillation.md")]
mod book_distillation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/density.md")]
mod book_density {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/meshes.md")]
mod book_meshes {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod book_pipeline {}
