//! Plug-and-play ADMM reconstruction engine.
//!
//! The crate splits a reconstruction into an inversion operator carrying the
//! forward model and a denoising operator carrying the prior, couples them
//! with scaled two-block ADMM, and provides the pieces the experiments need
//! around that loop: non-local-means weight construction (plain and doubly
//! stochastic), a sparse-interpolation forward model with Shepard baseline, a
//! robustified bright-field tomography model with filtered backprojection
//! baseline, phantom and noise simulation, and the on-disk formats.

pub mod error;
pub mod image;
pub mod interp;
pub mod io;
pub mod nlm;
pub mod pnp;
pub mod tomo;
pub mod projector;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use image::Image;
