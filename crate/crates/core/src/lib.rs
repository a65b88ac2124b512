//! Motion-deblurring dynamic radiance fields at desk scale.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`diffmath`]), screw-axis ray warping ([`se3`]), the static/dynamic
//! radiance fields and their encodings ([`fields`]), volume rendering
//! ([`render`]), the latent-ray blur model ([`blur`]), the training
//! objectives ([`loss`]), the two-stage optimizer ([`train`]), synthetic
//! blurry-video generation ([`data`]) and evaluation ([`eval`]).

pub mod blur;
pub mod data;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod fields;
pub mod loss;
pub mod render;
pub mod se3;
pub mod train;

pub use error::{Error, Result};
