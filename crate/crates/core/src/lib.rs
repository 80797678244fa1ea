//! 3D multi-conditional GAN augmentation for lung-nodule detection.
//!
//! Volumes and geometry live in [`volume`], dataset handling in [`dataset`]
//! and [`phantom`], generator inputs in [`conditioning`], networks and
//! losses in [`mcgan`] (built on the small [`nn`] engine), the adversarial
//! loop and synthesis in [`training`], post-processing in [`blending`], the
//! detector in [`detector`], scoring in [`evaluation`], and the rating-study
//! service in [`vtt`].

pub mod blending;
pub mod conditioning;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod mcgan;
pub mod nn;
pub mod phantom;
pub mod training;
pub mod volume;
pub mod vtt;

pub use error::{Error, Result};
