//! Background prompting for object depth.
//!
//! A segmented object is composited onto a learned background image and fed to
//! a frozen monocular depth network; only the background is optimized. The
//! crate is self-contained: reverse-mode autodiff (`gradcore`), a procedural
//! sample renderer (`synthscene`), a small trainable depth network
//! (`depthnet`), prompt parameterizations and losses (`prompting`), metric
//! reporting (`evalkit`), and a file-driven pipeline front end (`cli`).

pub mod error;
pub mod gradcore;
pub mod util;

pub use error::{Error, Result};
