//! Imaging pipeline for infrared-guided high dynamic range reconstruction.
//!
//! The crate is organized as a set of pure, independently testable stages:
//!
//! - [`imgio`] — typed image containers (radiance, SDR, thermal) and file I/O
//!   (Radiance RGBE, PFM, PNG, PPM, 16-bit PGM with JSON sidecars).
//! - [`hdr`] — camera response recovery, weighted multi-exposure merging, and
//!   the inverse camera model used to fabricate exposure brackets.
//! - [`register`] — homography estimation from point correspondences, inverse
//!   warping, and overlap cropping.
//! - [`metrics`] — perceptually uniform HDR quality metrics (pu-PSNR, pu-SSIM,
//!   pu-VSI).
//! - [`tonemap`] — bilateral-grid base/detail tone mapping for display.
//! - [`data`] — procedural RGB-thermal scene generation and dataset assembly.
//!
//! All operations are deterministic given explicit seeds; images are plain
//! owned buffers, safe to share read-only across threads.

pub mod data;
pub mod hdr;
pub mod imgio;
pub mod metrics;
pub mod register;
pub mod tonemap;

pub use imgio::{Image, ImageFormat, IrImage, RadianceImage, SdrImage};
