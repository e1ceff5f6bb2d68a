//! Generative modeling of 3D grain geometries.
//!
//! The pipeline learns a compact latent representation of grain point clouds
//! with a point cloud autoencoder, trains a denoising diffusion model in that
//! latent space, and turns sampled latents back into grains: decoded point
//! clouds, reconstructed surface meshes, size/shape statistics, and packed
//! assemblies with contact-network metrics.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`] — dense tensors, reverse-mode differentiation, layers,
//!   optimizers, and the checkpoint format.
//! - [`pointcloud`] — grain point clouds, dataset normalization, node
//!   embedding enrichment, rotation augmentation, and PLY ingest.
//! - [`autoencoder`] — Chamfer-trained encoder/decoder between enhanced
//!   point clouds and 28×28 latent grids.
//! - [`diffusion`] — noise schedules, forward/reverse process math, the
//!   hybrid training loss, and the ancestral sampler.
//! - [`unet`] — the compact time-conditioned U-Net that predicts noise and
//!   per-element variance interpolation over latent grids.
//! - [`morphology`] — minimum bounding spheres, grain size distributions,
//!   and surface-orientation shape metrics.
//! - [`surfacing`] — normal estimation, ball-pivoting reconstruction, hole
//!   closing, and mesh volume.
//! - [`deposition`] — gravity deposition of rigid grains into a cylindrical
//!   container and porosity measurement.
//! - [`contact`] — contact graphs of settled assemblies and their scalar
//!   network metrics.
//! - [`pipeline`] — run configuration, stage orchestration, and report
//!   emission.
//!
//! Runnable entry points for each capability live under `examples/`; the
//! `graingen` binary exposes the same stages as subcommands.

pub mod autoencoder;
pub mod contact;
pub mod deposition;
pub mod diffusion;
pub mod error;
pub mod geom;
pub mod morphology;
pub mod pipeline;
pub mod pointcloud;
pub mod rng;
pub mod surfacing;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
