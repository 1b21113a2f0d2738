//! Mask-conditional 3D semantic scene generation at desk scale.
//!
//! Scenes are labeled voxel grids ([`voxel`]). A triplane autoencoder
//! ([`autoencoder`]) compresses them into three feature planes; per-class
//! trimasks ([`trimask`]) describe where each class may appear; a geometric
//! and semantic fusion module ([`gsfm`]) turns trimasks into conditioning
//! tokens for a latent diffusion model ([`diffusion`]).

pub mod autoencoder;
pub mod config;
pub mod diffusion;
pub mod gsfm;
pub mod layout;
pub mod numerics;
pub mod trimask;
pub mod voxel;
