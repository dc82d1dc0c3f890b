//! Numerical construction of convex-integration iterates for the surface
//! quasi-geostrophic equation driven by additive or linear multiplicative noise
//! on the torus [-pi, pi]^2.

pub mod params;
pub mod spectral;
pub mod geometry;
pub mod noise;
pub mod mollify;
pub mod transport;
pub mod iterate;
pub mod stress;
pub mod run;
pub mod verify;
