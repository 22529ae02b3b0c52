//! Dense surface correspondence for human body scans.
//!
//! Scans are decimated into a multi-resolution edge hierarchy, a mesh
//! convolutional network regresses per-edge coordinates in a Euclidean
//! embedding of template geodesics, and an articulated body model is then
//! fitted to the scan with ICP guided by those coordinates.

pub mod body;
pub mod conv_net;
pub mod decimate;
pub mod embedding;
pub mod mesh;
pub mod optim;
pub mod pipeline;
pub mod register;
pub mod surface_field;
pub mod synth;
