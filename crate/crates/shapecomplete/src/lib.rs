//! Volumetric anatomy shape completion toolkit.

pub mod corpus;
pub mod network;
pub mod objective;
pub mod voxel;
