//! Adaptive two-grid finite element toolkit.

pub mod adaptivity;
pub mod cli;
pub mod algorithms;
pub mod assembly;
pub mod fespace;
pub mod geom;
pub mod linalg;
pub mod mesh;
pub mod problems;
pub mod quadrature;
