//! Numerical calculus on Carnot–Carathéodory spaces.

pub mod builtin;
pub mod cli;
pub mod cone;
pub mod diff;
pub mod error;
pub mod flows;
pub mod horizontal;
pub mod measure;
pub mod poly;
pub mod report;
pub mod sampling;
pub mod structure;

pub use error::{Error, Result};
pub use structure::{load_structure, CCStructure, Point};
