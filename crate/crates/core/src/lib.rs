pub mod autodiff;
pub mod error;

pub use autodiff::{Graph, Real, Tensor, Var};
pub use error::{Error, Result};
pub mod attention;
pub mod controller;
pub mod featnet;
pub mod frame;
pub mod geometry;
mod init;
pub mod memory;
pub mod config;
pub mod model;
pub mod tracker;

pub use config::{Config, Variant};
pub use geometry::BoundingBox;
pub use model::Model;
pub mod synthetic;
pub mod trainer;
pub mod checkpoint;
pub mod eval;
