//! Insensitizing controls for the heat equation with respect to domain variations.

pub mod domain;
pub mod error;
pub mod linalg;
pub mod pde;
pub mod shape;
pub mod control_approx;
pub mod exact_fd;
pub mod constructive;
pub mod io;
pub mod config;
pub mod scenario;

pub use error::{Error, Result};
