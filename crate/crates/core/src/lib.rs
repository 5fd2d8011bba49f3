//! Uncertainty-aware RGB-Event single object tracking on unaligned sensors.

pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod head;
pub mod eventio;
pub mod imaging;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tracker;
pub mod trainer;
pub mod uncertainty;

pub use bbox::BoundingBox;
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use model::Model;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
