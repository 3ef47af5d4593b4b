pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod labels;
pub mod loss;
pub mod model;
pub mod rng;
pub mod select;
pub mod selftest;
pub mod smooth;
pub mod tensor;
pub mod train;
