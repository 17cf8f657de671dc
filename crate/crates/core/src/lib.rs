#![cfg_attr(test, allow(clippy::approx_constant))]

pub mod geom;
pub mod gp;
pub mod calib;
pub mod sim;
pub mod boed;
pub mod pipeline;
pub mod monsid;
pub mod exec;
