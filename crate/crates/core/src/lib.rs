#![no_std]
extern crate alloc;

pub mod autograd;
pub mod aux;
pub mod config;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod vocab;
