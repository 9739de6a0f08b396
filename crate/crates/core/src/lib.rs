#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod smiles;
pub mod tensor;
pub mod tokenizer;
pub mod geometry;
pub mod unigraph;
pub mod partition;
pub mod model;
pub mod train;
