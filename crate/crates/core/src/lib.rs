//! Angular-margin losses on the unit hypersphere and a desk-scale toolkit
//! around them.

pub mod arch;
pub mod datagen;
pub mod distill;
pub mod eval;
pub mod experiments;
pub mod format;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod sphere;

#[cfg(test)]
pub(crate) mod test_util;
