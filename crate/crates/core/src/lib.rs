pub mod diffcore;
pub mod energies;
pub mod lab;
pub mod objectives;
pub mod replay;
pub mod rng;
pub mod sampling;
