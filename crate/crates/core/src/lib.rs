pub mod padic;
pub mod linalg;
pub mod expr;
pub mod rep;
pub mod convergence;
pub mod limit;
pub mod lattice;
pub mod envelope;
pub mod fixtures;
pub mod cli;
