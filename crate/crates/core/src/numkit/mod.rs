//! Dense linear algebra and seeded randomness.

mod fsm;
mod matrix;
mod rng;
mod svd;

pub use fsm::{read_matrix, write_matrix, MAGIC as FSM_MAGIC};
pub use matrix::{dot, matmul, Matrix};
pub use rng::{gaussian_fill, RngStream};
pub use svd::{numerical_rank, svd_thin, truncated_factor, Svd};
