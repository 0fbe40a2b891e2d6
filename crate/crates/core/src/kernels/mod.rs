//! Dense kernels, scatter/gather, seeded support sampling and small SVD.

mod matrix;
mod rng;
mod sparse;
mod svd;

pub use matrix::{
    matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn, matmul_tn_acc, Matrix,
};
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use sparse::{gather, sample_support, scatter_add, scatter_add_in_place, IndexSet};
pub use svd::{svd_small, Svd, SVD_LIMIT};
