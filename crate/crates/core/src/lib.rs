//! Parallel Cholesky factorization and triangular solves for symmetric
//! positive-definite block-tridiagonal-arrow systems.
//!
//! A matrix is a chain of `M` stage blocks with sub-diagonal couplings and an
//! optional dense coupling of every stage to a block of global variables.
//! [`par::solve`] splits the stages into segments according to a
//! [`PartitionPlan`], factors every segment on its own thread and finishes
//! with a short sequential phase. [`planner`] chooses plans and predicts
//! speedups from an exact flop model.
//!
//! ```
//! use arrowkkt::{gen, par, planner};
//!
//! let m = gen::random_spd_bta(24, 4, 2, 1, 1.0);
//! let r = gen::random_block_vector(&m.stage_sizes(), 2, 2);
//! let plan = planner::optimal_partition(24, 3).unwrap();
//! let x = par::solve(&m, &r, &plan).unwrap();
//! assert!(m.relative_residual(&x, &r) < 1e-12);
//! ```

pub mod btam;
pub mod error;
pub mod gen;
pub mod io;
pub mod kernels;
pub mod par;
pub mod planner;
pub mod seq;

pub use btam::{
    make_layout, permutation_of, permute_rhs, unpermute_solution, ArrowFactor,
    BlockTridiagArrowMatrix, BlockVector, PartitionPlan, SegmentedKKT, StagePermutation,
};
pub use error::{Error, Location, Result};
pub use kernels::{DenseBlock, FlopCounter, KernelKind};
pub use par::{KktSolver, PhaseFlops, SolveReport, SolveTimings};
pub use seq::{factorize_sequential, solve_sequential, SequentialFactor};
