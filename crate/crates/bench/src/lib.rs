//! Fixtures shared by the benchmarks.

use arrowkkt::gen::{random_block_vector, random_spd_bta};
use arrowkkt::planner::optimal_partition;
use arrowkkt::{BlockTridiagArrowMatrix, BlockVector, DenseBlock, PartitionPlan};

/// A random SPD system together with its optimal plan for `threads`.
pub struct Fixture {
    pub matrix: BlockTridiagArrowMatrix,
    pub rhs: BlockVector,
    pub plan: PartitionPlan,
}

pub fn fixture(stages: usize, b: usize, global_size: usize, threads: usize) -> Fixture {
    let matrix = random_spd_bta(stages, b, global_size, 42, 1.0);
    let rhs = random_block_vector(&matrix.stage_sizes(), global_size, 43);
    let plan = optimal_partition(stages, threads).expect("feasible plan");
    Fixture { matrix, rhs, plan }
}

/// Well-conditioned `n × n` SPD block.
pub fn spd_block(n: usize) -> DenseBlock {
    DenseBlock::from_fn(n, n, |i, j| {
        let off = ((i * 7 + j * 7 + 3) % 11) as f64 / 11.0 - 0.5;
        if i == j {
            n as f64 + 1.0
        } else {
            off / n as f64
        }
    })
}

/// Dense `rows × cols` block with entries in `[-0.5, 0.5)`.
pub fn general_block(rows: usize, cols: usize) -> DenseBlock {
    DenseBlock::from_fn(rows, cols, |i, j| ((i * 13 + j * 5 + 1) % 17) as f64 / 17.0 - 0.5)
}
