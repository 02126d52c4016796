//! Sequential block Cholesky of a block-tridiagonal-arrow matrix, and a
//! dense Cholesky solver used as an independent reference.

use crate::btam::{BlockTridiagArrowMatrix, BlockVector};
use crate::error::{Error, Location, Result};
use crate::kernels::{
    chol_lower_in_place, mat_t_vec_sub_in_place, mat_vec_sub_in_place,
    mul_sub_transposed_in_place, solve_right_transposed_in_place, sym_downdate_in_place,
    tri_solve_backward_in_place, tri_solve_forward_in_place, DenseBlock, FlopCounter,
};

/// Block-bidiagonal factor with an arrow row: `L_{ii}`, `L_{i+1,i}`, `L_{g,i}`, `L_{gg}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialFactor {
    pub diag: Vec<DenseBlock>,
    pub sub: Vec<DenseBlock>,
    pub arrow: Vec<DenseBlock>,
    pub corner: Option<DenseBlock>,
}

impl SequentialFactor {
    pub fn num_stages(&self) -> usize {
        self.diag.len()
    }

    /// Dense assembly of `L` in the original ordering.
    pub fn to_dense_lower(&self) -> DenseBlock {
        let as_matrix = BlockTridiagArrowMatrix {
            diag: self.diag.clone(),
            sub: self.sub.clone(),
            arrow: self.arrow.clone(),
            corner: self.corner.clone(),
        };
        let offsets = as_matrix.offsets();
        let n = as_matrix.dim();
        let mut out = DenseBlock::zeros(n, n);
        let mut put = |r0: usize, c0: usize, blk: &DenseBlock| {
            for j in 0..blk.cols() {
                for i in 0..blk.rows() {
                    out[(r0 + i, c0 + j)] = blk[(i, j)];
                }
            }
        };
        let m = self.diag.len();
        for i in 0..m {
            put(offsets[i], offsets[i], &self.diag[i]);
            if i + 1 < m {
                put(offsets[i + 1], offsets[i], &self.sub[i]);
            }
            if let Some(a) = self.arrow.get(i) {
                put(offsets[m], offsets[i], a);
            }
        }
        if let Some(c) = &self.corner {
            put(offsets[m], offsets[m], c);
        }
        out
    }
}

/// Factors `m` stage by stage. Stage sizes may vary.
pub fn factorize_sequential(
    m: &BlockTridiagArrowMatrix,
    flops: &mut FlopCounter,
) -> Result<SequentialFactor> {
    m.validate()?;
    let stages = m.num_stages();
    let has_global = m.has_global();
    let mut diag = m.diag.clone();
    let mut sub = m.sub.clone();
    let mut arrow = m.arrow.clone();
    let mut corner = m.corner.clone();

    for i in 0..stages {
        chol_lower_in_place(&mut diag[i], flops).map_err(|e| e.at(Location::Stage(i)))?;
        if has_global {
            solve_right_transposed_in_place(&mut arrow[i], &diag[i], flops)?;
            sym_downdate_in_place(corner.as_mut().expect("corner"), &arrow[i], flops)?;
        }
        if i + 1 < stages {
            solve_right_transposed_in_place(&mut sub[i], &diag[i], flops)?;
            sym_downdate_in_place(&mut diag[i + 1], &sub[i], flops)?;
            if has_global {
                let (prev, next) = arrow.split_at_mut(i + 1);
                mul_sub_transposed_in_place(&mut next[0], &prev[i], &sub[i], flops)?;
            }
        }
    }
    if let Some(c) = corner.as_mut() {
        chol_lower_in_place(c, flops).map_err(|e| e.at(Location::Corner))?;
    }
    Ok(SequentialFactor {
        diag,
        sub,
        arrow,
        corner,
    })
}

/// Forward then backward substitution on a [`SequentialFactor`].
pub fn solve_sequential(
    f: &SequentialFactor,
    r: &BlockVector,
    flops: &mut FlopCounter,
) -> Result<BlockVector> {
    let stages = f.num_stages();
    if r.stages.len() != stages
        || r.stages.iter().zip(&f.diag).any(|(s, d)| s.len() != d.rows())
        || r.global.len() != f.corner.as_ref().map_or(0, DenseBlock::rows)
    {
        return Err(Error::DimensionMismatch {
            op: "solve_sequential",
            expected: (f.diag.iter().map(DenseBlock::rows).sum(), 1),
            found: (r.len(), 1),
        });
    }
    let mut x = r.clone();
    // L y = r
    for i in 0..stages {
        tri_solve_forward_in_place(&f.diag[i], &mut x.stages[i], flops)
            .map_err(|e| e.at(Location::Stage(i)))?;
        if i + 1 < stages {
            let (done, rest) = x.stages.split_at_mut(i + 1);
            mat_vec_sub_in_place(&mut rest[0], &f.sub[i], &done[i], flops)?;
        }
        if let Some(a) = f.arrow.get(i) {
            mat_vec_sub_in_place(&mut x.global, a, &x.stages[i], flops)?;
        }
    }
    if let Some(c) = &f.corner {
        tri_solve_forward_in_place(c, &mut x.global, flops).map_err(|e| e.at(Location::Corner))?;
        tri_solve_backward_in_place(c, &mut x.global, flops)
            .map_err(|e| e.at(Location::Corner))?;
    }
    // Lᵀ x = y
    for i in (0..stages).rev() {
        if let Some(a) = f.arrow.get(i) {
            mat_t_vec_sub_in_place(&mut x.stages[i], a, &x.global, flops)?;
        }
        if i + 1 < stages {
            let (head, tail) = x.stages.split_at_mut(i + 1);
            mat_t_vec_sub_in_place(&mut head[i], &f.sub[i], &tail[0], flops)?;
        }
        tri_solve_backward_in_place(&f.diag[i], &mut x.stages[i], flops)
            .map_err(|e| e.at(Location::Stage(i)))?;
    }
    Ok(x)
}

/// Factor and solve in one call.
pub fn solve_sequential_system(
    m: &BlockTridiagArrowMatrix,
    r: &BlockVector,
) -> Result<BlockVector> {
    r.conforms_to(m)?;
    let mut flops = FlopCounter::new();
    let f = factorize_sequential(m, &mut flops)?;
    solve_sequential(&f, r, &mut flops)
}

/// Dense Cholesky of a full symmetric matrix (lower triangle read).
/// Written independently of the block kernels so it can serve as a reference.
pub fn dense_cholesky(a: &DenseBlock) -> Result<DenseBlock> {
    let n = a.rows();
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            op: "dense_cholesky",
            expected: (n, n),
            found: a.shape(),
        });
    }
    let mut l = DenseBlock::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > 0.0) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: s,
                location: Location::Dense,
            });
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `A x = r` by dense Cholesky.
pub fn solve_dense_oracle(a: &DenseBlock, r: &[f64]) -> Result<Vec<f64>> {
    let l = dense_cholesky(a)?;
    let n = l.rows();
    if r.len() != n {
        return Err(Error::DimensionMismatch {
            op: "solve_dense_oracle",
            expected: (n, 1),
            found: (r.len(), 1),
        });
    }
    let mut y = r.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    Ok(y)
}
