//! Dense block kernels: Cholesky, triangular solves, rank updates and
//! matrix-vector products on small column-major blocks.
//!
//! Every kernel records its nominal flop count in a [`FlopCounter`]. The
//! counts follow the block-level convention used throughout the flop model:
//! `potrf` costs `n³/3`, `trsm` costs `m·n²`, `syrk` costs `n²·k` (the full
//! square, not the triangle), `gemm` costs `2·m·k·n`, `trsv` costs `n²/2`
//! and `gemv` costs `2·m·n`.

use std::ops::{AddAssign, Index, IndexMut};

use num_rational::Rational64;

use crate::error::{Error, Location, Result};

/// Pivots at or below this value are treated as a loss of positive definiteness.
pub const PIVOT_FLOOR: f64 = 1e-300;

/// A dense column-major `rows × cols` block of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseBlock {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Wraps column-major `data`; fails if the length does not match.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_col_major",
                expected: (rows * cols, 1),
                found: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a block from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[i + j * rows] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn copy_from(&mut self, other: &DenseBlock) {
        assert_eq!(self.shape(), other.shape());
        self.data.copy_from_slice(&other.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Copies the lower triangle onto the upper one.
    pub fn symmetrize_from_lower(&mut self) {
        debug_assert!(self.is_square());
        for j in 0..self.cols {
            for i in 0..j {
                self.data[i + j * self.rows] = self.data[j + i * self.rows];
            }
        }
    }

    /// Zeros the strictly upper triangle.
    pub fn clear_upper(&mut self) {
        for j in 0..self.cols {
            for i in 0..j.min(self.rows) {
                self.data[i + j * self.rows] = 0.0;
            }
        }
    }

    /// Adds `alpha·I` to a square block.
    pub fn add_diagonal(&mut self, alpha: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += alpha;
        }
    }

    /// `self += other` entrywise.
    pub fn add_assign_block(&mut self, other: &DenseBlock) {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let s = alpha * vj;
            for (c, &ui) in self.col_mut(j).iter_mut().zip(u) {
                *c += s * ui;
            }
        }
    }

    /// `y = self · x` (no flop accounting; assembly helper).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            for (yi, &a) in y.iter_mut().zip(self.col(j)) {
                *yi += a * xj;
            }
        }
        y
    }
}

impl Index<(usize, usize)> for DenseBlock {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i + j * self.rows]
    }
}

impl IndexMut<(usize, usize)> for DenseBlock {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i + j * self.rows]
    }
}

/// Kernel categories tracked by [`FlopCounter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Potrf,
    Trsm,
    Syrk,
    Gemm,
    Trsv,
    Gemv,
}

impl KernelKind {
    pub const ALL: [KernelKind; 6] = [
        KernelKind::Potrf,
        KernelKind::Trsm,
        KernelKind::Syrk,
        KernelKind::Gemm,
        KernelKind::Trsv,
        KernelKind::Gemv,
    ];
}

/// Exact per-kernel flop tallies.
///
/// Counts are stored as integer multiples of 1/6 so that both the `n³/3`
/// Cholesky term and the `n²/2` triangular-solve term stay exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    sixths: [u64; 6],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    fn bump(&mut self, kind: KernelKind, sixths: u64) {
        self.sixths[kind as usize] += sixths;
    }

    /// Tally of one category, in flops.
    pub fn get(&self, kind: KernelKind) -> Rational64 {
        Rational64::new(self.sixths[kind as usize] as i64, 6)
    }

    pub fn potrf(&self) -> Rational64 {
        self.get(KernelKind::Potrf)
    }
    pub fn trsm(&self) -> Rational64 {
        self.get(KernelKind::Trsm)
    }
    pub fn syrk(&self) -> Rational64 {
        self.get(KernelKind::Syrk)
    }
    pub fn gemm(&self) -> Rational64 {
        self.get(KernelKind::Gemm)
    }
    pub fn trsv(&self) -> Rational64 {
        self.get(KernelKind::Trsv)
    }
    pub fn gemv(&self) -> Rational64 {
        self.get(KernelKind::Gemv)
    }

    /// Sum over all categories, in flops.
    pub fn total(&self) -> Rational64 {
        Rational64::new(self.sixths.iter().sum::<u64>() as i64, 6)
    }

    /// Total expressed in units of `unit` flops (for instance `b³` or `b²`).
    pub fn total_in(&self, unit: u64) -> Rational64 {
        self.total() / Rational64::from_integer(unit as i64)
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (a, b) in self.sixths.iter_mut().zip(other.sixths) {
            *a += b;
        }
    }
}

impl AddAssign<&FlopCounter> for FlopCounter {
    fn add_assign(&mut self, rhs: &FlopCounter) {
        self.merge(rhs);
    }
}

fn check_dims(op: &'static str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            op,
            expected,
            found,
        })
    }
}

/// In-place lower Cholesky: on success the lower triangle of `a` holds `L`
/// and the strictly upper triangle is zeroed. Only the lower triangle of the
/// input is read.
pub fn chol_lower_in_place(a: &mut DenseBlock, flops: &mut FlopCounter) -> Result<()> {
    check_dims("chol_lower", (a.rows, a.rows), a.shape())?;
    let n = a.rows;
    // Left-looking column Cholesky.
    for j in 0..n {
        for k in 0..j {
            let ljk = a.data[j + k * n];
            if ljk == 0.0 {
                continue;
            }
            for i in j..n {
                a.data[i + j * n] -= a.data[i + k * n] * ljk;
            }
        }
        let pivot = a.data[j + j * n];
        if !(pivot > PIVOT_FLOOR) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
                location: Location::Block,
            });
        }
        let d = pivot.sqrt();
        a.data[j + j * n] = d;
        let inv = 1.0 / d;
        for i in j + 1..n {
            a.data[i + j * n] *= inv;
        }
    }
    a.clear_upper();
    let n = n as u64;
    flops.bump(KernelKind::Potrf, 2 * n * n * n);
    Ok(())
}

/// Returns `L` with `L Lᵀ = A`.
pub fn chol_lower(a: &DenseBlock, flops: &mut FlopCounter) -> Result<DenseBlock> {
    let mut l = a.clone();
    chol_lower_in_place(&mut l, flops)?;
    Ok(l)
}

fn check_diagonal(l: &DenseBlock) -> Result<()> {
    for i in 0..l.rows {
        if l[(i, i)] == 0.0 {
            return Err(Error::SingularFactor {
                pivot: i,
                location: Location::Block,
            });
        }
    }
    Ok(())
}

/// Overwrites `b` (m×n) with `X` such that `X Lᵀ = B`, for lower-triangular
/// `l` (n×n).
pub fn solve_right_transposed_in_place(
    b: &mut DenseBlock,
    l: &DenseBlock,
    flops: &mut FlopCounter,
) -> Result<()> {
    let n = l.rows;
    check_dims("solve_right_transposed", (n, n), l.shape())?;
    check_dims("solve_right_transposed", (b.rows, n), b.shape())?;
    check_diagonal(l)?;
    let m = b.rows;
    for j in 0..n {
        for k in 0..j {
            let ljk = l.data[j + k * n];
            if ljk == 0.0 {
                continue;
            }
            let (done, rest) = b.data.split_at_mut(j * m);
            let xk = &done[k * m..(k + 1) * m];
            for (x, &y) in rest[..m].iter_mut().zip(xk) {
                *x -= ljk * y;
            }
        }
        let inv = 1.0 / l.data[j + j * n];
        for x in &mut b.data[j * m..(j + 1) * m] {
            *x *= inv;
        }
    }
    flops.bump(KernelKind::Trsm, 6 * (m * n * n) as u64);
    Ok(())
}

/// Returns `X` with `X Lᵀ = B`.
pub fn solve_right_transposed(
    b: &DenseBlock,
    l: &DenseBlock,
    flops: &mut FlopCounter,
) -> Result<DenseBlock> {
    let mut x = b.clone();
    solve_right_transposed_in_place(&mut x, l, flops)?;
    Ok(x)
}

/// `C ← C − X Xᵀ` on the lower triangle of the square block `c`.
pub fn sym_downdate_in_place(
    c: &mut DenseBlock,
    x: &DenseBlock,
    flops: &mut FlopCounter,
) -> Result<()> {
    let n = c.rows;
    check_dims("sym_downdate", (n, n), c.shape())?;
    check_dims("sym_downdate", (n, x.cols), x.shape())?;
    let m = x.cols;
    for k in 0..m {
        let xk = x.col(k);
        for j in 0..n {
            let xjk = xk[j];
            if xjk == 0.0 {
                continue;
            }
            let cj = &mut c.data[j * n..(j + 1) * n];
            for i in j..n {
                cj[i] -= xk[i] * xjk;
            }
        }
    }
    flops.bump(KernelKind::Syrk, 6 * (n * n * m) as u64);
    Ok(())
}

/// Returns `C − X Xᵀ` with the lower triangle authoritative.
pub fn sym_downdate(
    c: &DenseBlock,
    x: &DenseBlock,
    flops: &mut FlopCounter,
) -> Result<DenseBlock> {
    let mut out = c.clone();
    sym_downdate_in_place(&mut out, x, flops)?;
    Ok(out)
}

/// `C ← C − A B`.
pub fn mul_sub_in_place(
    c: &mut DenseBlock,
    a: &DenseBlock,
    b: &DenseBlock,
    flops: &mut FlopCounter,
) -> Result<()> {
    check_dims("mul_sub", (a.cols, c.cols), b.shape())?;
    check_dims("mul_sub", (c.rows, b.rows), a.shape())?;
    let (m, inner, n) = (a.rows, a.cols, b.cols);
    for j in 0..n {
        let cj = &mut c.data[j * m..(j + 1) * m];
        for k in 0..inner {
            let bkj = b.data[k + j * inner];
            if bkj == 0.0 {
                continue;
            }
            for (ci, &aik) in cj.iter_mut().zip(a.col(k)) {
                *ci -= aik * bkj;
            }
        }
    }
    flops.bump(KernelKind::Gemm, 12 * (m * inner * n) as u64);
    Ok(())
}

/// Returns `C − A B`.
pub fn mul_sub(
    c: &DenseBlock,
    a: &DenseBlock,
    b: &DenseBlock,
    flops: &mut FlopCounter,
) -> Result<DenseBlock> {
    let mut out = c.clone();
    mul_sub_in_place(&mut out, a, b, flops)?;
    Ok(out)
}

/// `C ← C − A Bᵀ`.
pub fn mul_sub_transposed_in_place(
    c: &mut DenseBlock,
    a: &DenseBlock,
    b: &DenseBlock,
    flops: &mut FlopCounter,
) -> Result<()> {
    check_dims("mul_sub_transposed", (c.cols, a.cols), b.shape())?;
    check_dims("mul_sub_transposed", (c.rows, b.cols), a.shape())?;
    let (m, inner, n) = (a.rows, a.cols, b.rows);
    for j in 0..n {
        let cj = &mut c.data[j * m..(j + 1) * m];
        for k in 0..inner {
            let bjk = b.data[j + k * n];
            if bjk == 0.0 {
                continue;
            }
            for (ci, &aik) in cj.iter_mut().zip(a.col(k)) {
                *ci -= aik * bjk;
            }
        }
    }
    flops.bump(KernelKind::Gemm, 12 * (m * inner * n) as u64);
    Ok(())
}

/// Solves `L y = r` in place.
pub fn tri_solve_forward_in_place(
    l: &DenseBlock,
    r: &mut [f64],
    flops: &mut FlopCounter,
) -> Result<()> {
    let n = l.rows;
    check_dims("tri_solve_forward", (n, n), l.shape())?;
    check_dims("tri_solve_forward", (n, 1), (r.len(), 1))?;
    check_diagonal(l)?;
    for j in 0..n {
        let yj = r[j] / l.data[j + j * n];
        r[j] = yj;
        if yj != 0.0 {
            for i in j + 1..n {
                r[i] -= l.data[i + j * n] * yj;
            }
        }
    }
    flops.bump(KernelKind::Trsv, 3 * (n * n) as u64);
    Ok(())
}

/// Returns `y` with `L y = r`.
pub fn tri_solve_forward(l: &DenseBlock, r: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    let mut y = r.to_vec();
    tri_solve_forward_in_place(l, &mut y, flops)?;
    Ok(y)
}

/// Solves `Lᵀ x = y` in place.
pub fn tri_solve_backward_in_place(
    l: &DenseBlock,
    y: &mut [f64],
    flops: &mut FlopCounter,
) -> Result<()> {
    let n = l.rows;
    check_dims("tri_solve_backward", (n, n), l.shape())?;
    check_dims("tri_solve_backward", (n, 1), (y.len(), 1))?;
    check_diagonal(l)?;
    for j in (0..n).rev() {
        let col = l.col(j);
        let mut s = y[j];
        for i in j + 1..n {
            s -= col[i] * y[i];
        }
        y[j] = s / col[j];
    }
    flops.bump(KernelKind::Trsv, 3 * (n * n) as u64);
    Ok(())
}

/// Returns `x` with `Lᵀ x = y`.
pub fn tri_solve_backward(l: &DenseBlock, y: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    let mut x = y.to_vec();
    tri_solve_backward_in_place(l, &mut x, flops)?;
    Ok(x)
}

/// `y ← y − A x`.
pub fn mat_vec_sub_in_place(
    y: &mut [f64],
    a: &DenseBlock,
    x: &[f64],
    flops: &mut FlopCounter,
) -> Result<()> {
    check_dims("mat_vec_sub", (a.rows, a.cols), (y.len(), x.len()))?;
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (yi, &aij) in y.iter_mut().zip(a.col(j)) {
            *yi -= aij * xj;
        }
    }
    flops.bump(KernelKind::Gemv, 12 * (a.rows * a.cols) as u64);
    Ok(())
}

/// Returns `y − A x`.
pub fn mat_vec_sub(
    y: &[f64],
    a: &DenseBlock,
    x: &[f64],
    flops: &mut FlopCounter,
) -> Result<Vec<f64>> {
    let mut out = y.to_vec();
    mat_vec_sub_in_place(&mut out, a, x, flops)?;
    Ok(out)
}

/// `y ← y − Aᵀ x`.
pub fn mat_t_vec_sub_in_place(
    y: &mut [f64],
    a: &DenseBlock,
    x: &[f64],
    flops: &mut FlopCounter,
) -> Result<()> {
    check_dims("mat_t_vec_sub", (a.cols, a.rows), (y.len(), x.len()))?;
    for (j, yj) in y.iter_mut().enumerate() {
        let dot: f64 = a.col(j).iter().zip(x).map(|(a, b)| a * b).sum();
        *yj -= dot;
    }
    flops.bump(KernelKind::Gemv, 12 * (a.rows * a.cols) as u64);
    Ok(())
}
