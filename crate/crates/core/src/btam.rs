//! Block-tridiagonal-arrow matrices, partition plans and the permuted,
//! segment-labelled view consumed by the parallel factorization.
//!
//! Stages are 0-based throughout. `sub[i]` couples stage `i` to stage
//! `i + 1` (it is the block in row `i + 1`, column `i`), and `arrow[i]` is
//! the block in the global row, column `i`.
//!
//! A [`PartitionPlan`] with `p` segments splits the stages into `p` runs of
//! interior stages separated by `p − 1` single separator stages. The
//! permuted ordering lists all interior stages segment by segment, then the
//! separators in order, then the global block.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernels::DenseBlock;

/// Symmetric block-tridiagonal matrix with an optional dense arrow row.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagArrowMatrix {
    /// Diagonal blocks, one per stage.
    pub diag: Vec<DenseBlock>,
    /// Sub-diagonal couplings; `sub[i]` is `n_{i+1} × n_i`.
    pub sub: Vec<DenseBlock>,
    /// Arrow blocks `n_g × n_i`; empty when there are no global variables.
    pub arrow: Vec<DenseBlock>,
    /// Global corner block; `None` when there are no global variables.
    pub corner: Option<DenseBlock>,
}

impl BlockTridiagArrowMatrix {
    /// Block identity with uniform stage size `b` and `global_size` global variables.
    pub fn identity(stages: usize, b: usize, global_size: usize) -> Self {
        let (arrow, corner) = if global_size > 0 {
            (
                vec![DenseBlock::zeros(global_size, b); stages],
                Some(DenseBlock::identity(global_size)),
            )
        } else {
            (Vec::new(), None)
        };
        Self {
            diag: vec![DenseBlock::identity(b); stages],
            sub: vec![DenseBlock::zeros(b, b); stages.saturating_sub(1)],
            arrow,
            corner,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.diag.len()
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.diag.iter().map(DenseBlock::rows).collect()
    }

    pub fn global_size(&self) -> usize {
        self.corner.as_ref().map_or(0, DenseBlock::rows)
    }

    pub fn has_global(&self) -> bool {
        self.global_size() > 0
    }

    /// Total dimension of the assembled matrix.
    pub fn dim(&self) -> usize {
        self.stage_sizes().iter().sum::<usize>() + self.global_size()
    }

    /// The common stage size, if all stages have the same size.
    pub fn uniform_block_size(&self) -> Option<usize> {
        let first = self.diag.first()?.rows();
        self.diag
            .iter()
            .all(|d| d.rows() == first)
            .then_some(first)
    }

    /// Checks dimensions, symmetry of the diagonal blocks and finiteness.
    /// Returns every violation found.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let m = self.diag.len();
        if m == 0 {
            errors.push("matrix has no stages".to_string());
        }
        for (i, d) in self.diag.iter().enumerate() {
            if !d.is_square() {
                errors.push(format!("diag[{i}] is {}x{}, not square", d.rows(), d.cols()));
            } else if !is_symmetric(d) {
                errors.push(format!("diag[{i}] is not symmetric"));
            }
            if !d.is_finite() {
                errors.push(format!("diag[{i}] has non-finite entries"));
            }
        }
        if self.sub.len() != m.saturating_sub(1) {
            errors.push(format!(
                "expected {} sub-diagonal blocks, found {}",
                m.saturating_sub(1),
                self.sub.len()
            ));
        }
        for (i, s) in self.sub.iter().enumerate() {
            if i + 1 < m {
                let expected = (self.diag[i + 1].rows(), self.diag[i].rows());
                if s.shape() != expected {
                    errors.push(format!(
                        "sub[{i}] is {}x{}, expected {}x{}",
                        s.rows(),
                        s.cols(),
                        expected.0,
                        expected.1
                    ));
                }
            }
            if !s.is_finite() {
                errors.push(format!("sub[{i}] has non-finite entries"));
            }
        }
        match &self.corner {
            None => {
                if !self.arrow.is_empty() {
                    errors.push("arrow blocks present without a corner block".to_string());
                }
            }
            Some(c) => {
                let ng = c.rows();
                if !c.is_square() {
                    errors.push(format!("corner is {}x{}, not square", c.rows(), c.cols()));
                } else if !is_symmetric(c) {
                    errors.push("corner is not symmetric".to_string());
                }
                if ng == 0 {
                    errors.push("corner block has zero size".to_string());
                }
                if !c.is_finite() {
                    errors.push("corner has non-finite entries".to_string());
                }
                if self.arrow.len() != m {
                    errors.push(format!(
                        "expected {m} arrow blocks, found {}",
                        self.arrow.len()
                    ));
                }
                for (i, a) in self.arrow.iter().enumerate() {
                    if i < m && a.shape() != (ng, self.diag[i].rows()) {
                        errors.push(format!(
                            "arrow[{i}] is {}x{}, expected {}x{}",
                            a.rows(),
                            a.cols(),
                            ng,
                            self.diag[i].rows()
                        ));
                    }
                    if !a.is_finite() {
                        errors.push(format!("arrow[{i}] has non-finite entries"));
                    }
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(errors))
        }
    }

    /// Offsets of each stage in the assembled (unpermuted) ordering, followed
    /// by the offset of the global block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.diag.len() + 1);
        let mut acc = 0;
        for d in &self.diag {
            offsets.push(acc);
            acc += d.rows();
        }
        offsets.push(acc);
        offsets
    }

    /// Full symmetric dense assembly, both triangles filled.
    pub fn to_dense(&self) -> DenseBlock {
        let offsets = self.offsets();
        let n = self.dim();
        let mut out = DenseBlock::zeros(n, n);
        let put = |out: &mut DenseBlock, r0: usize, c0: usize, blk: &DenseBlock| {
            for j in 0..blk.cols() {
                for i in 0..blk.rows() {
                    out[(r0 + i, c0 + j)] = blk[(i, j)];
                    out[(c0 + j, r0 + i)] = blk[(i, j)];
                }
            }
        };
        for (i, d) in self.diag.iter().enumerate() {
            // Lower triangle is authoritative.
            for c in 0..d.cols() {
                for r in c..d.rows() {
                    out[(offsets[i] + r, offsets[i] + c)] = d[(r, c)];
                    out[(offsets[i] + c, offsets[i] + r)] = d[(r, c)];
                }
            }
        }
        for (i, s) in self.sub.iter().enumerate() {
            put(&mut out, offsets[i + 1], offsets[i], s);
        }
        let g = offsets[self.diag.len()];
        for (i, a) in self.arrow.iter().enumerate() {
            put(&mut out, g, offsets[i], a);
        }
        if let Some(c) = &self.corner {
            for col in 0..c.cols() {
                for row in col..c.rows() {
                    out[(g + row, g + col)] = c[(row, col)];
                    out[(g + col, g + row)] = c[(row, col)];
                }
            }
        }
        out
    }

    /// `y = Ψ x` computed blockwise.
    pub fn mul_vec(&self, x: &BlockVector) -> BlockVector {
        let m = self.num_stages();
        let mut y = BlockVector::zeros_like(self);
        for i in 0..m {
            let d = &self.diag[i];
            // Use the lower triangle only.
            for c in 0..d.cols() {
                for r in c..d.rows() {
                    let v = d[(r, c)];
                    y.stages[i][r] += v * x.stages[i][c];
                    if r != c {
                        y.stages[i][c] += v * x.stages[i][r];
                    }
                }
            }
        }
        for (i, s) in self.sub.iter().enumerate() {
            add_mul(&mut y.stages[i + 1], s, &x.stages[i]);
            add_mul_t(&mut y.stages[i], s, &x.stages[i + 1]);
        }
        for (i, a) in self.arrow.iter().enumerate() {
            add_mul(&mut y.global, a, &x.stages[i]);
            add_mul_t(&mut y.stages[i], a, &x.global);
        }
        if let Some(c) = &self.corner {
            for col in 0..c.cols() {
                for row in col..c.rows() {
                    let v = c[(row, col)];
                    y.global[row] += v * x.global[col];
                    if row != col {
                        y.global[col] += v * x.global[row];
                    }
                }
            }
        }
        y
    }

    /// Infinity norm of the assembled matrix, computed blockwise.
    pub fn norm_inf(&self) -> f64 {
        let m = self.num_stages();
        let mut best = 0.0_f64;
        let abs_row = |blk: &DenseBlock, r: usize| (0..blk.cols()).map(|c| blk[(r, c)].abs()).sum::<f64>();
        let abs_col = |blk: &DenseBlock, c: usize| (0..blk.rows()).map(|r| blk[(r, c)].abs()).sum::<f64>();
        let sym_row = |blk: &DenseBlock, r: usize| {
            (0..blk.cols())
                .map(|c| if c <= r { blk[(r, c)] } else { blk[(c, r)] }.abs())
                .sum::<f64>()
        };
        for i in 0..m {
            for r in 0..self.diag[i].rows() {
                let mut s = sym_row(&self.diag[i], r);
                if i > 0 {
                    s += abs_row(&self.sub[i - 1], r);
                }
                if i + 1 < m {
                    s += abs_col(&self.sub[i], r);
                }
                if let Some(a) = self.arrow.get(i) {
                    s += abs_col(a, r);
                }
                best = best.max(s);
            }
        }
        if let Some(c) = &self.corner {
            for r in 0..c.rows() {
                let mut s = sym_row(c, r);
                for a in &self.arrow {
                    s += abs_row(a, r);
                }
                best = best.max(s);
            }
        }
        best
    }

    /// Relative residual `‖Ψx − r‖∞ / (‖Ψ‖∞ ‖x‖∞ + ‖r‖∞)`.
    pub fn relative_residual(&self, x: &BlockVector, r: &BlockVector) -> f64 {
        let ax = self.mul_vec(x);
        let num = ax
            .iter()
            .zip(r.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let den = self.norm_inf() * x.norm_inf() + r.norm_inf();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
}

fn add_mul(y: &mut [f64], a: &DenseBlock, x: &[f64]) {
    for (j, &xj) in x.iter().enumerate() {
        for (yi, &aij) in y.iter_mut().zip(a.col(j)) {
            *yi += aij * xj;
        }
    }
}

fn add_mul_t(y: &mut [f64], a: &DenseBlock, x: &[f64]) {
    for (j, yj) in y.iter_mut().enumerate() {
        *yj += a.col(j).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn is_symmetric(d: &DenseBlock) -> bool {
    let scale = d.norm_inf();
    let mut worst = 0.0_f64;
    for i in 0..d.rows() {
        let row: f64 = (0..d.cols()).map(|j| (d[(i, j)] - d[(j, i)]).abs()).sum();
        worst = worst.max(row);
    }
    worst <= 1e-12 * scale
}

/// Right-hand side or solution partitioned like a [`BlockTridiagArrowMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    pub stages: Vec<Vec<f64>>,
    /// Global part; empty when there are no global variables.
    pub global: Vec<f64>,
}

impl BlockVector {
    pub fn new(stages: Vec<Vec<f64>>, global: Vec<f64>) -> Self {
        Self { stages, global }
    }

    pub fn zeros(stage_sizes: &[usize], global_size: usize) -> Self {
        Self {
            stages: stage_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            global: vec![0.0; global_size],
        }
    }

    pub fn zeros_like(m: &BlockTridiagArrowMatrix) -> Self {
        Self::zeros(&m.stage_sizes(), m.global_size())
    }

    /// Splits a flat vector according to `stage_sizes` and `global_size`.
    pub fn from_flat(stage_sizes: &[usize], global_size: usize, flat: &[f64]) -> Result<Self> {
        let total = stage_sizes.iter().sum::<usize>() + global_size;
        if flat.len() != total {
            return Err(Error::DimensionMismatch {
                op: "BlockVector::from_flat",
                expected: (total, 1),
                found: (flat.len(), 1),
            });
        }
        let mut off = 0;
        let stages = stage_sizes
            .iter()
            .map(|&n| {
                let v = flat[off..off + n].to_vec();
                off += n;
                v
            })
            .collect();
        Ok(Self {
            stages,
            global: flat[off..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    /// All entries, stages first, global last.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.stages
            .iter()
            .flat_map(|s| s.iter().copied())
            .chain(self.global.iter().copied())
    }

    pub fn norm_inf(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn len(&self) -> usize {
        self.stages.iter().map(Vec::len).sum::<usize>() + self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the block lengths against a matrix.
    pub fn conforms_to(&self, m: &BlockTridiagArrowMatrix) -> Result<()> {
        let sizes = m.stage_sizes();
        let ok = self.stages.len() == sizes.len()
            && self.stages.iter().zip(&sizes).all(|(s, &n)| s.len() == n)
            && self.global.len() == m.global_size();
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                op: "BlockVector::conforms_to",
                expected: (m.dim(), 1),
                found: (self.len(), 1),
            })
        }
    }
}

/// Split of `M` stages into `p` segments and `p − 1` separators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    seg_lengths: Vec<usize>,
}

impl PartitionPlan {
    /// Builds a plan from the interior segment lengths `N_1..N_p`.
    pub fn new(seg_lengths: Vec<usize>) -> Result<Self> {
        if seg_lengths.is_empty() {
            return Err(Error::InvalidPlan("plan needs at least one segment".into()));
        }
        if let Some(k) = seg_lengths.iter().position(|&n| n == 0) {
            return Err(Error::InvalidPlan(format!("segment {k} is empty")));
        }
        Ok(Self { seg_lengths })
    }

    /// Single-segment plan (no separators).
    pub fn sequential(stages: usize) -> Result<Self> {
        Self::new(vec![stages])
    }

    /// First segment of length `first`, then `threads − 1` segments of length `other`.
    pub fn with_first(first: usize, other: usize, threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::InvalidPlan("thread count must be positive".into()));
        }
        let mut v = vec![other; threads];
        v[0] = first;
        Self::new(v)
    }

    pub fn threads(&self) -> usize {
        self.seg_lengths.len()
    }

    pub fn seg_lengths(&self) -> &[usize] {
        &self.seg_lengths
    }

    /// Number of stages this plan covers: `Σ N_k + p − 1`.
    pub fn stages(&self) -> usize {
        self.seg_lengths.iter().sum::<usize>() + self.seg_lengths.len() - 1
    }

    /// Fails unless the plan covers exactly `stages` stages.
    pub fn check(&self, stages: usize) -> Result<()> {
        if self.stages() != stages {
            return Err(Error::InvalidPlan(format!(
                "segments {:?} plus {} separators cover {} stages, matrix has {stages}",
                self.seg_lengths,
                self.threads() - 1,
                self.stages()
            )));
        }
        Ok(())
    }

    /// Original stage indices of each segment's interior.
    pub fn segment_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.threads());
        let mut start = 0;
        for &n in &self.seg_lengths {
            out.push(start..start + n);
            start += n + 1;
        }
        out
    }

    /// Original stage indices of the separators; entry `k − 1` precedes segment `k`.
    pub fn separator_stages(&self) -> Vec<usize> {
        self.segment_ranges()
            .iter()
            .skip(1)
            .map(|r| r.start - 1)
            .collect()
    }

    /// The permuted stage ordering induced by this plan.
    pub fn permutation(&self) -> StagePermutation {
        let mut order: Vec<usize> = self.segment_ranges().into_iter().flatten().collect();
        order.extend(self.separator_stages());
        StagePermutation::from_order(order)
    }
}

/// A reordering of stages: `order()[new] = old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePermutation {
    order: Vec<usize>,
    position: Vec<usize>,
}

impl StagePermutation {
    fn from_order(order: Vec<usize>) -> Self {
        let mut position = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        Self { order, position }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_order((0..n).collect())
    }

    /// Old stage index sitting at each new position.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// New position of each old stage index.
    pub fn position(&self) -> &[usize] {
        &self.position
    }

    pub fn inverse(&self) -> Self {
        Self::from_order(self.position.clone())
    }

    pub fn compose(&self, other: &StagePermutation) -> Self {
        // Apply `other` first, then `self`.
        Self::from_order(self.order.iter().map(|&i| other.order[i]).collect())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Stage permutation of `plan` for a matrix with `stages` stages.
pub fn permutation_of(plan: &PartitionPlan, stages: usize) -> Result<StagePermutation> {
    plan.check(stages)?;
    Ok(plan.permutation())
}

/// Reorders the stage blocks of `r` into the permuted ordering.
pub fn permute_rhs(r: &BlockVector, plan: &PartitionPlan) -> Result<BlockVector> {
    let perm = permutation_of(plan, r.stages.len())?;
    Ok(BlockVector {
        stages: perm.order().iter().map(|&old| r.stages[old].clone()).collect(),
        global: r.global.clone(),
    })
}

/// Inverse of [`permute_rhs`].
pub fn unpermute_solution(x: &BlockVector, plan: &PartitionPlan) -> Result<BlockVector> {
    let perm = permutation_of(plan, x.stages.len())?;
    Ok(BlockVector {
        stages: perm
            .position()
            .iter()
            .map(|&new| x.stages[new].clone())
            .collect(),
        global: x.global.clone(),
    })
}

/// Blocks owned by one segment of the permuted matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBlocks {
    /// Interior diagonal blocks `D_{ik}`.
    pub diag: Vec<DenseBlock>,
    /// Intra-segment couplings `E_{ik}` (block in row `i + 1`, column `i`).
    pub sub: Vec<DenseBlock>,
    /// Arrow blocks `G_{ik}`; empty without global variables.
    pub arrow: Vec<DenseBlock>,
    /// `B_k`: the preceding separator's row block at the first interior stage.
    pub head: Option<DenseBlock>,
    /// `F_k`: the following separator's row block at the last interior stage.
    pub tail: Option<DenseBlock>,
}

/// Blocks of one separator stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorBlocks {
    /// `A_k`.
    pub diag: DenseBlock,
    /// `Q_k`; `None` without global variables.
    pub arrow: Option<DenseBlock>,
}

/// A [`BlockTridiagArrowMatrix`] relabelled by a [`PartitionPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKKT {
    pub plan: PartitionPlan,
    pub block_size: usize,
    pub global_size: usize,
    pub segments: Vec<SegmentBlocks>,
    /// `separators[k − 1]` precedes segment `k`.
    pub separators: Vec<SeparatorBlocks>,
    /// `R`.
    pub corner: Option<DenseBlock>,
}

/// Relabels `m` into the segment/separator layout of `plan`. No arithmetic
/// is performed; blocks are copied (`B_k` is stored transposed into the
/// separator's row).
pub fn make_layout(m: &BlockTridiagArrowMatrix, plan: &PartitionPlan) -> Result<SegmentedKKT> {
    m.validate()?;
    plan.check(m.num_stages())?;
    let block_size = match m.uniform_block_size() {
        Some(b) => b,
        None if plan.threads() == 1 => m.diag[0].rows(),
        None => return Err(Error::NonUniformStages),
    };
    let has_global = m.has_global();
    let ranges = plan.segment_ranges();
    let p = plan.threads();
    let segments = ranges
        .iter()
        .enumerate()
        .map(|(k, r)| SegmentBlocks {
            diag: m.diag[r.clone()].to_vec(),
            sub: m.sub[r.start..r.end - 1].to_vec(),
            arrow: if has_global {
                m.arrow[r.clone()].to_vec()
            } else {
                Vec::new()
            },
            head: (k > 0).then(|| m.sub[r.start - 1].transpose()),
            tail: (k + 1 < p).then(|| m.sub[r.end - 1].clone()),
        })
        .collect();
    let separators = plan
        .separator_stages()
        .into_iter()
        .map(|s| SeparatorBlocks {
            diag: m.diag[s].clone(),
            arrow: has_global.then(|| m.arrow[s].clone()),
        })
        .collect();
    Ok(SegmentedKKT {
        plan: plan.clone(),
        block_size,
        global_size: m.global_size(),
        segments,
        separators,
        corner: m.corner.clone(),
    })
}

impl SegmentedKKT {
    /// Undoes [`make_layout`].
    pub fn to_matrix(&self) -> BlockTridiagArrowMatrix {
        let m = self.plan.stages();
        let ranges = self.plan.segment_ranges();
        let seps = self.plan.separator_stages();
        let b = self.block_size;
        let mut diag = vec![DenseBlock::zeros(0, 0); m];
        let mut sub = vec![DenseBlock::zeros(0, 0); m.saturating_sub(1)];
        let has_global = self.global_size > 0;
        let mut arrow = if has_global {
            vec![DenseBlock::zeros(self.global_size, b); m]
        } else {
            Vec::new()
        };
        for (seg, r) in self.segments.iter().zip(&ranges) {
            for (i, d) in seg.diag.iter().enumerate() {
                diag[r.start + i] = d.clone();
            }
            for (i, e) in seg.sub.iter().enumerate() {
                sub[r.start + i] = e.clone();
            }
            for (i, g) in seg.arrow.iter().enumerate() {
                arrow[r.start + i] = g.clone();
            }
            if let Some(h) = &seg.head {
                sub[r.start - 1] = h.transpose();
            }
            if let Some(t) = &seg.tail {
                sub[r.end - 1] = t.clone();
            }
        }
        for (sep, &s) in self.separators.iter().zip(&seps) {
            diag[s] = sep.diag.clone();
            if let Some(q) = &sep.arrow {
                arrow[s] = q.clone();
            }
        }
        BlockTridiagArrowMatrix {
            diag,
            sub,
            arrow,
            corner: self.corner.clone(),
        }
    }

    /// Dense assembly of the permuted matrix `P Ψ Pᵀ` straight from the
    /// segment labels (both triangles filled).
    pub fn to_permuted_dense(&self) -> DenseBlock {
        let b = self.block_size;
        let m = self.plan.stages();
        let n = m * b + self.global_size;
        let p = self.plan.threads();
        let mut out = DenseBlock::zeros(n, n);
        let interior = m - (p - 1);
        let sep_off = |k: usize| (interior + k - 1) * b;
        let g_off = m * b;
        let mut put = |r0: usize, c0: usize, blk: &DenseBlock, symmetric: bool| {
            for j in 0..blk.cols() {
                for i in 0..blk.rows() {
                    if symmetric && i < j {
                        continue;
                    }
                    out[(r0 + i, c0 + j)] = blk[(i, j)];
                    out[(c0 + j, r0 + i)] = blk[(i, j)];
                }
            }
        };
        let mut off = 0;
        for (k, seg) in self.segments.iter().enumerate() {
            let stage = |i: usize| off + i * b;
            for (i, d) in seg.diag.iter().enumerate() {
                put(stage(i), stage(i), d, true);
            }
            for (i, e) in seg.sub.iter().enumerate() {
                put(stage(i + 1), stage(i), e, false);
            }
            for (i, g) in seg.arrow.iter().enumerate() {
                put(g_off, stage(i), g, false);
            }
            if let Some(h) = &seg.head {
                put(sep_off(k), stage(0), h, false);
            }
            if let Some(t) = &seg.tail {
                put(sep_off(k + 1), stage(seg.diag.len() - 1), t, false);
            }
            off += seg.diag.len() * b;
        }
        for (idx, sep) in self.separators.iter().enumerate() {
            let k = idx + 1;
            put(sep_off(k), sep_off(k), &sep.diag, true);
            if let Some(q) = &sep.arrow {
                put(g_off, sep_off(k), q, false);
            }
        }
        if let Some(c) = &self.corner {
            put(g_off, g_off, c, true);
        }
        out
    }
}

/// Lower-triangular permuted factor `L̂` of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFactor {
    /// `D̂_{ik}` (lower triangular).
    pub diag: Vec<DenseBlock>,
    /// `Ê_{ik}`, one fewer than `diag`.
    pub sub: Vec<DenseBlock>,
    /// `Ĝ_{ik}`; empty without global variables.
    pub arrow: Vec<DenseBlock>,
    /// `B̂ᵀ_{ik}`, the preceding separator's row at every interior stage
    /// (fill-in beyond the first). Empty for the first segment.
    pub head: Vec<DenseBlock>,
    /// `F̂_k`, the following separator's row at the last stage. `None` for the last segment.
    pub tail: Option<DenseBlock>,
    /// `Ĥ_k`, fill-in between the following and preceding separators.
    /// Present only for segments that have both.
    pub bridge: Option<DenseBlock>,
    /// Worker-local contribution `R̂_k` to the corner; merged in the sequential phase.
    pub corner_partial: Option<DenseBlock>,
}

/// Factor blocks of one separator.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorFactor {
    /// `Â_k` (lower triangular).
    pub diag: DenseBlock,
    /// `Q̂_k`; `None` without global variables.
    pub arrow: Option<DenseBlock>,
}

/// Cholesky factor of the permuted matrix, stored blockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrowFactor {
    pub plan: PartitionPlan,
    pub block_size: usize,
    pub global_size: usize,
    pub segments: Vec<SegmentFactor>,
    /// `separators[k − 1]` precedes segment `k`.
    pub separators: Vec<SeparatorFactor>,
    /// `R̂` (lower triangular).
    pub corner: Option<DenseBlock>,
}

impl ArrowFactor {
    /// Zero-initialised storage shaped for `seg`.
    pub fn allocate(seg: &SegmentedKKT) -> Self {
        let b = seg.block_size;
        let ng = seg.global_size;
        let p = seg.plan.threads();
        let sq = || DenseBlock::zeros(b, b);
        let segments = seg
            .plan
            .seg_lengths()
            .iter()
            .enumerate()
            .map(|(k, &n)| SegmentFactor {
                diag: vec![sq(); n],
                sub: vec![sq(); n - 1],
                arrow: if ng > 0 {
                    vec![DenseBlock::zeros(ng, b); n]
                } else {
                    Vec::new()
                },
                head: if k > 0 { vec![sq(); n] } else { Vec::new() },
                tail: (k + 1 < p).then(sq),
                bridge: (k > 0 && k + 1 < p).then(sq),
                corner_partial: (ng > 0).then(|| DenseBlock::zeros(ng, ng)),
            })
            .collect();
        let separators = (1..p)
            .map(|_| SeparatorFactor {
                diag: sq(),
                arrow: (ng > 0).then(|| DenseBlock::zeros(ng, b)),
            })
            .collect();
        Self {
            plan: seg.plan.clone(),
            block_size: b,
            global_size: ng,
            segments,
            separators,
            corner: (ng > 0).then(|| DenseBlock::zeros(ng, ng)),
        }
    }

    /// Dense assembly of `L̂` in the permuted ordering (strictly lower-block
    /// fill-in included, nothing outside the factor's sparsity pattern).
    pub fn to_dense_lower(&self) -> DenseBlock {
        let b = self.block_size;
        let m = self.plan.stages();
        let p = self.plan.threads();
        let n = m * b + self.global_size;
        let interior = m - (p - 1);
        let sep_off = |k: usize| (interior + k - 1) * b;
        let g_off = m * b;
        let mut out = DenseBlock::zeros(n, n);
        let mut put = |r0: usize, c0: usize, blk: &DenseBlock| {
            for j in 0..blk.cols() {
                for i in 0..blk.rows() {
                    out[(r0 + i, c0 + j)] = blk[(i, j)];
                }
            }
        };
        let mut off = 0;
        for (k, seg) in self.segments.iter().enumerate() {
            let stage = |i: usize| off + i * b;
            for (i, d) in seg.diag.iter().enumerate() {
                put(stage(i), stage(i), d);
            }
            for (i, e) in seg.sub.iter().enumerate() {
                put(stage(i + 1), stage(i), e);
            }
            for (i, g) in seg.arrow.iter().enumerate() {
                put(g_off, stage(i), g);
            }
            for (i, h) in seg.head.iter().enumerate() {
                put(sep_off(k), stage(i), h);
            }
            if let Some(t) = &seg.tail {
                put(sep_off(k + 1), stage(seg.diag.len() - 1), t);
            }
            if let Some(h) = &seg.bridge {
                put(sep_off(k + 1), sep_off(k), h);
            }
            off += seg.diag.len() * b;
        }
        for (idx, sep) in self.separators.iter().enumerate() {
            let k = idx + 1;
            put(sep_off(k), sep_off(k), &sep.diag);
            if let Some(q) = &sep.arrow {
                put(g_off, sep_off(k), q);
            }
        }
        if let Some(c) = &self.corner {
            put(g_off, g_off, c);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged_matrix(m: usize, b: usize, ng: usize) -> BlockTridiagArrowMatrix {
        // Distinct entries so relabelling mistakes show up.
        let mut tag = 0.0;
        let mut next = |r: usize, c: usize| {
            DenseBlock::from_fn(r, c, |_, _| {
                tag += 1.0;
                tag
            })
        };
        let mut diag = Vec::new();
        for _ in 0..m {
            let mut d = next(b, b);
            d.symmetrize_from_lower();
            diag.push(d);
        }
        let sub = (0..m - 1).map(|_| next(b, b)).collect();
        let (arrow, corner) = if ng > 0 {
            let a = (0..m).map(|_| next(ng, b)).collect();
            let mut c = next(ng, ng);
            c.symmetrize_from_lower();
            (a, Some(c))
        } else {
            (Vec::new(), None)
        };
        BlockTridiagArrowMatrix {
            diag,
            sub,
            arrow,
            corner,
        }
    }

    #[test]
    fn validate_accepts_identity() {
        assert!(BlockTridiagArrowMatrix::identity(4, 3, 2).validate().is_ok());
    }

    #[test]
    fn validate_names_bad_sub_index() {
        let mut m = BlockTridiagArrowMatrix::identity(4, 2, 0);
        m.sub[2] = DenseBlock::zeros(3, 2);
        match m.validate() {
            Err(Error::Invalid(list)) => assert!(list.iter().any(|e| e.contains("sub[2]"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_flags_nan_and_asymmetry() {
        let mut m = BlockTridiagArrowMatrix::identity(3, 2, 1);
        m.diag[1][(0, 1)] = f64::NAN;
        m.diag[2][(1, 0)] = 0.5;
        match m.validate() {
            Err(Error::Invalid(list)) => {
                assert!(list.iter().any(|e| e.contains("diag[1] has non-finite")));
                assert!(list.iter().any(|e| e.contains("diag[2] is not symmetric")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_arrow_without_corner() {
        let mut m = BlockTridiagArrowMatrix::identity(2, 1, 0);
        m.arrow = vec![DenseBlock::zeros(1, 1); 2];
        assert!(m.validate().is_err());
    }

    #[test]
    fn plan_invariants() {
        let plan = PartitionPlan::new(vec![2, 2]).unwrap();
        assert_eq!(plan.stages(), 5);
        assert!(plan.check(5).is_ok());
        assert!(plan.check(4).is_err());
        assert!(plan.check(6).is_err());
        assert!(PartitionPlan::new(vec![3, 0]).is_err());
        assert!(PartitionPlan::new(vec![]).is_err());
        assert_eq!(plan.separator_stages(), vec![2]);
        assert_eq!(plan.segment_ranges(), vec![0..2, 3..5]);
    }

    #[test]
    fn permutation_examples() {
        assert_eq!(
            permutation_of(&PartitionPlan::sequential(4).unwrap(), 4).unwrap(),
            StagePermutation::identity(4)
        );
        let plan = PartitionPlan::new(vec![2, 2]).unwrap();
        let perm = permutation_of(&plan, 5).unwrap();
        assert_eq!(perm.order(), &[0, 1, 3, 4, 2]);
        assert_eq!(perm.compose(&perm.inverse()), StagePermutation::identity(5));
        assert_eq!(perm.inverse().compose(&perm), StagePermutation::identity(5));
    }

    #[test]
    fn permute_moves_separator_to_end() {
        let plan = PartitionPlan::new(vec![2, 2]).unwrap();
        let r = BlockVector::new((0..5).map(|i| vec![i as f64, -(i as f64)]).collect(), vec![]);
        let rp = permute_rhs(&r, &plan).unwrap();
        assert_eq!(rp.stages[4], r.stages[2]);
        assert_eq!(unpermute_solution(&rp, &plan).unwrap(), r);
        let seq = PartitionPlan::sequential(5).unwrap();
        assert_eq!(permute_rhs(&r, &seq).unwrap(), r);
    }

    #[test]
    fn layout_single_segment() {
        let m = tagged_matrix(4, 2, 0);
        let seg = make_layout(&m, &PartitionPlan::sequential(4).unwrap()).unwrap();
        assert_eq!(seg.segments.len(), 1);
        assert_eq!(seg.segments[0].diag, m.diag);
        assert!(seg.segments[0].head.is_none() && seg.segments[0].tail.is_none());
        assert!(seg.separators.is_empty());
    }

    #[test]
    fn layout_five_stages_two_segments() {
        let m = tagged_matrix(5, 2, 1);
        let plan = PartitionPlan::new(vec![2, 2]).unwrap();
        let seg = make_layout(&m, &plan).unwrap();
        // Separator is stage 2 (0-based).
        assert_eq!(seg.separators[0].diag, m.diag[2]);
        assert_eq!(seg.separators[0].arrow.as_ref(), Some(&m.arrow[2]));
        assert_eq!(seg.segments[1].head.as_ref(), Some(&m.sub[2].transpose()));
        assert_eq!(seg.segments[0].tail.as_ref(), Some(&m.sub[1]));
        assert_eq!(seg.segments[1].diag, vec![m.diag[3].clone(), m.diag[4].clone()]);
        assert_eq!(seg.segments[1].sub, vec![m.sub[3].clone()]);
        assert_eq!(seg.to_matrix(), m);
    }

    #[test]
    fn layout_rejects_non_uniform_parallel() {
        let mut m = BlockTridiagArrowMatrix::identity(5, 2, 0);
        m.diag[4] = DenseBlock::identity(3);
        m.sub[3] = DenseBlock::zeros(3, 2);
        assert!(m.validate().is_ok());
        let plan = PartitionPlan::new(vec![2, 2]).unwrap();
        assert!(matches!(make_layout(&m, &plan), Err(Error::NonUniformStages)));
        assert!(make_layout(&m, &PartitionPlan::sequential(5).unwrap()).is_ok());
    }

    #[test]
    fn permuted_dense_matches_permutation_matrix() {
        let m = tagged_matrix(8, 2, 2);
        let plan = PartitionPlan::new(vec![3, 1, 2]).unwrap();
        let seg = make_layout(&m, &plan).unwrap();
        let dense = m.to_dense();
        let perm = plan.permutation();
        let offsets = m.offsets();
        // Row map new index -> old index.
        let mut map = Vec::new();
        for &old in perm.order() {
            map.extend(offsets[old]..offsets[old] + 2);
        }
        map.extend(offsets[8]..offsets[8] + 2);
        let expected = DenseBlock::from_fn(dense.rows(), dense.cols(), |i, j| dense[(map[i], map[j])]);
        assert_eq!(seg.to_permuted_dense(), expected);
    }

    #[test]
    fn to_dense_trivia() {
        let one = BlockTridiagArrowMatrix {
            diag: vec![DenseBlock::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]])],
            sub: vec![],
            arrow: vec![],
            corner: None,
        };
        assert_eq!(one.to_dense(), one.diag[0]);
        let m = tagged_matrix(3, 1, 0);
        let d = m.to_dense();
        assert_eq!(d[(0, 2)], 0.0);
        assert_eq!(d[(1, 0)], m.sub[0][(0, 0)]);
        assert_eq!(d[(0, 1)], m.sub[0][(0, 0)]);
    }
}
