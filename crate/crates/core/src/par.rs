//! Permutation-based parallel Cholesky factorization and triangular solves.
//!
//! The stages are split into `p` segments separated by single separator
//! stages. After permuting the separators (and the global block) to the end,
//! each segment can be eliminated independently: the segment's own
//! tridiagonal chain is factored, and its couplings to the two neighbouring
//! separators and to the global block are propagated through the chain,
//! producing fill-in along the preceding separator's row and one block
//! between the two separators. A short sequential phase then factors the
//! remaining separator chain and the global corner.
//!
//! Each worker writes only its own segment and the separator that precedes
//! it. All cross-segment reductions happen in the sequential phase in
//! ascending segment order, so results are bitwise reproducible regardless
//! of scheduling.

use std::thread;
use std::time::{Duration, Instant};

use num_rational::Rational64;

use crate::btam::{
    make_layout, permute_rhs, unpermute_solution, ArrowFactor, BlockTridiagArrowMatrix,
    BlockVector, PartitionPlan, SegmentBlocks, SegmentFactor, SegmentedKKT, SeparatorBlocks,
    SeparatorFactor,
};
use crate::error::{Error, Location, Result};
use crate::kernels::{
    chol_lower_in_place, mat_t_vec_sub_in_place, mat_vec_sub_in_place,
    mul_sub_transposed_in_place, solve_right_transposed_in_place, sym_downdate_in_place,
    tri_solve_backward_in_place, tri_solve_forward_in_place, DenseBlock, FlopCounter,
};
use crate::seq::{factorize_sequential, solve_sequential, SequentialFactor};

/// Flop tallies split by phase: one counter per segment task plus one for
/// the sequential phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseFlops {
    pub segments: Vec<FlopCounter>,
    pub sequential: FlopCounter,
}

impl PhaseFlops {
    fn with_segments(p: usize) -> Self {
        Self {
            segments: vec![FlopCounter::new(); p],
            sequential: FlopCounter::new(),
        }
    }

    /// Flops on the critical path: the busiest segment plus the sequential phase.
    pub fn critical_path(&self) -> Rational64 {
        let busiest = self
            .segments
            .iter()
            .map(FlopCounter::total)
            .max()
            .unwrap_or_default();
        busiest + self.sequential.total()
    }

    /// All flops performed by all workers.
    pub fn total(&self) -> Rational64 {
        self.segments
            .iter()
            .map(FlopCounter::total)
            .sum::<Rational64>()
            + self.sequential.total()
    }

    pub fn merge(&mut self, other: &PhaseFlops) {
        if self.segments.len() < other.segments.len() {
            self.segments.resize(other.segments.len(), FlopCounter::new());
        }
        for (a, b) in self.segments.iter_mut().zip(&other.segments) {
            a.merge(b);
        }
        self.sequential.merge(&other.sequential);
    }
}

/// Runs `f(k, item)` for every item, one OS thread per item beyond the
/// first (which runs on the caller's thread), and returns results in order.
fn fork_join<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    if items.len() <= 1 {
        return items.into_iter().enumerate().map(|(k, t)| f(k, t)).collect();
    }
    let f = &f;
    thread::scope(|s| {
        let mut iter = items.into_iter().enumerate();
        let (k0, first) = iter.next().expect("non-empty");
        let handles: Vec<_> = iter.map(|(k, t)| s.spawn(move || f(k, t))).collect();
        let mut out = Vec::with_capacity(handles.len() + 1);
        out.push(f(k0, first));
        out.extend(
            handles
                .into_iter()
                .map(|h| h.join().expect("segment worker panicked")),
        );
        out
    })
}

fn check_workers(plan: &PartitionPlan, workers: usize) -> Result<()> {
    if workers != plan.threads() {
        return Err(Error::InvalidPlan(format!(
            "worker count {workers} does not match the plan's {} segments",
            plan.threads()
        )));
    }
    Ok(())
}

/// Factors the permuted matrix described by `seg` with `workers` threads.
pub fn factorize_parallel(seg: &SegmentedKKT, workers: usize) -> Result<ArrowFactor> {
    let mut factor = ArrowFactor::allocate(seg);
    refactorize_parallel(&mut factor, seg, workers)?;
    Ok(factor)
}

/// Recomputes `factor` in place for new values with the same structure.
/// `seg` is never modified.
pub fn refactorize_parallel(
    factor: &mut ArrowFactor,
    seg: &SegmentedKKT,
    workers: usize,
) -> Result<PhaseFlops> {
    check_workers(&seg.plan, workers)?;
    if factor.plan != seg.plan
        || factor.block_size != seg.block_size
        || factor.global_size != seg.global_size
    {
        return Err(Error::InvalidPlan(
            "factor storage was allocated for a different structure".into(),
        ));
    }
    let p = seg.plan.threads();
    let has_global = seg.global_size > 0;
    let mut flops = PhaseFlops::with_segments(p);

    // Parallel phase: task k owns segment k and the separator preceding it.
    {
        let mut sep_slots: Vec<Option<&mut SeparatorFactor>> = Vec::with_capacity(p);
        sep_slots.push(None);
        sep_slots.extend(factor.separators.iter_mut().map(Some));
        let tasks: Vec<_> = factor
            .segments
            .iter_mut()
            .zip(sep_slots)
            .zip(flops.segments.iter_mut())
            .collect();
        let results = fork_join(tasks, |k, ((out, out_sep), counter)| {
            let input_sep = (k > 0).then(|| &seg.separators[k - 1]);
            factor_segment(
                k,
                p,
                &seg.segments[k],
                input_sep,
                out,
                out_sep,
                has_global,
                counter,
            )
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
    }

    // Sequential phase.
    let counter = &mut flops.sequential;
    let mut corner = seg.corner.clone();
    for k in 1..p {
        let (prev_segs, rest_segs) = factor.segments.split_at_mut(k);
        let prev = &prev_segs[k - 1];
        let this = &mut rest_segs[0];
        let (this_sep, next_sep) = {
            let (a, b) = factor.separators.split_at_mut(k);
            (&mut a[k - 1], b.first_mut())
        };
        let prev_tail = prev.tail.as_ref().expect("tail of non-last segment");

        sym_downdate_in_place(&mut this_sep.diag, prev_tail, counter)?;
        chol_lower_in_place(&mut this_sep.diag, counter).map_err(|e| e.at(Location::Separator(k)))?;
        if let Some(bridge) = this.bridge.as_mut() {
            solve_right_transposed_in_place(bridge, &this_sep.diag, counter)?;
        }
        if let Some(q) = this_sep.arrow.as_mut() {
            let last_arrow = prev.arrow.last().expect("arrow blocks");
            mul_sub_transposed_in_place(q, last_arrow, prev_tail, counter)?;
            solve_right_transposed_in_place(q, &this_sep.diag, counter)?;
        }
        if let (Some(next), Some(bridge)) = (next_sep, this.bridge.as_ref()) {
            sym_downdate_in_place(&mut next.diag, bridge, counter)?;
            if let (Some(nq), Some(q)) = (next.arrow.as_mut(), this_sep.arrow.as_ref()) {
                mul_sub_transposed_in_place(nq, q, bridge, counter)?;
            }
        }
        if let (Some(r), Some(q)) = (corner.as_mut(), this_sep.arrow.as_ref()) {
            sym_downdate_in_place(r, q, counter)?;
        }
    }
    if has_global {
        let r = corner.as_mut().expect("corner with global variables");
        for s in &factor.segments {
            r.add_assign_block(s.corner_partial.as_ref().expect("corner partial"));
        }
        chol_lower_in_place(r, counter).map_err(|e| e.at(Location::Corner))?;
    }
    factor.corner = corner;
    Ok(flops)
}

#[allow(clippy::too_many_arguments)]
fn factor_segment(
    k: usize,
    p: usize,
    input: &SegmentBlocks,
    input_sep: Option<&SeparatorBlocks>,
    out: &mut SegmentFactor,
    mut out_sep: Option<&mut SeparatorFactor>,
    has_global: bool,
    flops: &mut FlopCounter,
) -> Result<()> {
    let n = input.diag.len();
    for (dst, src) in out.diag.iter_mut().zip(&input.diag) {
        dst.copy_from(src);
    }
    for (dst, src) in out.sub.iter_mut().zip(&input.sub) {
        dst.copy_from(src);
    }
    for (dst, src) in out.arrow.iter_mut().zip(&input.arrow) {
        dst.copy_from(src);
    }
    if let Some(r) = out.corner_partial.as_mut() {
        r.fill(0.0);
    }
    if let (Some(dst), Some(src)) = (out_sep.as_deref_mut(), input_sep) {
        dst.diag.copy_from(&src.diag);
        if let (Some(q), Some(q0)) = (dst.arrow.as_mut(), src.arrow.as_ref()) {
            q.copy_from(q0);
        }
        for (i, h) in out.head.iter_mut().enumerate() {
            if i == 0 {
                h.copy_from(input.head.as_ref().expect("head coupling"));
            } else {
                h.fill(0.0);
            }
        }
    }
    if let (Some(t), Some(t0)) = (out.tail.as_mut(), input.tail.as_ref()) {
        t.copy_from(t0);
    }

    let loc = |stage| Location::SegmentStage { segment: k, stage };
    for i in 0..n {
        let (diag_done, diag_rest) = out.diag.split_at_mut(i + 1);
        let d = &mut diag_done[i];
        chol_lower_in_place(d, flops).map_err(|e| e.at(loc(i)))?;
        let d = &*d;
        if i + 1 < n {
            solve_right_transposed_in_place(&mut out.sub[i], d, flops)?;
        }
        if has_global {
            solve_right_transposed_in_place(&mut out.arrow[i], d, flops)?;
            let r = out.corner_partial.as_mut().expect("corner partial");
            sym_downdate_in_place(r, &out.arrow[i], flops)?;
        }
        if i + 1 < n {
            sym_downdate_in_place(&mut diag_rest[0], &out.sub[i], flops)?;
            if has_global {
                let (a_done, a_rest) = out.arrow.split_at_mut(i + 1);
                mul_sub_transposed_in_place(&mut a_rest[0], &a_done[i], &out.sub[i], flops)?;
            }
        }
        if let Some(sep) = out_sep.as_deref_mut() {
            let (h_done, h_rest) = out.head.split_at_mut(i + 1);
            let h = &mut h_done[i];
            solve_right_transposed_in_place(h, d, flops)?;
            sym_downdate_in_place(&mut sep.diag, h, flops)?;
            if i + 1 < n {
                mul_sub_transposed_in_place(&mut h_rest[0], h, &out.sub[i], flops)?;
            }
            if let Some(q) = sep.arrow.as_mut() {
                mul_sub_transposed_in_place(q, &out.arrow[i], h, flops)?;
            }
        }
    }
    if k + 1 < p {
        let t = out.tail.as_mut().expect("tail coupling");
        solve_right_transposed_in_place(t, &out.diag[n - 1], flops)?;
        if let Some(bridge) = out.bridge.as_mut() {
            bridge.fill(0.0);
            mul_sub_transposed_in_place(bridge, t, &out.head[n - 1], flops)?;
        }
    }
    Ok(())
}

/// Permuted vector split into segment interiors, separators and global part.
struct SegmentedVector {
    segments: Vec<Vec<Vec<f64>>>,
    separators: Vec<Vec<f64>>,
    global: Vec<f64>,
}

impl SegmentedVector {
    fn split(v: &BlockVector, f: &ArrowFactor) -> Result<Self> {
        let m = f.plan.stages();
        let b = f.block_size;
        if v.stages.len() != m
            || v.stages.iter().any(|s| s.len() != b)
            || v.global.len() != f.global_size
        {
            return Err(Error::DimensionMismatch {
                op: "permuted vector",
                expected: (m * b + f.global_size, 1),
                found: (v.len(), 1),
            });
        }
        let mut it = v.stages.iter().cloned();
        let segments = f
            .plan
            .seg_lengths()
            .iter()
            .map(|&n| it.by_ref().take(n).collect())
            .collect();
        let separators = it.collect();
        Ok(Self {
            segments,
            separators,
            global: v.global.clone(),
        })
    }

    fn join(self) -> BlockVector {
        let mut stages: Vec<Vec<f64>> = self.segments.into_iter().flatten().collect();
        stages.extend(self.separators);
        BlockVector {
            stages,
            global: self.global,
        }
    }
}

/// Solves `L̂ Δŷ = r̂` for an already permuted right-hand side.
pub fn forward_parallel(f: &ArrowFactor, r_hat: &BlockVector) -> Result<BlockVector> {
    let mut flops = PhaseFlops::with_segments(f.plan.threads());
    forward_parallel_counted(f, r_hat, &mut flops)
}

fn forward_parallel_counted(
    f: &ArrowFactor,
    r_hat: &BlockVector,
    flops: &mut PhaseFlops,
) -> Result<BlockVector> {
    let SegmentedVector {
        segments,
        separators,
        global,
    } = SegmentedVector::split(r_hat, f)?;
    let p = f.plan.threads();
    let ng = f.global_size;
    let mut seps: Vec<Option<Vec<f64>>> = Vec::with_capacity(p);
    seps.push(None);
    seps.extend(separators.into_iter().map(Some));

    let tasks: Vec<_> = segments
        .into_iter()
        .zip(seps)
        .zip(flops.segments.iter_mut())
        .collect();
    let results = fork_join(tasks, |k, ((mut y, mut sep_acc), counter)| {
        let fac = &f.segments[k];
        let mut g_acc = vec![0.0; ng];
        let n = y.len();
        for i in 0..n {
            let (done, rest) = y.split_at_mut(i + 1);
            let yi = &mut done[i];
            tri_solve_forward_in_place(&fac.diag[i], yi, counter)
                .map_err(|e| e.at(Location::SegmentStage { segment: k, stage: i }))?;
            if i + 1 < n {
                mat_vec_sub_in_place(&mut rest[0], &fac.sub[i], yi, counter)?;
            }
            if let Some(acc) = sep_acc.as_mut() {
                mat_vec_sub_in_place(acc, &fac.head[i], yi, counter)?;
            }
            if ng > 0 {
                mat_vec_sub_in_place(&mut g_acc, &fac.arrow[i], yi, counter)?;
            }
        }
        Ok::<_, Error>((y, sep_acc, g_acc))
    });

    let mut segments = Vec::with_capacity(p);
    let mut separators = Vec::with_capacity(p.saturating_sub(1));
    let mut g_parts = Vec::with_capacity(p);
    for res in results {
        let (y, sep, g) = res?;
        segments.push(y);
        if let Some(s) = sep {
            separators.push(s);
        }
        g_parts.push(g);
    }

    let counter = &mut flops.sequential;
    let mut yg = global;
    for part in &g_parts {
        for (a, b) in yg.iter_mut().zip(part) {
            *a += b;
        }
    }
    for k in 1..p {
        let prev = &f.segments[k - 1];
        let prev_last = segments[k - 1].last().expect("non-empty segment");
        let (done, rest) = separators.split_at_mut(k);
        let this = &mut done[k - 1];
        mat_vec_sub_in_place(this, prev.tail.as_ref().expect("tail"), prev_last, counter)?;
        let sep_f = &f.separators[k - 1];
        tri_solve_forward_in_place(&sep_f.diag, this, counter)
            .map_err(|e| e.at(Location::Separator(k)))?;
        if let (Some(bridge), Some(next)) = (f.segments[k].bridge.as_ref(), rest.first_mut()) {
            mat_vec_sub_in_place(next, bridge, this, counter)?;
        }
        if let Some(q) = sep_f.arrow.as_ref() {
            mat_vec_sub_in_place(&mut yg, q, this, counter)?;
        }
    }
    if let Some(r) = f.corner.as_ref() {
        tri_solve_forward_in_place(r, &mut yg, counter).map_err(|e| e.at(Location::Corner))?;
    }
    Ok(SegmentedVector {
        segments,
        separators,
        global: yg,
    }
    .join())
}

/// Solves `L̂ᵀ Δx̂ = Δŷ`.
pub fn backward_parallel(f: &ArrowFactor, y_hat: &BlockVector) -> Result<BlockVector> {
    let mut flops = PhaseFlops::with_segments(f.plan.threads());
    backward_parallel_counted(f, y_hat, &mut flops)
}

fn backward_parallel_counted(
    f: &ArrowFactor,
    y_hat: &BlockVector,
    flops: &mut PhaseFlops,
) -> Result<BlockVector> {
    let SegmentedVector {
        segments,
        mut separators,
        global,
    } = SegmentedVector::split(y_hat, f)?;
    let p = f.plan.threads();

    // Sequential phase first.
    let counter = &mut flops.sequential;
    let mut xg = global;
    if let Some(r) = f.corner.as_ref() {
        tri_solve_backward_in_place(r, &mut xg, counter).map_err(|e| e.at(Location::Corner))?;
    }
    for k in (1..p).rev() {
        let sep_f = &f.separators[k - 1];
        let (done, rest) = separators.split_at_mut(k);
        let this = &mut done[k - 1];
        if let Some(q) = sep_f.arrow.as_ref() {
            mat_t_vec_sub_in_place(this, q, &xg, counter)?;
        }
        if let (Some(bridge), Some(next)) = (f.segments[k].bridge.as_ref(), rest.first()) {
            mat_t_vec_sub_in_place(this, bridge, next, counter)?;
        }
        tri_solve_backward_in_place(&sep_f.diag, this, counter)
            .map_err(|e| e.at(Location::Separator(k)))?;
    }

    let separators_ref = &separators;
    let xg_ref = &xg;
    let tasks: Vec<_> = segments.into_iter().zip(flops.segments.iter_mut()).collect();
    let results = fork_join(tasks, |k, (mut x, counter)| {
        let fac = &f.segments[k];
        let n = x.len();
        if k + 1 < p {
            let tail = fac.tail.as_ref().expect("tail");
            mat_t_vec_sub_in_place(&mut x[n - 1], tail, &separators_ref[k], counter)?;
        }
        let preceding = (k > 0).then(|| &separators_ref[k - 1]);
        for i in (0..n).rev() {
            let (before, from_i) = x.split_at_mut(i);
            let xi = &mut from_i[0];
            if !fac.arrow.is_empty() {
                mat_t_vec_sub_in_place(xi, &fac.arrow[i], xg_ref, counter)?;
            }
            if let Some(xs) = preceding {
                mat_t_vec_sub_in_place(xi, &fac.head[i], xs, counter)?;
            }
            tri_solve_backward_in_place(&fac.diag[i], xi, counter)
                .map_err(|e| e.at(Location::SegmentStage { segment: k, stage: i }))?;
            if i > 0 {
                mat_t_vec_sub_in_place(&mut before[i - 1], &fac.sub[i - 1], xi, counter)?;
            }
        }
        Ok::<_, Error>(x)
    });
    let segments = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SegmentedVector {
        segments,
        separators,
        global: xg,
    }
    .join())
}

/// Forward then backward substitution with per-phase flop tallies.
pub fn substitute_parallel(
    f: &ArrowFactor,
    r_hat: &BlockVector,
) -> Result<(BlockVector, PhaseFlops)> {
    let mut flops = PhaseFlops::with_segments(f.plan.threads());
    let y = forward_parallel_counted(f, r_hat, &mut flops)?;
    let x = backward_parallel_counted(f, &y, &mut flops)?;
    Ok((x, flops))
}

/// Wall-clock split of one solve: factorization, forward/backward
/// substitution, and everything else (layout, permutation).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveTimings {
    pub factor: Duration,
    pub solve: Duration,
    pub other: Duration,
}

impl SolveTimings {
    pub fn total(&self) -> Duration {
        self.factor + self.solve + self.other
    }
}

/// Diagnostics of a [`solve_with_report`] call.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub plan: PartitionPlan,
    /// True when the plan had a single segment and the sequential solver ran.
    pub sequential: bool,
    pub timings: SolveTimings,
    pub factor_flops: PhaseFlops,
    pub solve_flops: PhaseFlops,
}

fn check_feasible(m: &BlockTridiagArrowMatrix, plan: &PartitionPlan) -> Result<()> {
    plan.check(m.num_stages())?;
    let p = plan.threads();
    if p > 1 && m.num_stages() < 2 * p {
        return Err(Error::InfeasiblePlan {
            stages: m.num_stages(),
            threads: p,
        });
    }
    Ok(())
}

/// Solves `Ψ Δx = r` via the permuted parallel factorization.
pub fn solve(
    m: &BlockTridiagArrowMatrix,
    r: &BlockVector,
    plan: &PartitionPlan,
) -> Result<BlockVector> {
    solve_with_report(m, r, plan).map(|(x, _)| x)
}

/// [`solve`] plus timings and flop tallies.
pub fn solve_with_report(
    m: &BlockTridiagArrowMatrix,
    r: &BlockVector,
    plan: &PartitionPlan,
) -> Result<(BlockVector, SolveReport)> {
    let mut solver = KktSolver::new(plan.clone());
    solver.factorize(m)?;
    let x = solver.solve(r)?;
    let report = solver.report().expect("factorized");
    Ok((x, report))
}

enum Factorization {
    Sequential(SequentialFactor),
    Parallel(ArrowFactor),
}

/// Reusable solver bound to one partition plan. Repeated factorizations of
/// matrices with the same structure reuse the factor storage.
pub struct KktSolver {
    plan: PartitionPlan,
    factor: Option<Factorization>,
    timings: SolveTimings,
    factor_flops: PhaseFlops,
    solve_flops: PhaseFlops,
}

impl KktSolver {
    pub fn new(plan: PartitionPlan) -> Self {
        Self {
            plan,
            factor: None,
            timings: SolveTimings::default(),
            factor_flops: PhaseFlops::default(),
            solve_flops: PhaseFlops::default(),
        }
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn is_sequential(&self) -> bool {
        self.plan.threads() == 1
    }

    /// Factors `m`, replacing any previous factorization.
    pub fn factorize(&mut self, m: &BlockTridiagArrowMatrix) -> Result<&PhaseFlops> {
        check_feasible(m, &self.plan)?;
        self.timings = SolveTimings::default();
        self.solve_flops = PhaseFlops::default();
        if self.is_sequential() {
            let mut counter = FlopCounter::new();
            let t = Instant::now();
            let f = factorize_sequential(m, &mut counter)?;
            self.timings.factor = t.elapsed();
            self.factor = Some(Factorization::Sequential(f));
            self.factor_flops = PhaseFlops {
                segments: vec![counter],
                sequential: FlopCounter::new(),
            };
        } else {
            let t = Instant::now();
            let seg = make_layout(m, &self.plan)?;
            self.timings.other = t.elapsed();
            let mut storage = match self.factor.take() {
                Some(Factorization::Parallel(f))
                    if f.plan == seg.plan
                        && f.block_size == seg.block_size
                        && f.global_size == seg.global_size =>
                {
                    f
                }
                _ => ArrowFactor::allocate(&seg),
            };
            let t = Instant::now();
            let flops = refactorize_parallel(&mut storage, &seg, self.plan.threads())?;
            self.timings.factor = t.elapsed();
            self.factor_flops = flops;
            self.factor = Some(Factorization::Parallel(storage));
        }
        Ok(&self.factor_flops)
    }

    /// Solves with the current factorization.
    pub fn solve(&mut self, r: &BlockVector) -> Result<BlockVector> {
        match self.factor.as_ref() {
            None => Err(Error::InvalidArgument("solve called before factorize".into())),
            Some(Factorization::Sequential(f)) => {
                let mut counter = FlopCounter::new();
                let t = Instant::now();
                let x = solve_sequential(f, r, &mut counter)?;
                self.timings.solve = t.elapsed();
                self.solve_flops = PhaseFlops {
                    segments: vec![counter],
                    sequential: FlopCounter::new(),
                };
                Ok(x)
            }
            Some(Factorization::Parallel(f)) => {
                let t = Instant::now();
                let r_hat = permute_rhs(r, &self.plan)?;
                let mut other = t.elapsed();
                let t = Instant::now();
                let (x_hat, flops) = substitute_parallel(f, &r_hat)?;
                self.timings.solve = t.elapsed();
                let t = Instant::now();
                let x = unpermute_solution(&x_hat, &self.plan)?;
                other += t.elapsed();
                self.timings.other += other;
                self.solve_flops = flops;
                Ok(x)
            }
        }
    }

    /// Report of the last factorize/solve pair.
    pub fn report(&self) -> Option<SolveReport> {
        self.factor.as_ref()?;
        Some(SolveReport {
            plan: self.plan.clone(),
            sequential: self.is_sequential(),
            timings: self.timings,
            factor_flops: self.factor_flops.clone(),
            solve_flops: self.solve_flops.clone(),
        })
    }

    /// The permuted parallel factor, when the plan has more than one segment.
    pub fn arrow_factor(&self) -> Option<&ArrowFactor> {
        match self.factor.as_ref()? {
            Factorization::Parallel(f) => Some(f),
            Factorization::Sequential(_) => None,
        }
    }
}

impl std::fmt::Debug for KktSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KktSolver")
            .field("plan", &self.plan)
            .field("factorized", &self.factor.is_some())
            .finish()
    }
}

/// Structural check of a factor against the expected fill pattern: which
/// optional blocks exist for each segment and separator.
pub fn has_expected_pattern(f: &ArrowFactor) -> bool {
    let p = f.plan.threads();
    let ng = f.global_size;
    let seg_ok = f.segments.iter().enumerate().all(|(k, s)| {
        let n = f.plan.seg_lengths()[k];
        s.diag.len() == n
            && s.sub.len() == n - 1
            && s.arrow.len() == if ng > 0 { n } else { 0 }
            && s.head.len() == if k > 0 { n } else { 0 }
            && s.tail.is_some() == (k + 1 < p)
            && s.bridge.is_some() == (k > 0 && k + 1 < p)
    });
    let sep_ok = f.separators.len() == p - 1
        && f.separators.iter().all(|s| s.arrow.is_some() == (ng > 0));
    seg_ok && sep_ok && f.corner.is_some() == (ng > 0)
}

/// Helper for tests: lower-triangle check of a dense factor's diagonal blocks.
pub fn diagonal_blocks_positive(f: &ArrowFactor) -> bool {
    let pos = |d: &DenseBlock| (0..d.rows()).all(|i| d[(i, i)] > 0.0);
    f.segments.iter().all(|s| s.diag.iter().all(pos))
        && f.separators.iter().all(|s| pos(&s.diag))
        && f.corner.as_ref().map_or(true, pos)
}
