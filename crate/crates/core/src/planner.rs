//! Flop model, optimal segment partitioning and theoretical speedups.
//!
//! Costs are exact rationals. The `*_flops_*` functions that take only a
//! horizon return counts in units of `b³` (factorization) or `b²` (solve)
//! for systems without global variables. [`phase_flops`] gives absolute
//! per-phase counts for any block and global size, matching what the
//! instrumented solver records.

use num_rational::Rational64;

use crate::btam::PartitionPlan;
use crate::error::{Error, Result};

fn r(n: i64) -> Rational64 {
    Rational64::from_integer(n)
}

fn frac(n: i64, d: i64) -> Rational64 {
    Rational64::new(n, d)
}

/// Ratio of the first segment's length to the others' that balances
/// per-worker factorization work.
pub fn sigma() -> Rational64 {
    frac(19, 7)
}

/// Denominator used for the balanced per-segment length target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalanceRule {
    /// `(N − p + 1) / (p − 1 + σ)`: equalizes the first and the other segments.
    #[default]
    Balanced,
    /// `(N − p + 1) / (p + σ)`, kept for comparison.
    Shifted,
}

impl BalanceRule {
    pub fn target(self, n: usize, p: usize) -> Rational64 {
        let num = r(n as i64 - p as i64 + 1);
        let den = match self {
            BalanceRule::Balanced => r(p as i64 - 1) + sigma(),
            BalanceRule::Shifted => r(p as i64) + sigma(),
        };
        num / den
    }
}

/// Critical-path cost of the parallel phase, `max{7/3·N_1, 19/3·N_k}`.
fn balance_cost(n1: usize, nk: usize) -> Rational64 {
    std::cmp::max(frac(7, 3) * r(n1 as i64), frac(19, 3) * r(nk as i64))
}

/// First-segment length implied by the others' length `nk`, if positive.
fn first_length(n: usize, p: usize, nk: usize) -> Option<usize> {
    let rest = (p - 1) * nk + (p - 1);
    (n > rest).then(|| n - rest)
}

fn check_horizon(n: usize, p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::InvalidArgument("thread count must be at least 1".into()));
    }
    if n == 0 || (p > 1 && n < 2 * p) {
        return Err(Error::InfeasiblePlan {
            stages: n,
            threads: p,
        });
    }
    Ok(())
}

/// Balanced partition of `n` stages over `p` threads.
pub fn optimal_partition(n: usize, p: usize) -> Result<PartitionPlan> {
    optimal_partition_with(n, p, BalanceRule::Balanced)
}

pub fn optimal_partition_with(n: usize, p: usize, rule: BalanceRule) -> Result<PartitionPlan> {
    check_horizon(n, p)?;
    if p == 1 {
        return PartitionPlan::sequential(n);
    }
    let target = rule.target(n, p);
    let lo = target.floor().to_integer().max(0) as usize;
    let hi = target.ceil().to_integer().max(0) as usize;
    let mut best: Option<(Rational64, usize, usize)> = None;
    for nk in [lo, hi] {
        if nk == 0 {
            continue;
        }
        let Some(n1) = first_length(n, p, nk) else {
            continue;
        };
        let cost = balance_cost(n1, nk);
        let better = match best {
            None => true,
            Some((c, _, bk)) => cost < c || (cost == c && nk > bk),
        };
        if better {
            best = Some((cost, n1, nk));
        }
    }
    // n >= 2p guarantees nk = 1 is feasible.
    let (_, n1, nk) = best.unwrap_or_else(|| (r(0), n - 2 * (p - 1), 1));
    PartitionPlan::with_first(n1, nk, p)
}

/// Brute-force optimum over all uniform non-first lengths; reference for
/// [`optimal_partition`].
pub fn exhaustive_partition(n: usize, p: usize) -> Result<PartitionPlan> {
    check_horizon(n, p)?;
    if p == 1 {
        return PartitionPlan::sequential(n);
    }
    let mut best: Option<(Rational64, usize, usize)> = None;
    for nk in 1..=n {
        let Some(n1) = first_length(n, p, nk) else {
            break;
        };
        let cost = balance_cost(n1, nk);
        if best.map_or(true, |(c, _, bk)| cost < c || (cost == c && nk > bk)) {
            best = Some((cost, n1, nk));
        }
    }
    let (_, n1, nk) = best.expect("nk = 1 is feasible");
    PartitionPlan::with_first(n1, nk, p)
}

/// Sequential factorization cost `(7/3·N − 2)` in `b³`.
pub fn factor_flops_sequential(n: usize) -> Rational64 {
    frac(7, 3) * r(n as i64) - r(2)
}

/// Sequential solve cost model `(5N − 2)` in `b²`.
pub fn solve_flops_sequential(n: usize) -> Rational64 {
    r(5 * n as i64 - 2)
}

fn longest_other(plan: &PartitionPlan) -> usize {
    plan.seg_lengths()[1..].iter().copied().max().unwrap_or(0)
}

/// Parallel factorization critical path in `b³`:
/// `max{7/3·N_1, 19/3·N_k} + 10/3·p − 19/3`.
pub fn factor_flops_parallel(plan: &PartitionPlan) -> Rational64 {
    let p = plan.threads();
    if p == 1 {
        return factor_flops_sequential(plan.stages());
    }
    let n1 = plan.seg_lengths()[0];
    balance_cost(n1, longest_other(plan)) + frac(10, 3) * r(p as i64) - frac(19, 3)
}

/// Parallel solve critical path in `b²`:
/// `max{5N_1 − 2, 9N_k − 2} + 7p − 11`.
pub fn solve_flops_parallel(plan: &PartitionPlan) -> Rational64 {
    let p = plan.threads();
    if p == 1 {
        return solve_flops_sequential(plan.stages());
    }
    let n1 = plan.seg_lengths()[0] as i64;
    let nk = longest_other(plan) as i64;
    r((5 * n1 - 2).max(9 * nk - 2) + 7 * p as i64 - 11)
}

/// Exact per-phase flop counts of the instrumented solver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseModel {
    pub segments: Vec<Rational64>,
    pub sequential: Rational64,
}

impl PhaseModel {
    pub fn critical_path(&self) -> Rational64 {
        self.segments.iter().copied().max().unwrap_or_default() + self.sequential
    }

    pub fn total(&self) -> Rational64 {
        self.segments.iter().copied().sum::<Rational64>() + self.sequential
    }
}

/// Absolute flop counts of the parallel factorization and of the
/// forward plus backward solve, per segment and for the sequential phase,
/// for block size `b` and global size `ng`. A single-segment plan gives the
/// sequential solver's counts in the segment entry.
pub fn phase_flops(plan: &PartitionPlan, b: usize, ng: usize) -> (PhaseModel, PhaseModel) {
    let p = plan.threads();
    let (b, g) = (b as i64, ng as i64);
    let b2 = r(b * b);
    let b3 = r(b * b * b);
    let mut fac = Vec::with_capacity(p);
    let mut sol = Vec::with_capacity(p);
    for (k, &len) in plan.seg_lengths().iter().enumerate() {
        let n = len as i64;
        let head = k > 0;
        let tail = k + 1 < p;
        let mut f = frac(n, 3) * b3 + r(2 * (n - 1)) * b3;
        let mut s = r(n) * b2 + r(4 * (n - 1)) * b2;
        if g > 0 {
            f += r(n * g * b * b + n * g * g * b + 2 * (n - 1) * g * b * b);
            s += r(4 * n * g * b);
        }
        if head {
            f += r(2 * n + 2 * (n - 1)) * b3;
            s += r(4 * n) * b2;
            if g > 0 {
                f += r(2 * n * g * b * b);
            }
        }
        if tail {
            f += b3;
            s += r(2) * b2;
        }
        if head && tail {
            f += r(2) * b3;
        }
        fac.push(f);
        sol.push(s);
    }
    let mut fs = r(0);
    let mut ss = r(0);
    for k in 1..p {
        let inner = k + 1 < p;
        fs += b3 + frac(1, 3) * b3;
        ss += r(2) * b2 + b2;
        if inner {
            fs += r(2) * b3;
            ss += r(4) * b2;
        }
        if g > 0 {
            fs += r(3 * g * b * b + g * g * b);
            ss += r(4 * g * b);
            if inner {
                fs += r(2 * g * b * b);
            }
        }
    }
    if g > 0 {
        fs += frac(g * g * g, 3);
        ss += r(g * g);
    }
    if p == 1 {
        // The sequential solver has a single counter.
        fac[0] += std::mem::take(&mut fs);
        sol[0] += std::mem::take(&mut ss);
    }
    (
        PhaseModel {
            segments: fac,
            sequential: fs,
        },
        PhaseModel {
            segments: sol,
            sequential: ss,
        },
    )
}

/// Theoretical speedups for one horizon and thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Speedup {
    pub factor: Rational64,
    pub solve: Rational64,
}

/// One evaluated cell of the theory grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryPoint {
    pub n: usize,
    pub p: usize,
    pub n1: usize,
    pub nk: usize,
    pub factor_flops_seq: Rational64,
    pub factor_flops_par: Rational64,
    pub solve_flops_seq: Rational64,
    pub solve_flops_par: Rational64,
    pub gamma_factor: Rational64,
    pub gamma_solve: Rational64,
}

pub fn theory_point(n: usize, p: usize, rule: BalanceRule) -> Result<TheoryPoint> {
    let plan = optimal_partition_with(n, p, rule)?;
    let factor_flops_seq = factor_flops_sequential(n);
    let factor_flops_par = factor_flops_parallel(&plan);
    let solve_flops_seq = solve_flops_sequential(n);
    let solve_flops_par = solve_flops_parallel(&plan);
    Ok(TheoryPoint {
        n,
        p,
        n1: plan.seg_lengths()[0],
        nk: plan.seg_lengths().get(1).copied().unwrap_or(0),
        factor_flops_seq,
        factor_flops_par,
        solve_flops_seq,
        solve_flops_par,
        gamma_factor: factor_flops_seq / factor_flops_par,
        gamma_solve: solve_flops_seq / solve_flops_par,
    })
}

pub fn speedup(n: usize, p: usize) -> Result<Speedup> {
    let t = theory_point(n, p, BalanceRule::Balanced)?;
    Ok(Speedup {
        factor: t.gamma_factor,
        solve: t.gamma_solve,
    })
}

/// Asymptotic factorization speedup `1 + 7(p − 1)/19`.
pub fn gamma_max(p: usize) -> Rational64 {
    r(1) + frac(7 * (p as i64 - 1), 19)
}

/// Speedup goal for [`min_horizon`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Absolute(Rational64),
    FractionOfMax(Rational64),
}

impl Target {
    pub fn value(self, p: usize) -> Rational64 {
        match self {
            Target::Absolute(g) => g,
            Target::FractionOfMax(f) => f * gamma_max(p),
        }
    }
}

/// Scan limit for [`min_horizon`].
pub const MAX_HORIZON: usize = 1_000_000;

/// Smallest horizon `N ≥ 2p` whose factorization speedup reaches `target`,
/// or `None` when the target is at or above the asymptotic maximum.
pub fn min_horizon(p: usize, target: Target) -> Option<usize> {
    min_horizon_with(p, target, BalanceRule::Balanced)
}

pub fn min_horizon_with(p: usize, target: Target, rule: BalanceRule) -> Option<usize> {
    if p == 0 {
        return None;
    }
    let goal = target.value(p);
    if goal >= gamma_max(p) && goal > r(1) {
        return None;
    }
    let start = if p == 1 { 1 } else { 2 * p };
    (start..=MAX_HORIZON).find(|&n| {
        theory_point(n, p, rule)
            .map(|t| t.gamma_factor >= goal)
            .unwrap_or(false)
    })
}

/// One column of the speedup threshold table.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRow {
    pub p: usize,
    pub gamma_max: Rational64,
    pub n_gamma2: Option<usize>,
    pub n_gamma3: Option<usize>,
    pub n_gamma4: Option<usize>,
    pub n_gamma_09max: Option<usize>,
}

pub fn threshold_row(p: usize, rule: BalanceRule) -> ThresholdRow {
    let abs = |g| min_horizon_with(p, Target::Absolute(r(g)), rule);
    ThresholdRow {
        p,
        gamma_max: gamma_max(p),
        n_gamma2: abs(2),
        n_gamma3: abs(3),
        n_gamma4: abs(4),
        n_gamma_09max: min_horizon_with(p, Target::FractionOfMax(frac(9, 10)), rule),
    }
}

pub fn threshold_table(ps: &[usize], rule: BalanceRule) -> Vec<ThresholdRow> {
    ps.iter().map(|&p| threshold_row(p, rule)).collect()
}

/// A grid cell; `point` is `None` when `N < 2p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub n: usize,
    pub p: usize,
    pub point: Option<TheoryPoint>,
}

pub fn theory_grid(
    ps: impl IntoIterator<Item = usize>,
    ns: impl IntoIterator<Item = usize> + Clone,
    rule: BalanceRule,
) -> Vec<GridCell> {
    let mut out = Vec::new();
    for p in ps {
        for n in ns.clone() {
            out.push(GridCell {
                n,
                p,
                point: theory_point(n, p, rule).ok(),
            });
        }
    }
    out
}

/// Rational to `f64`.
pub fn to_f64(x: Rational64) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        let plan = optimal_partition(83, 4).unwrap();
        assert_eq!(plan.seg_lengths(), &[38, 14, 14, 14]);
        let plan = optimal_partition(43, 4).unwrap();
        assert_eq!(plan.seg_lengths(), &[19, 7, 7, 7]);
        assert_eq!(optimal_partition(10, 1).unwrap().seg_lengths(), &[10]);
        assert!(matches!(
            optimal_partition(7, 4),
            Err(Error::InfeasiblePlan { .. })
        ));
    }

    #[test]
    fn flop_examples() {
        assert_eq!(factor_flops_sequential(83), frac(575, 3));
        assert_eq!(factor_flops_sequential(2), frac(8, 3));
        assert_eq!(factor_flops_sequential(43), frac(295, 3));
        let p83 = optimal_partition(83, 4).unwrap();
        let p43 = optimal_partition(43, 4).unwrap();
        assert_eq!(factor_flops_parallel(&p83), frac(287, 3));
        assert_eq!(factor_flops_parallel(&p43), frac(154, 3));
        assert_eq!(
            factor_flops_parallel(&PartitionPlan::sequential(10).unwrap()),
            frac(64, 3)
        );
        assert_eq!(solve_flops_parallel(&p43), r(110));
        assert_eq!(solve_flops_parallel(&p83), r(205));
        assert_eq!(solve_flops_parallel(&PartitionPlan::sequential(10).unwrap()), r(48));
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup(83, 4).unwrap().factor, frac(575, 287));
        assert_eq!(speedup(43, 4).unwrap().factor, frac(295, 154));
        for p in 2..10 {
            assert!(speedup(2 * p, p).is_ok());
        }
    }

    #[test]
    fn gamma_max_values() {
        assert_eq!(gamma_max(1), r(1));
        assert!((to_f64(gamma_max(2)) - 1.37).abs() < 0.005);
        assert!((to_f64(gamma_max(4)) - 2.11).abs() < 0.005);
        assert!((to_f64(gamma_max(12)) - 5.05).abs() < 0.005);
    }

    #[test]
    fn min_horizon_examples() {
        assert_eq!(min_horizon(4, Target::Absolute(r(2))), Some(83));
        assert_eq!(min_horizon(4, Target::FractionOfMax(frac(9, 10))), Some(43));
        assert_eq!(min_horizon(6, Target::Absolute(r(2))), Some(35));
        assert_eq!(min_horizon(2, Target::Absolute(r(2))), None);
    }

    #[test]
    fn shifted_rule_is_worse_at_83() {
        let t = theory_point(83, 4, BalanceRule::Shifted).unwrap();
        assert!(t.gamma_factor < r(2));
    }

    #[test]
    fn grid_marks_infeasible() {
        let grid = theory_grid([16], [20, 32], BalanceRule::Balanced);
        assert!(grid[0].point.is_none());
        assert!(grid[1].point.is_some());
    }

    #[test]
    fn phase_model_matches_unit_table() {
        let plan = optimal_partition(50, 4).unwrap();
        let (fac, sol) = phase_flops(&plan, 1, 0);
        let l = plan.seg_lengths();
        let n = |k: usize| r(l[k] as i64);
        assert_eq!(fac.segments[0], frac(7, 3) * n(0) - r(1));
        assert_eq!(fac.segments[1], frac(19, 3) * n(1) - r(1));
        assert_eq!(fac.segments[3], frac(19, 3) * n(3) - r(4));
        assert_eq!(fac.sequential, frac(10, 3) * r(4) - frac(16, 3));
        assert_eq!(sol.segments[0], r(5) * n(0) - r(2));
        assert_eq!(sol.segments[2], r(9) * n(2) - r(2));
        assert_eq!(sol.segments[3], r(9) * n(3) - r(4));
        assert_eq!(sol.sequential, r(7 * 4 - 11));
    }
}
