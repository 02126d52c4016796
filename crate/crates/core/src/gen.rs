//! Problem generators: random SPD block-tridiagonal-arrow systems and the
//! minimum-curvature race-line QP with a penalty-based KKT driver.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::btam::{BlockTridiagArrowMatrix, BlockVector, PartitionPlan};
use crate::error::{Error, Result};
use crate::io::format_f64;
use crate::kernels::DenseBlock;
use crate::par::{KktSolver, SolveTimings};

/// Block size of the chain-of-masses benchmark (20 masses: 2·20 states and 19 inputs).
pub const CHAIN_BLOCK_SIZE: usize = 59;

fn uniform_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseBlock {
    DenseBlock::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

fn gram_plus_diag(rng: &mut ChaCha8Rng, n: usize, shift: &[f64]) -> DenseBlock {
    let g = uniform_block(rng, n, n);
    let mut d = DenseBlock::from_fn(n, n, |i, j| (0..n).map(|l| g[(i, l)] * g[(j, l)]).sum());
    for (i, s) in shift.iter().enumerate() {
        d[(i, i)] += s;
    }
    d
}

/// Random SPD block-tridiagonal-arrow matrix, deterministic in `seed`.
///
/// Off-diagonal blocks are uniform in `[−1, 1]`. Each diagonal block is
/// `G Gᵀ` plus, on every row, `dominance` and the absolute sum of that row's
/// off-diagonal entries, so `dominance > 0` makes the matrix strictly
/// diagonally dominant on top of a PSD part.
pub fn random_spd_bta(
    stages: usize,
    b: usize,
    global_size: usize,
    seed: u64,
    dominance: f64,
) -> BlockTridiagArrowMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub: Vec<_> = (0..stages.saturating_sub(1))
        .map(|_| uniform_block(&mut rng, b, b))
        .collect();
    let arrow: Vec<_> = if global_size > 0 {
        (0..stages).map(|_| uniform_block(&mut rng, global_size, b)).collect()
    } else {
        Vec::new()
    };
    let diag = (0..stages)
        .map(|i| {
            let shift: Vec<f64> = (0..b)
                .map(|r| {
                    let mut s = dominance;
                    if i > 0 {
                        s += (0..b).map(|c| sub[i - 1][(r, c)].abs()).sum::<f64>();
                    }
                    if i + 1 < stages {
                        s += sub[i].col(r).iter().map(|x| x.abs()).sum::<f64>();
                    }
                    if global_size > 0 {
                        s += arrow[i].col(r).iter().map(|x| x.abs()).sum::<f64>();
                    }
                    s
                })
                .collect();
            gram_plus_diag(&mut rng, b, &shift)
        })
        .collect();
    let corner = (global_size > 0).then(|| {
        let shift: Vec<f64> = (0..global_size)
            .map(|r| {
                dominance
                    + arrow
                        .iter()
                        .map(|a| (0..b).map(|c| a[(r, c)].abs()).sum::<f64>())
                        .sum::<f64>()
            })
            .collect();
        gram_plus_diag(&mut rng, global_size, &shift)
    });
    BlockTridiagArrowMatrix {
        diag,
        sub,
        arrow,
        corner,
    }
}

/// Random vector with entries uniform in `[−1, 1]`.
pub fn random_block_vector(stage_sizes: &[usize], global_size: usize, seed: u64) -> BlockVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect() };
    let stages = stage_sizes.iter().map(|&n| draw(n)).collect();
    let global = draw(global_size);
    BlockVector::new(stages, global)
}

/// Closed track: centerline points and left/right widths in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackData {
    pub points: Vec<[f64; 2]>,
    /// `[w_l, w_r]` per point.
    pub widths: Vec<[f64; 2]>,
}

impl TrackData {
    pub fn new(points: Vec<[f64; 2]>, widths: Vec<[f64; 2]>) -> Result<Self> {
        let t = Self { points, widths };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "track needs at least 4 points, got {}",
                self.points.len()
            )));
        }
        if self.widths.len() != self.points.len() {
            return Err(Error::InvalidArgument("one width pair per point required".into()));
        }
        for (i, (p, w)) in self.points.iter().zip(&self.widths).enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::InvalidArgument(format!("point {i} is not finite")));
            }
            if !(w[0] > 0.0 && w[1] > 0.0 && w[0].is_finite() && w[1].is_finite()) {
                return Err(Error::InvalidArgument(format!("widths at point {i} must be positive")));
            }
        }
        if self.points[0] == self.points[self.points.len() - 1] {
            return Err(Error::InvalidArgument(
                "first and last points coincide; closure is implicit".into(),
            ));
        }
        Ok(())
    }

    /// Counter-clockwise circle of `segments` points.
    pub fn circle(radius: f64, segments: usize, w_l: f64, w_r: f64) -> Result<Self> {
        let h = std::f64::consts::TAU / segments as f64;
        let points = (0..segments)
            .map(|j| {
                let a = j as f64 * h;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(points, vec![[w_l, w_r]; segments])
    }

    /// Counter-clockwise stadium: two straights of length `straight` joined by
    /// half circles of radius `radius`, sampled at equal arc length.
    pub fn oval(straight: f64, radius: f64, segments: usize, w_l: f64, w_r: f64) -> Result<Self> {
        use std::f64::consts::PI;
        let arc = PI * radius;
        let total = 2.0 * straight + 2.0 * arc;
        let half = straight / 2.0;
        let point_at = |s: f64| -> [f64; 2] {
            // Starts at the middle of the bottom straight heading +x.
            let mut s = s;
            if s < half {
                return [s, -radius];
            }
            s -= half;
            if s < arc {
                let a = -PI / 2.0 + s / radius;
                return [half + radius * a.cos(), radius * a.sin()];
            }
            s -= arc;
            if s < straight {
                return [half - s, radius];
            }
            s -= straight;
            if s < arc {
                let a = PI / 2.0 + s / radius;
                return [-half + radius * a.cos(), radius * a.sin()];
            }
            s -= arc;
            [-half + s, -radius]
        };
        let points = (0..segments)
            .map(|j| point_at(total * j as f64 / segments as f64))
            .collect();
        Self::new(points, vec![[w_l, w_r]; segments])
    }
}

/// Default synthetic oval: 400 m straights, 100 m turns, 6 m either side.
pub fn default_oval(segments: usize) -> Result<TrackData> {
    TrackData::oval(400.0, 100.0, segments, 6.0, 6.0)
}

fn parse_field(s: &str, line: u64, name: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        line: line as usize,
        message: format!("invalid {name} value {:?}", s.trim()),
    })
}

/// Parses `x,y,w_l,w_r` rows; a leading header row is skipped.
pub fn parse_track(reader: impl Read) -> Result<TrackData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut points = Vec::new();
    let mut widths = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(n as u64 + 1, |p| p.line());
        if n == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != 4 {
            return Err(Error::Parse {
                line: line as usize,
                message: format!("expected 4 fields (x,y,w_l,w_r), found {}", rec.len()),
            });
        }
        let names = ["x", "y", "w_l", "w_r"];
        let v: Vec<f64> = (0..4)
            .map(|i| parse_field(&rec[i], line, names[i]))
            .collect::<Result<_>>()?;
        points.push([v[0], v[1]]);
        widths.push([v[2], v[3]]);
    }
    TrackData::new(points, widths)
}

pub fn load_track(path: impl AsRef<Path>) -> Result<TrackData> {
    parse_track(File::open(path)?)
}

pub fn write_track(path: impl AsRef<Path>, track: &TrackData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "w_l", "w_r"])?;
    for (p, wd) in track.points.iter().zip(&track.widths) {
        w.write_record([p[0], p[1], wd[0], wd[1]].map(format_f64))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-point tangent, right-hand normal and chord length to the next point.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub tangents: Vec<[f64; 2]>,
    pub normals: Vec<[f64; 2]>,
    pub lengths: Vec<f64>,
}

const MIN_CHORD: f64 = 1e-12;

fn normalize(v: [f64; 2]) -> Option<[f64; 2]> {
    let n = v[0].hypot(v[1]);
    (n >= MIN_CHORD).then(|| [v[0] / n, v[1] / n])
}

/// Frames of a closed track (central differences with wraparound).
pub fn compute_frames(track: &TrackData) -> Result<Frames> {
    frames_of(&track.points, true)
}

/// Frames of a point sequence; open sequences use one-sided differences at
/// the ends and have no chord after the last point (its length is 0).
pub fn frames_of(points: &[[f64; 2]], closed: bool) -> Result<Frames> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let sub = |a: [f64; 2], b: [f64; 2]| [a[0] - b[0], a[1] - b[1]];
    let mut lengths = Vec::with_capacity(n);
    for i in 0..n {
        if !closed && i + 1 == n {
            lengths.push(0.0);
            continue;
        }
        let d = sub(points[(i + 1) % n], points[i]);
        let l = d[0].hypot(d[1]);
        if l < MIN_CHORD {
            return Err(Error::InvalidArgument(format!(
                "points {i} and {} coincide",
                (i + 1) % n
            )));
        }
        lengths.push(l);
    }
    let mut tangents = Vec::with_capacity(n);
    for i in 0..n {
        let (next, prev) = if closed {
            ((i + 1) % n, (i + n - 1) % n)
        } else {
            ((i + 1).min(n - 1), i.saturating_sub(1))
        };
        let t = normalize(sub(points[next], points[prev])).ok_or_else(|| {
            Error::InvalidArgument(format!("degenerate tangent at point {i}"))
        })?;
        tangents.push(t);
    }
    let normals = tangents.iter().map(|t| [t[1], -t[0]]).collect();
    Ok(Frames {
        tangents,
        normals,
        lengths,
    })
}

/// Where curvature is sampled on each spline segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurvatureRule {
    /// At the knot, `s = 0`.
    #[default]
    Knot,
    /// Two-point Gauss quadrature on `s ∈ [0, 1]`.
    Gauss2,
}

impl CurvatureRule {
    fn samples(self) -> Vec<(f64, f64)> {
        match self {
            CurvatureRule::Knot => vec![(0.0, 1.0)],
            CurvatureRule::Gauss2 => {
                let o = 3f64.sqrt() / 6.0;
                vec![(0.5 - o, 0.5), (0.5 + o, 0.5)]
            }
        }
    }
}

/// Stage size of the race-line QP: `[a_x, b_x, c_x, d_x, a_y, b_y, c_y, d_y]`.
pub const SPLINE_VARS: usize = 8;

/// Variable block of a constraint term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Stage(usize),
    Global,
}

/// Linear equality `Σ coeffᵀ·θ_var = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub terms: Vec<(Var, [f64; SPLINE_VARS])>,
    pub rhs: f64,
}

/// Two-sided bound `lower ≤ coeffᵀ·θ_stage ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub stage: usize,
    pub coeff: [f64; SPLINE_VARS],
    pub lower: f64,
    pub upper: f64,
}

/// Multistage QP with separable stage Hessians, sparse equality rows
/// coupling neighbouring stages or a stage and the global block, and
/// single-stage bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct MultistageQPData {
    pub stage_sizes: Vec<usize>,
    pub global_size: usize,
    pub hessians: Vec<DenseBlock>,
    pub equalities: Vec<ConstraintRow>,
    pub inequalities: Vec<BoundRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaceLineProblem {
    pub track: TrackData,
    pub frames: Frames,
    pub rule: CurvatureRule,
    pub qp: MultistageQPData,
}

impl RaceLineProblem {
    pub fn num_stages(&self) -> usize {
        self.track.len()
    }
}

fn dot8(a: &[f64; SPLINE_VARS], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(a, x)| a * x).sum()
}

/// Second-derivative rows `[x''(s), y''(s)]` as functions of θ.
fn second_derivative_rows(s: f64) -> [[f64; SPLINE_VARS]; 2] {
    [
        [0.0, 0.0, 2.0, 6.0 * s, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 6.0 * s],
    ]
}

/// Curvature weight `P_i` built from the fixed first derivative `L_i·t_i`.
fn curvature_weight(frames: &Frames, i: usize) -> [[f64; 2]; 2] {
    let t = frames.tangents[i];
    let l = frames.lengths[i];
    let (xp, yp) = (l * t[0], l * t[1]);
    let z = (xp * xp + yp * yp).powi(3);
    [[yp * yp / z, -xp * yp / z], [-xp * yp / z, xp * xp / z]]
}

fn stage_hessian(frames: &Frames, i: usize, rule: CurvatureRule) -> DenseBlock {
    let p = curvature_weight(frames, i);
    let mut h = DenseBlock::zeros(SPLINE_VARS, SPLINE_VARS);
    for (s, w) in rule.samples() {
        let j = second_derivative_rows(s);
        for a in 0..2 {
            for b in 0..2 {
                h.add_outer(w * p[a][b], &j[a], &j[b]);
            }
        }
    }
    h
}

/// Continuity rows between the end of one segment and the start of the next.
fn continuity_rows(left: Var, right: Var) -> Vec<ConstraintRow> {
    let end = [
        [1.0, 1.0, 1.0, 1.0],
        [0.0, 1.0, 2.0, 3.0],
        [0.0, 0.0, 2.0, 6.0],
    ];
    let start = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0],
    ];
    let mut rows = Vec::with_capacity(6);
    for off in [0, 4] {
        for d in 0..3 {
            let mut a = [0.0; SPLINE_VARS];
            let mut b = [0.0; SPLINE_VARS];
            for c in 0..4 {
                a[off + c] = end[d][c];
                b[off + c] = -start[d][c];
            }
            rows.push(ConstraintRow {
                terms: vec![(left, a), (right, b)],
                rhs: 0.0,
            });
        }
    }
    rows
}

/// Builds the race-line QP with curvature sampled at the knots.
pub fn build_raceline_qp(track: &TrackData, frames: &Frames) -> Result<RaceLineProblem> {
    build_raceline_qp_with(track, frames, CurvatureRule::Knot)
}

pub fn build_raceline_qp_with(
    track: &TrackData,
    frames: &Frames,
    rule: CurvatureRule,
) -> Result<RaceLineProblem> {
    track.validate()?;
    let n = track.len();
    if frames.tangents.len() != n || frames.lengths.len() != n {
        return Err(Error::InvalidArgument("frames do not match the track".into()));
    }
    let hessians = (0..n).map(|i| stage_hessian(frames, i, rule)).collect();

    let mut equalities = Vec::with_capacity(8 * n + 14);
    for i in 0..n - 1 {
        equalities.extend(continuity_rows(Var::Stage(i), Var::Stage(i + 1)));
    }
    // The global block holds a copy of the first segment; the last segment
    // connects to that copy.
    equalities.extend(continuity_rows(Var::Stage(n - 1), Var::Global));
    for c in 0..SPLINE_VARS {
        let mut a = [0.0; SPLINE_VARS];
        a[c] = 1.0;
        let mut b = [0.0; SPLINE_VARS];
        b[c] = -1.0;
        equalities.push(ConstraintRow {
            terms: vec![(Var::Global, a), (Var::Stage(0), b)],
            rhs: 0.0,
        });
    }
    let mut inequalities = Vec::with_capacity(n);
    for i in 0..n {
        let t = frames.tangents[i];
        let nv = frames.normals[i];
        let pc = track.points[i];
        let mut a = [0.0; SPLINE_VARS];
        a[0] = t[0];
        a[4] = t[1];
        equalities.push(ConstraintRow {
            terms: vec![(Var::Stage(i), a)],
            rhs: t[0] * pc[0] + t[1] * pc[1],
        });
        let mut c = [0.0; SPLINE_VARS];
        c[0] = nv[0];
        c[4] = nv[1];
        let center = nv[0] * pc[0] + nv[1] * pc[1];
        inequalities.push(BoundRow {
            stage: i,
            coeff: c,
            lower: center - track.widths[i][0],
            upper: center + track.widths[i][1],
        });
    }
    Ok(RaceLineProblem {
        track: track.clone(),
        frames: frames.clone(),
        rule,
        qp: MultistageQPData {
            stage_sizes: vec![SPLINE_VARS; n],
            global_size: SPLINE_VARS,
            hessians,
            equalities,
            inequalities,
        },
    })
}

fn var_slice<'a>(theta: &'a BlockVector, v: Var) -> &'a [f64] {
    match v {
        Var::Stage(i) => &theta.stages[i],
        Var::Global => &theta.global,
    }
}

fn var_slice_mut<'a>(theta: &'a mut BlockVector, v: Var) -> &'a mut [f64] {
    match v {
        Var::Stage(i) => &mut theta.stages[i],
        Var::Global => &mut theta.global,
    }
}

fn row_value(row: &ConstraintRow, theta: &BlockVector) -> f64 {
    row.terms
        .iter()
        .map(|(v, a)| dot8(a, var_slice(theta, *v)))
        .sum::<f64>()
        - row.rhs
}

/// Signed bound violation: positive above `upper`, negative below `lower`.
fn bound_violation(row: &BoundRow, theta: &BlockVector) -> f64 {
    let v = dot8(&row.coeff, &theta.stages[row.stage]);
    if v > row.upper {
        v - row.upper
    } else if v < row.lower {
        v - row.lower
    } else {
        0.0
    }
}

/// `‖J_eq Θ − b‖∞`.
pub fn equality_residual(problem: &RaceLineProblem, theta: &BlockVector) -> f64 {
    problem
        .qp
        .equalities
        .iter()
        .map(|r| row_value(r, theta).abs())
        .fold(0.0, f64::max)
}

/// Largest track-boundary violation in meters.
pub fn max_bound_violation(problem: &RaceLineProblem, theta: &BlockVector) -> f64 {
    problem
        .qp
        .inequalities
        .iter()
        .map(|r| bound_violation(r, theta).abs())
        .fold(0.0, f64::max)
}

/// Sum of sampled squared curvatures with fixed first derivatives.
pub fn curvature_objective(theta: &BlockVector, frames: &Frames, rule: CurvatureRule) -> f64 {
    let samples = rule.samples();
    theta
        .stages
        .iter()
        .enumerate()
        .map(|(i, th)| {
            let p = curvature_weight(frames, i);
            samples
                .iter()
                .map(|&(s, w)| {
                    let x2 = 2.0 * th[2] + 6.0 * s * th[3];
                    let y2 = 2.0 * th[6] + 6.0 * s * th[7];
                    w * (p[0][0] * x2 * x2 + 2.0 * p[0][1] * x2 * y2 + p[1][1] * y2 * y2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// `ΘᵀHΘ` from the QP's stage Hessians.
pub fn quadratic_objective(problem: &RaceLineProblem, theta: &BlockVector) -> f64 {
    problem
        .qp
        .hessians
        .iter()
        .zip(&theta.stages)
        .map(|(h, th)| {
            let hx = h.mul_vec(th);
            hx.iter().zip(th).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

/// Penalty merit `½ΘᵀHΘ + ½ρ(‖J_eqΘ − b‖² + ‖bound violations‖²)`.
pub fn penalty_merit(problem: &RaceLineProblem, theta: &BlockVector, rho: f64) -> f64 {
    let eq: f64 = problem
        .qp
        .equalities
        .iter()
        .map(|r| row_value(r, theta).powi(2))
        .sum();
    let ineq: f64 = problem
        .qp
        .inequalities
        .iter()
        .map(|r| bound_violation(r, theta).powi(2))
        .sum();
    0.5 * quadratic_objective(problem, theta) + 0.5 * rho * (eq + ineq)
}

fn block_of<'a>(m: &'a mut BlockTridiagArrowMatrix, row: Var, col: Var) -> Option<&'a mut DenseBlock> {
    match (row, col) {
        (Var::Stage(i), Var::Stage(j)) if i == j => Some(&mut m.diag[i]),
        (Var::Stage(i), Var::Stage(j)) if i == j + 1 => Some(&mut m.sub[j]),
        (Var::Global, Var::Stage(j)) => Some(&mut m.arrow[j]),
        (Var::Global, Var::Global) => m.corner.as_mut(),
        _ => None,
    }
}

fn order(a: Var, b: Var) -> bool {
    match (a, b) {
        (Var::Stage(i), Var::Stage(j)) => i >= j,
        (Var::Global, _) => true,
        (Var::Stage(_), Var::Global) => false,
    }
}

/// Adds `ρ·a aᵀ` for a sparse row and `−ρ·a·value` to the right-hand side.
fn add_penalty_row(
    m: &mut BlockTridiagArrowMatrix,
    r: &mut BlockVector,
    terms: &[(Var, [f64; SPLINE_VARS])],
    value: f64,
    rho: f64,
) -> Result<()> {
    for (u, au) in terms {
        for (v, av) in terms {
            if !order(*u, *v) {
                continue;
            }
            let blk = block_of(m, *u, *v).ok_or_else(|| {
                Error::InvalidArgument(format!("constraint couples {u:?} and {v:?}"))
            })?;
            blk.add_outer(rho, au, av);
        }
        let ru = var_slice_mut(r, *u);
        for (x, a) in ru.iter_mut().zip(au) {
            *x -= rho * a * value;
        }
    }
    Ok(())
}

/// Penalty KKT system `Ψ Δ = r` at `theta`:
/// `Ψ = H + δI + ρ(J_eqᵀJ_eq + J_actᵀJ_act)` and
/// `r = −(HΘ + ρJ_eqᵀ(J_eqΘ − b) + ρJ_actᵀ·violation)`, where the active
/// rows are the bounds violated at `theta`.
pub fn assemble_penalty_kkt(
    problem: &RaceLineProblem,
    theta: &BlockVector,
    rho: f64,
    delta: f64,
) -> Result<(BlockTridiagArrowMatrix, BlockVector)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("regularization must be positive, got {delta}")));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("penalty must be nonnegative, got {rho}")));
    }
    let qp = &problem.qp;
    let n = qp.stage_sizes.len();
    let ng = qp.global_size;
    let mut m = BlockTridiagArrowMatrix {
        diag: qp.hessians.clone(),
        sub: vec![DenseBlock::zeros(SPLINE_VARS, SPLINE_VARS); n - 1],
        arrow: vec![DenseBlock::zeros(ng, SPLINE_VARS); n],
        corner: Some(DenseBlock::zeros(ng, ng)),
    };
    let mut r = BlockVector::zeros(&qp.stage_sizes, ng);
    for ((d, ri), th) in m.diag.iter_mut().zip(r.stages.iter_mut()).zip(&theta.stages) {
        let hx = d.mul_vec(th);
        for (x, h) in ri.iter_mut().zip(hx) {
            *x -= h;
        }
        d.add_diagonal(delta);
    }
    if let Some(c) = m.corner.as_mut() {
        c.add_diagonal(delta);
    }
    for row in &qp.equalities {
        add_penalty_row(&mut m, &mut r, &row.terms, row_value(row, theta), rho)?;
    }
    for row in &qp.inequalities {
        let v = bound_violation(row, theta);
        if v != 0.0 {
            add_penalty_row(&mut m, &mut r, &[(Var::Stage(row.stage), row.coeff)], v, rho)?;
        }
    }
    for d in m.diag.iter_mut().chain(m.corner.as_mut()) {
        d.symmetrize_from_lower();
    }
    Ok((m, r))
}

/// Solves `M_{j−1} + 4M_j + M_{j+1} = rhs_j` with cyclic wraparound.
fn solve_cyclic_spline_system(rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    // Sherman–Morrison on top of a Thomas sweep.
    let gamma = -4.0;
    let mut diag = vec![4.0; n];
    diag[0] -= gamma;
    diag[n - 1] -= 1.0 / gamma;
    let thomas = |d: &[f64], b: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        let mut x = vec![0.0; n];
        c[0] = 1.0 / d[0];
        x[0] = b[0] / d[0];
        for i in 1..n {
            let m = d[i] - c[i - 1];
            c[i] = 1.0 / m;
            x[i] = (b[i] - x[i - 1]) / m;
        }
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    };
    let y = thomas(&diag, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = 1.0;
    let z = thomas(&diag, &u);
    let vy = y[0] + y[n - 1] / gamma;
    let vz = z[0] + z[n - 1] / gamma;
    let f = vy / (1.0 + vz);
    y.iter().zip(&z).map(|(y, z)| y - f * z).collect()
}

/// Periodic C² cubic spline through the track centerline, one segment per
/// point, as a QP iterate.
pub fn centerline_spline(track: &TrackData) -> BlockVector {
    let n = track.len();
    let mut stages = vec![vec![0.0; SPLINE_VARS]; n];
    for (dim, off) in [(0usize, 0usize), (1, 4)] {
        let p: Vec<f64> = track.points.iter().map(|q| q[dim]).collect();
        let rhs: Vec<f64> = (0..n)
            .map(|j| 6.0 * (p[(j + 1) % n] - 2.0 * p[j] + p[(j + n - 1) % n]))
            .collect();
        let m = solve_cyclic_spline_system(&rhs);
        for j in 0..n {
            let (m0, m1) = (m[j], m[(j + 1) % n]);
            let th = &mut stages[j][off..off + 4];
            th[0] = p[j];
            th[1] = p[(j + 1) % n] - p[j] - (2.0 * m0 + m1) / 6.0;
            th[2] = m0 / 2.0;
            th[3] = (m1 - m0) / 6.0;
        }
    }
    let global = stages[0].clone();
    BlockVector::new(stages, global)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyOptions {
    pub iterations: usize,
    pub rho0: f64,
    pub rho_factor: f64,
    pub delta: f64,
    /// Newton steps allowed per penalty level.
    pub max_steps: usize,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        Self {
            iterations: 6,
            rho0: 10.0,
            rho_factor: 10.0,
            delta: 1e-8,
            max_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub rho: f64,
    pub objective: f64,
    pub equality_residual: f64,
    pub max_violation: f64,
    /// Merit at `rho` before and after the step.
    pub merit_before: f64,
    pub merit_after: f64,
    /// Newton steps taken at this penalty level.
    pub steps: usize,
    pub assembly: Duration,
    pub timings: SolveTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub initial_objective: f64,
    pub initial_equality_residual: f64,
    pub iterations: Vec<IterationReport>,
}

impl PenaltyReport {
    pub fn final_objective(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial_objective, |it| it.objective)
    }

    pub fn final_equality_residual(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial_equality_residual, |it| it.equality_residual)
    }

    /// Summed factorization, solve and other (assembly included) times.
    pub fn total_timings(&self) -> SolveTimings {
        let mut t = SolveTimings::default();
        for it in &self.iterations {
            t.factor += it.timings.factor;
            t.solve += it.timings.solve;
            t.other += it.timings.other + it.assembly;
        }
        t
    }
}

fn active_pattern(problem: &RaceLineProblem, theta: &BlockVector) -> Vec<bool> {
    problem
        .qp
        .inequalities
        .iter()
        .map(|r| bound_violation(r, theta) != 0.0)
        .collect()
}

fn axpy(theta: &BlockVector, alpha: f64, step: &BlockVector) -> BlockVector {
    let mut out = theta.clone();
    for (x, s) in out.stages.iter_mut().zip(&step.stages) {
        for (a, b) in x.iter_mut().zip(s) {
            *a += alpha * b;
        }
    }
    for (a, b) in out.global.iter_mut().zip(&step.global) {
        *a += alpha * b;
    }
    out
}

/// Penalty iterations `Θ ← Θ + αΨ⁻¹r` from the centerline spline, with `ρ`
/// growing geometrically. At each `ρ` the system is reassembled with the
/// bounds active at the current iterate until the active set settles, and
/// `α` is halved until the merit decreases.
pub fn raceline_penalty_solve(
    problem: &RaceLineProblem,
    options: &PenaltyOptions,
    plan: &PartitionPlan,
) -> Result<(BlockVector, PenaltyReport)> {
    let mut theta = centerline_spline(&problem.track);
    let initial_objective = curvature_objective(&theta, &problem.frames, problem.rule);
    let mut report = PenaltyReport {
        initial_objective,
        initial_equality_residual: equality_residual(problem, &theta),
        iterations: Vec::with_capacity(options.iterations),
    };
    let mut solver = KktSolver::new(plan.clone());
    let mut rho = options.rho0;
    for iteration in 0..options.iterations {
        let merit_before = penalty_merit(problem, &theta, rho);
        let mut merit = merit_before;
        let mut assembly = Duration::ZERO;
        let mut timings = SolveTimings::default();
        let mut steps = 0;
        while steps < options.max_steps.max(1) {
            let active = active_pattern(problem, &theta);
            let t = Instant::now();
            let (m, r) = assemble_penalty_kkt(problem, &theta, rho, options.delta)?;
            assembly += t.elapsed();
            solver.factorize(&m)?;
            let step = solver.solve(&r)?;
            let rep = solver.report().expect("factorized").timings;
            timings.factor += rep.factor;
            timings.solve += rep.solve;
            timings.other += rep.other;
            steps += 1;

            // r is the negative merit gradient.
            let slope: f64 = -r.iter().zip(step.iter()).map(|(a, b)| a * b).sum::<f64>();
            if !slope.is_finite() {
                return Err(Error::Divergence(format!("iteration {iteration}: non-finite step")));
            }
            if slope >= 0.0 {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial = axpy(&theta, alpha, &step);
                let value = penalty_merit(problem, &trial, rho);
                if value <= merit + 1e-4 * alpha * slope {
                    accepted = Some((trial, value));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((next, value)) = accepted else { break };
            let settled = alpha == 1.0 && active_pattern(problem, &next) == active;
            let stalled = merit - value <= 1e-15 * merit.abs();
            theta = next;
            merit = value;
            if settled || stalled {
                break;
            }
        }
        let objective = curvature_objective(&theta, &problem.frames, problem.rule);
        let residual = equality_residual(problem, &theta);
        if !objective.is_finite() || !residual.is_finite() {
            return Err(Error::Divergence(format!(
                "iteration {iteration}: objective {objective}, residual {residual}"
            )));
        }
        report.iterations.push(IterationReport {
            iteration,
            rho,
            objective,
            equality_residual: residual,
            max_violation: max_bound_violation(problem, &theta),
            merit_before,
            merit_after: merit,
            steps,
            assembly,
            timings,
        });
        rho *= options.rho_factor;
    }
    Ok((theta, report))
}

/// Signed knot curvature with the fixed first derivative.
pub fn knot_curvature(theta: &BlockVector, frames: &Frames, i: usize) -> f64 {
    let t = frames.tangents[i];
    let l = frames.lengths[i];
    let (xp, yp) = (l * t[0], l * t[1]);
    let (x2, y2) = (2.0 * theta.stages[i][2], 2.0 * theta.stages[i][6]);
    (xp * y2 - x2 * yp) / (xp * xp + yp * yp).powf(1.5)
}

/// Writes `knot,x,y,offset,kappa` rows.
pub fn write_raceline(
    out: impl Write,
    problem: &RaceLineProblem,
    theta: &BlockVector,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["knot", "x", "y", "offset", "kappa"])?;
    for i in 0..problem.num_stages() {
        let (x, y) = (theta.stages[i][0], theta.stages[i][4]);
        let pc = problem.track.points[i];
        let nv = problem.frames.normals[i];
        let offset = nv[0] * (x - pc[0]) + nv[1] * (y - pc[1]);
        let kappa = knot_curvature(theta, &problem.frames, i);
        let mut rec = vec![i.to_string()];
        rec.extend([x, y, offset, kappa].map(format_f64));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
