use arrowkkt::gen::*;
use arrowkkt::planner::optimal_partition;
use arrowkkt::DenseBlock;

/// Knot-sampled objective of the periodic spline through `n` equally spaced
/// points on a circle of radius `rr`, with first derivatives fixed to the
/// chords of the radius-`r` centerline.
fn analytic_circle_objective(r: f64, rr: f64, n: usize) -> f64 {
    let h = std::f64::consts::TAU / n as f64;
    let chord = 2.0 * r * (h / 2.0).sin();
    let second = 12.0 * rr * (1.0 - h.cos()) / (2.0 * h.cos() + 4.0);
    n as f64 * second * second / chord.powi(4)
}

#[test]
fn circle_hugs_inner_boundary() {
    let (r, w) = (50.0, 5.0);
    let track = TrackData::circle(r, 360, w, w).unwrap();
    let frames = compute_frames(&track).unwrap();
    let problem = build_raceline_qp(&track, &frames).unwrap();
    let plan = optimal_partition(360, 4).unwrap();
    let (theta, report) = raceline_penalty_solve(&problem, &PenaltyOptions::default(), &plan).unwrap();

    let centerline = analytic_circle_objective(r, r, 360);
    assert!((report.initial_objective - centerline).abs() <= 1e-6 * centerline);
    let want = analytic_circle_objective(r, r - w, 360);
    let got = report.final_objective();
    assert!((got - want).abs() <= 0.01 * want, "objective {got} vs analytic {want}");
    for st in &theta.stages {
        assert!((st[0].hypot(st[4]) - (r - w)).abs() < 1e-3);
    }
}

#[test]
fn oval_reduces_curvature_and_closes() {
    let track = default_oval(2356).unwrap();
    let frames = compute_frames(&track).unwrap();
    let problem = build_raceline_qp(&track, &frames).unwrap();
    let plan = optimal_partition(2356, 4).unwrap();
    let (_, report) = raceline_penalty_solve(&problem, &PenaltyOptions::default(), &plan).unwrap();
    assert!(report.final_equality_residual() <= 1e-6, "{report:#?}");
    assert!(report.final_objective() < report.initial_objective);
    assert!(problem.qp.stage_sizes.iter().all(|&n| n == 8));
    assert_eq!(problem.qp.global_size, 8);
}

#[test]
fn merit_decreases_over_final_iterations() {
    for track in [
        TrackData::circle(50.0, 360, 5.0, 5.0).unwrap(),
        default_oval(600).unwrap(),
    ] {
        let frames = compute_frames(&track).unwrap();
        let problem = build_raceline_qp(&track, &frames).unwrap();
        let plan = optimal_partition(track.len(), 3).unwrap();
        let (_, report) = raceline_penalty_solve(&problem, &PenaltyOptions::default(), &plan).unwrap();
        for it in &report.iterations[report.iterations.len() - 3..] {
            assert!(it.merit_after < it.merit_before, "{it:?}");
        }
    }
}

#[test]
fn sequential_and_parallel_race_lines_agree() {
    let track = default_oval(300).unwrap();
    let frames = compute_frames(&track).unwrap();
    let problem = build_raceline_qp(&track, &frames).unwrap();
    let opts = PenaltyOptions::default();
    let (a, _) = raceline_penalty_solve(&problem, &opts, &optimal_partition(300, 1).unwrap()).unwrap();
    let (b, _) = raceline_penalty_solve(&problem, &opts, &optimal_partition(300, 4).unwrap()).unwrap();
    let diff = a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(diff <= 1e-6, "{diff}");
}

fn rotation(angle: f64) -> DenseBlock {
    let (c, s) = (angle.cos(), angle.sin());
    DenseBlock::from_fn(8, 8, |i, j| {
        if i % 4 != j % 4 {
            return 0.0;
        }
        match (i / 4, j / 4) {
            (0, 0) | (1, 1) => c,
            (0, 1) => -s,
            _ => s,
        }
    })
}

#[test]
fn circle_hessians_are_rotations_of_each_other() {
    let n = 72;
    let track = TrackData::circle(30.0, n, 2.0, 2.0).unwrap();
    let frames = compute_frames(&track).unwrap();
    let problem = build_raceline_qp(&track, &frames).unwrap();
    let h0 = &problem.qp.hessians[0];
    let scale = h0.max_abs();
    for (i, hi) in problem.qp.hessians.iter().enumerate() {
        let q = rotation(std::f64::consts::TAU * i as f64 / n as f64);
        let want = DenseBlock::from_fn(8, 8, |a, b| {
            (0..8)
                .flat_map(|k| (0..8).map(move |l| (k, l)))
                .map(|(k, l)| q[(a, k)] * h0[(k, l)] * q[(b, l)])
                .sum()
        });
        for a in 0..8 {
            for b in 0..8 {
                assert!((hi[(a, b)] - want[(a, b)]).abs() <= 1e-10 * scale, "stage {i}");
            }
        }
    }
}

#[test]
fn track_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oval.csv");
    let track = default_oval(257).unwrap();
    write_track(&path, &track).unwrap();
    assert_eq!(load_track(&path).unwrap(), track);
}

#[test]
fn race_line_csv_has_one_row_per_knot() {
    let track = TrackData::circle(20.0, 16, 1.0, 1.0).unwrap();
    let frames = compute_frames(&track).unwrap();
    let problem = build_raceline_qp(&track, &frames).unwrap();
    let theta = centerline_spline(&track);
    let mut out = Vec::new();
    write_raceline(&mut out, &problem, &theta).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "knot,x,y,offset,kappa");
    assert_eq!(lines.len(), 17);
}
