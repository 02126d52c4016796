use arrowkkt::gen::{random_block_vector, random_spd_bta};
use arrowkkt::{make_layout, permutation_of, permute_rhs, unpermute_solution, DenseBlock, PartitionPlan};
use proptest::prelude::*;

/// Random plan for `m` stages with `p` segments.
fn plan_for(m: usize, p: usize, cuts: &[usize]) -> PartitionPlan {
    // Distribute m − (p − 1) interior stages so every segment gets at least one.
    let interior = m - (p - 1);
    let mut lens = vec![1; p];
    for (i, c) in cuts.iter().take(interior - p).enumerate() {
        lens[(c + i) % p] += 1;
    }
    PartitionPlan::new(lens).unwrap()
}

fn explicit_permutation(order: &[usize], b: usize, ng: usize) -> DenseBlock {
    let n = order.len() * b + ng;
    let mut p = DenseBlock::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for l in 0..b {
            p[(new * b + l, old * b + l)] = 1.0;
        }
    }
    for l in 0..ng {
        p[(n - ng + l, n - ng + l)] = 1.0;
    }
    p
}

fn naive_mul(a: &DenseBlock, b: &DenseBlock) -> DenseBlock {
    DenseBlock::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|l| a[(i, l)] * b[(l, j)]).sum())
}

fn scenario() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<usize>, u64)> {
    (1usize..=4, 1usize..=3, 0usize..=2, any::<u64>()).prop_flat_map(|(p, b, ng, seed)| {
        (2 * p - 1..=8.max(2 * p)).prop_flat_map(move |m| {
            (
                Just(m),
                Just(p),
                Just(b),
                Just(ng),
                prop::collection::vec(0usize..8, 8),
                Just(seed),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn layout_equals_explicit_permutation((m, p, b, ng, cuts, seed) in scenario()) {
        let psi = random_spd_bta(m, b, ng, seed, 1.0);
        let plan = plan_for(m, p, &cuts);
        let seg = make_layout(&psi, &plan).unwrap();
        prop_assert_eq!(&seg.to_matrix(), &psi);

        let perm = permutation_of(&plan, m).unwrap();
        let pm = explicit_permutation(perm.order(), b, ng);
        let pt = DenseBlock::from_fn(pm.cols(), pm.rows(), |i, j| pm[(j, i)]);
        let want = naive_mul(&naive_mul(&pm, &psi.to_dense()), &pt);
        prop_assert_eq!(seg.to_permuted_dense(), want);
    }

    #[test]
    fn permutation_is_bijective_and_round_trips((m, p, b, ng, cuts, seed) in scenario()) {
        let plan = plan_for(m, p, &cuts);
        let perm = permutation_of(&plan, m).unwrap();
        let mut seen = perm.order().to_vec();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..m).collect::<Vec<_>>());
        let ident = perm.compose(&perm.inverse());
        prop_assert_eq!(ident.order().to_vec(), (0..m).collect::<Vec<_>>());

        let r = random_block_vector(&vec![b; m], ng, seed);
        let rp = permute_rhs(&r, &plan).unwrap();
        let mut a: Vec<u64> = r.iter().map(f64::to_bits).collect();
        let mut c: Vec<u64> = rp.iter().map(f64::to_bits).collect();
        a.sort_unstable();
        c.sort_unstable();
        prop_assert_eq!(a, c);
        prop_assert_eq!(unpermute_solution(&rp, &plan).unwrap(), r);
    }

    #[test]
    fn plan_check_rejects_off_by_one(lens in prop::collection::vec(1usize..6, 1..7), delta in -2i64..=2) {
        let plan = PartitionPlan::new(lens.clone()).unwrap();
        let exact = lens.iter().sum::<usize>() + lens.len() - 1;
        let m = (exact as i64 + delta).max(0) as usize;
        prop_assert_eq!(plan.check(m).is_ok(), m == exact);
    }

    #[test]
    fn quadratic_form_matches_dense(m in 1usize..8, b in 1usize..4, ng in 0usize..3, seed in any::<u64>()) {
        let psi = random_spd_bta(m, b, ng, seed, 1.0);
        let x = random_block_vector(&vec![b; m], ng, seed ^ 1);
        let blockwise: f64 = psi.mul_vec(&x).iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let flat = x.to_flat();
        let dense = psi.to_dense();
        let full: f64 = (0..flat.len())
            .map(|i| flat[i] * (0..flat.len()).map(|j| dense[(i, j)] * flat[j]).sum::<f64>())
            .sum();
        prop_assert!((blockwise - full).abs() <= 1e-13 * full.abs().max(1.0));
    }
}

#[test]
fn five_stage_example() {
    let plan = PartitionPlan::new(vec![2, 2]).unwrap();
    assert_eq!(permutation_of(&plan, 5).unwrap().order(), &[0, 1, 3, 4, 2]);
    let r = random_block_vector(&[2; 5], 0, 3);
    let rp = permute_rhs(&r, &plan).unwrap();
    assert_eq!(rp.stages[4], r.stages[2]);
    let single = PartitionPlan::sequential(5).unwrap();
    assert_eq!(permute_rhs(&r, &single).unwrap(), r);
}
