use super::*;
use proptest::prelude::*;

fn big(n: u64) -> BigUint {
    BigUint::from(n)
}

#[test]
fn complexity_small_cases() {
    let r = complexity(3, None).unwrap();
    assert_eq!((r.arm.clone(), r.card.clone(), r.mdlm.clone()), (big(3), big(7), big(12)));
    assert_eq!(r.bd3lm, None);
    assert_eq!(complexity(4, Some(2)).unwrap().bd3lm, Some(big(8)));
    let one = complexity(1, Some(1)).unwrap();
    for v in [&one.arm, &one.card, one.bd3lm.as_ref().unwrap(), &one.mdlm] {
        assert_eq!(*v, big(1));
    }
    assert!(complexity(0, None).is_err());
    assert!(complexity(6, Some(4)).is_err());
}

#[test]
fn complexity_is_exact_for_long_sequences() {
    let r = complexity(200, Some(8)).unwrap();
    assert_eq!(r.card, (BigUint::one() << 200usize) - BigUint::one());
    assert_eq!(r.csv_row().split(',').count(), COMPLEXITY_HEADER.split(',').count());
}

#[test]
fn card_enumeration_matches_closed_form() {
    assert_eq!(count_card_contexts_bruteforce(1).unwrap(), 1);
    assert_eq!(count_card_contexts_bruteforce(3).unwrap(), 7);
    assert_eq!(count_card_contexts_bruteforce(10).unwrap(), 1023);
    for len in 1..=12 {
        let r = complexity(len, None).unwrap();
        assert_eq!(big(count_card_contexts_bruteforce(len).unwrap()), r.card, "L={len}");
    }
    assert!(count_card_contexts_bruteforce(17).is_err());
    assert!(count_card_contexts_bruteforce(0).is_err());
}

#[test]
fn other_enumerations_match_closed_forms() {
    for len in 1..=10 {
        for k in (1..=len).filter(|k| len % k == 0) {
            let r = complexity(len, Some(k)).unwrap();
            assert_eq!(big(count_contexts_bruteforce(Objective::Arm, len, k).unwrap()), r.arm);
            assert_eq!(big(count_contexts_bruteforce(Objective::Mdlm, len, k).unwrap()), r.mdlm);
            assert_eq!(
                big(count_contexts_bruteforce(Objective::Bd3lm, len, k).unwrap()),
                r.bd3lm.unwrap(),
                "L={len} K={k}"
            );
        }
    }
}

proptest! {
    #[test]
    fn complexity_ordering(len in 1usize..300, k_pick in any::<proptest::sample::Index>()) {
        let divisors: Vec<usize> = (1..=len).filter(|k| len % k == 0).collect();
        let k = divisors[k_pick.index(divisors.len())];
        let r = complexity(len, Some(k)).unwrap();
        let bd = r.bd3lm.clone().unwrap();
        prop_assert!(r.arm <= bd && bd <= r.mdlm);
        prop_assert!(r.arm <= r.card);
        prop_assert_eq!(r.card + BigUint::one(), BigUint::one() << len);
    }
}

fn reference_chain() -> MarkovSource {
    MarkovSource::two_state(0.9).unwrap()
}

#[test]
fn gains_sum_to_pairwise_total() {
    let m = reference_chain();
    let len = 16;
    let gain = mi_gains(&m, len).unwrap();
    let direct: f64 = (1..len).map(|lag| (len - lag) as f64 * m.lagged_mutual_information(lag).unwrap()).sum();
    assert!((gain.iter().sum::<f64>() - direct).abs() < 1e-12);
    assert_eq!(gain[len - 1], 0.0);
    assert!(gain.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn retention_limits() {
    let m = reference_chain();
    let cfg = MiConfig { t_grid: vec![0.0, 1.0], samples: 2000, ..Default::default() };
    let r = mi_retention(&m, &cfg).unwrap();
    let get = |s: MaskStrategy, t: f64| r.rows.iter().find(|x| x.strategy == s && x.t == t).unwrap().clone();
    let uni0 = get(MaskStrategy::Uniform, 0.0);
    assert!((uni0.mean - r.full).abs() < 1e-12);
    // One forced mask among the last two positions.
    let soft0 = get(MaskStrategy::SoftTail, 0.0);
    let i1 = m.lagged_mutual_information(1).unwrap();
    assert!(soft0.mean <= r.full && soft0.mean >= r.full - i1);
    assert_eq!(get(MaskStrategy::Uniform, 1.0).mean, 0.0);
    assert_eq!(get(MaskStrategy::SoftTail, 1.0).mean, 0.0);
}

#[test]
fn soft_tail_estimate_matches_exact_expectation() {
    let m = reference_chain();
    let cfg = MiConfig {
        strategies: vec![MaskStrategy::SoftTail],
        t_grid: vec![0.1, 0.25, 0.5, 0.75],
        samples: 5000,
        ..Default::default()
    };
    let r = mi_retention(&m, &cfg).unwrap();
    for row in &r.rows {
        let exact = soft_tail_expected_retention(&r.gain, row.t, cfg.tail_factor);
        assert!((row.mean - exact).abs() <= 4.0 * row.se + 1e-12, "t={} {} vs {exact}", row.t, row.mean);
    }
}

#[test]
fn uniform_estimate_matches_exact_expectation() {
    let m = reference_chain();
    let cfg = MiConfig { strategies: vec![MaskStrategy::Uniform], samples: 5000, ..Default::default() };
    let r = mi_retention(&m, &cfg).unwrap();
    for row in &r.rows {
        let exact = (1.0 - row.t) * r.full;
        assert!((row.mean - exact).abs() <= 4.0 * row.se, "t={}", row.t);
    }
}

#[test]
fn soft_tail_retains_more_with_a_clean_head() {
    let m = reference_chain();
    let cfg = MiConfig { t_grid: vec![0.25], ..Default::default() };
    let r = mi_retention(&m, &cfg).unwrap();
    let margin = &r.margins[0];
    assert!(margin.z() > 3.0, "margin {margin:?}");
}

#[test]
fn retention_is_deterministic_and_validated() {
    let m = reference_chain();
    let cfg = MiConfig { samples: 3000, ..Default::default() };
    assert_eq!(mi_retention(&m, &cfg).unwrap(), mi_retention(&m, &cfg).unwrap());
    let frozen = MarkovSource::two_state(1.0).unwrap();
    assert!(mi_retention(&frozen, &cfg).is_err());
    assert!(mi_retention(&m, &MiConfig { len: 33, ..cfg.clone() }).is_err());
    assert!(mi_retention(&m, &MiConfig { t_grid: vec![1.5], ..cfg }).is_err());
}

#[test]
fn mi_csv_shapes() {
    let r = mi_retention(&reference_chain(), &MiConfig { samples: 100, ..Default::default() }).unwrap();
    let csv = r.csv();
    assert!(csv.starts_with(MI_HEADER));
    assert_eq!(csv.lines().count(), 1 + 6);
    assert_eq!(r.margins_csv().lines().count(), 1 + 3);
}

#[test]
fn uniform_profile_is_flat() {
    let cfg = ContinuityConfig { samples: 20_000, ..Default::default() };
    let r = continuity_profile(MaskStrategy::Uniform, &cfg).unwrap();
    for (d, se) in r.diffs.iter().zip(&r.diff_se) {
        assert!(d.abs() <= 4.0 * se, "{d} vs {se}");
    }
    assert!(r.marginals.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn soft_tail_profile_matches_exact_marginals() {
    let cfg = ContinuityConfig { samples: 20_000, ..Default::default() };
    let r = continuity_profile(MaskStrategy::SoftTail, &cfg).unwrap();
    let exact = soft_tail_marginals_exact(cfg.len, cfg.tail_factor);
    for (i, (m, e)) in r.marginals.iter().zip(&exact).enumerate() {
        assert!((m - e).abs() <= 4.5 * r.se[i] + 1e-9, "position {i}: {m} vs {e}");
    }
    let (_, max_diff, se) = r.max_adjacent().unwrap();
    assert!(max_diff <= 2.0 / cfg.len as f64 + 4.0 * se);
}

#[test]
fn exact_soft_tail_profile_is_lipschitz() {
    for len in [8usize, 16, 64, 128] {
        let m = soft_tail_marginals_exact(len, 2.0);
        let max = m.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max <= 2.0 / len as f64, "L={len}: {max}");
        // Mean mask rate equals E[N]/L.
        let mean_n: f64 = (0..len).map(|k| k.max(1) as f64).sum::<f64>() / len as f64;
        assert!((m.iter().sum::<f64>() - mean_n).abs() < 1e-9);
    }
}

#[test]
fn block_profile_jumps_at_the_boundary() {
    let cfg = ContinuityConfig { t: Some(0.5), samples: 20_000, ..Default::default() };
    let r = continuity_profile(MaskStrategy::Block { size: 8 }, &cfg).unwrap();
    let b = r.boundary.clone().unwrap();
    assert_eq!(b.index, 8);
    assert!((b.jump - 0.5).abs() <= 4.0 * b.se, "{b:?}");
    assert!(r.marginals[..8].iter().all(|&p| p == 0.0));
    assert!(r.marginals[16..].iter().all(|&p| p == 0.0));
    let first = continuity_profile(MaskStrategy::Block { size: 8 }, &ContinuityConfig { block: Some(0), ..cfg })
        .unwrap();
    assert_eq!(first.boundary.unwrap().index, 7);
}

#[test]
fn profile_validation_and_determinism() {
    let cfg = ContinuityConfig { samples: 3000, ..Default::default() };
    let a = continuity_profile(MaskStrategy::SoftTail, &cfg).unwrap();
    assert_eq!(a, continuity_profile(MaskStrategy::SoftTail, &cfg).unwrap());
    assert_eq!(a.csv().lines().count(), 65);
    assert!(continuity_profile(MaskStrategy::SoftTail, &ContinuityConfig { len: 4, ..cfg.clone() }).is_err());
    assert!(continuity_profile(MaskStrategy::Block { size: 8 }, &ContinuityConfig { block: Some(8), ..cfg }).is_err());
}

#[test]
fn weight_bound_holds_and_clean_bin_is_exact() {
    let cfg = WeightSweepConfig { patterns: 3000, grad_patterns: 64, ..Default::default() };
    let r = weight_bound_sweep(&cfg).unwrap();
    assert!(r.max_ws < 1.0 && r.max_ws > 0.5);
    assert_eq!(r.positions, 3000 * 16);
    let zero = &r.bins[0];
    assert!(zero.count > 0);
    assert_eq!((zero.min_w, zero.max_w), (1.0, 1.0));
    for b in r.bins.iter().filter(|b| b.count > 0) {
        assert!(b.max_w <= 1.0 / (1.0 + b.lo) + 1e-12);
        assert!(b.min_w >= 1.0 / (1.0 + b.hi) - 1e-12);
    }
    for b in r.grad_bins.iter().filter(|b| b.count > 0) {
        assert!(b.weighted <= b.unweighted, "{b:?}");
    }
    assert_eq!(r, weight_bound_sweep(&cfg).unwrap());
    assert!(r.csv().starts_with(WEIGHT_HEADER));
    assert!(r.grad_csv().starts_with(GRAD_HEADER));
}
