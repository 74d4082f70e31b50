use freezetune::scheduler::{
    frozen_count, layer_distance, random_subset, DistanceVector, INIT_RANGE,
};
use freezetune::{Scheduler, SchedulerKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Drives a scheduler for `iters` iterations, feeding small random
/// distances to the active layers. Returns every decision's frozen set.
fn simulate(kind: SchedulerKind, n: usize, rate: f64, seed: u64, iters: usize) -> Vec<Vec<usize>> {
    let mut s = Scheduler::new(kind, rate, (0..n).collect(), n, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut out = Vec::new();
    for it in 0..iters {
        let d = s.decide(it).unwrap();
        for &a in &d.active_ids {
            s.record_distance(a, rng.random_range(0.0..1e3));
        }
        out.push(d.frozen_ids);
    }
    out
}

#[test]
fn distance_hand_examples() {
    assert!((layer_distance(&[1.0f64, 2.0], &[1.1, 2.2]) - 0.1).abs() < 1e-12);
    assert_eq!(layer_distance(&[1.0f32, -3.0], &[1.0, -3.0]), 0.0);
    assert_eq!(layer_distance(&[0.0f32, 2.0], &[0.0, 2.0]), 0.0);
    assert!(layer_distance(&[0.0f64, 1.0], &[1e-6, 1.0]).is_finite());
}

#[test]
fn argsort_hand_example() {
    let dv = DistanceVector {
        d: vec![5.0, 1.0, 3.0, 2.0],
        initialized: vec![true; 4],
    };
    assert_eq!(dv.select_frozen(0.5).unwrap(), vec![1, 3]);
}

#[test]
fn init_range_and_seeds() {
    let a = DistanceVector::init(8, 1);
    assert_eq!(a, DistanceVector::init(8, 1));
    assert!(a
        .d
        .iter()
        .all(|&d| (INIT_RANGE.0..INIT_RANGE.1).contains(&d)));
    let b = DistanceVector::init(8, 2);
    let order = |v: &DistanceVector| {
        let mut idx: Vec<usize> = (0..8).collect();
        idx.sort_by(|&i, &j| v.d[i].total_cmp(&v.d[j]));
        idx
    };
    assert_ne!(order(&a), order(&b));
}

#[test]
fn random_baseline_frequency_matches_rate() {
    let (n, rate, draws) = (8, 0.5, 10_000);
    let mut counts = [0usize; 8];
    for it in 0..draws {
        for id in random_subset(n, rate, 42, it).unwrap() {
            counts[id] += 1;
        }
    }
    for c in counts {
        let freq = c as f64 / draws as f64;
        assert!((freq - rate).abs() <= 0.02, "frequency {freq}");
    }
}

#[test]
fn progressive_baseline_is_constant_prefix() {
    let runs = simulate(SchedulerKind::Progressive, 8, 0.25, 0, 20);
    assert!(runs.iter().all(|f| f == &vec![0, 1]));
    let none = simulate(SchedulerKind::Progressive, 8, 0.0, 0, 3);
    assert!(none.iter().all(Vec::is_empty));
}

fn kind() -> impl Strategy<Value = SchedulerKind> {
    prop_oneof![
        Just(SchedulerKind::Ils),
        Just(SchedulerKind::Random),
        Just(SchedulerKind::Progressive),
    ]
}

proptest! {
    #[test]
    fn exact_frozen_count_every_iteration(
        kind in kind(),
        n in 1usize..60,
        rate in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let want = (n as f64 * rate) as usize;
        prop_assert_eq!(frozen_count(n, rate), want);
        for frozen in simulate(kind, n, rate, seed, 15) {
            prop_assert_eq!(frozen.len(), want);
        }
    }

    #[test]
    fn warm_start_covers_every_layer(n in 1usize..60, rate in 0.0f64..0.95, seed in any::<u64>()) {
        let window = (1.0 / (1.0 - rate)).ceil() as usize;
        let runs = simulate(SchedulerKind::Ils, n, rate, seed, window);
        let mut seen = vec![false; n];
        for frozen in &runs {
            for (id, s) in seen.iter_mut().enumerate() {
                if !frozen.contains(&id) {
                    *s = true;
                }
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn schedules_are_deterministic(kind in kind(), n in 1usize..40, rate in 0.0f64..0.95, seed in any::<u64>()) {
        prop_assert_eq!(simulate(kind, n, rate, seed, 12), simulate(kind, n, rate, seed, 12));
    }

    #[test]
    fn measured_distances_rank_below_unmeasured(n in 2usize..40, rate in 0.05f64..0.95, seed in any::<u64>()) {
        let mut s = Scheduler::new(SchedulerKind::Ils, rate, (0..n).collect(), n, seed).unwrap();
        let d = s.decide(0).unwrap();
        for &a in &d.active_ids {
            s.record_distance(a, 1e3);
        }
        let next = s.decide(1).unwrap();
        let measured: Vec<usize> = d.active_ids.clone();
        // Frozen slots go to measured layers first.
        let k = next.frozen_ids.len();
        let expect_measured = k.min(measured.len());
        let got = next.frozen_ids.iter().filter(|id| measured.contains(id)).count();
        prop_assert_eq!(got, expect_measured);
    }

    #[test]
    fn frozen_distances_unchanged_by_updates(n in 2usize..40, rate in 0.1f64..0.9, seed in any::<u64>()) {
        let mut s = Scheduler::new(SchedulerKind::Ils, rate, (0..n).collect(), n, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for it in 0..10 {
            let d = s.decide(it).unwrap();
            let before: Vec<f64> = d.frozen_ids.iter().map(|&f| s.distance_of(f).unwrap()).collect();
            for &a in &d.active_ids {
                s.record_distance(a, rng.random_range(0.0..1.0));
            }
            let after: Vec<f64> = d.frozen_ids.iter().map(|&f| s.distance_of(f).unwrap()).collect();
            prop_assert_eq!(before, after);
        }
    }
}
