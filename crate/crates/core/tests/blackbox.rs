use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use rae_core::blackbox::{mae_ba, BlackAttackConfig, BlackAttackResult, LabelProb, OracleError, QueryOracle};
use rae_core::quantize::{self, StageMatrix};
use rae_core::raster::Image8;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two classes; class 0 loses probability as the mean brightness of the
/// top-left quadrant rises above `pivot`.
struct Linear {
    pivot: f32,
    calls: AtomicUsize,
}

impl Linear {
    fn new(pivot: f32) -> Self {
        Self { pivot, calls: AtomicUsize::new(0) }
    }
}

impl QueryOracle for Linear {
    fn classify(&self, image: &Image8) -> Result<Vec<LabelProb>, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (h, w, c) = image.dims();
        let mut sum = 0.0;
        for r in 0..h / 2 {
            for col in 0..w / 2 {
                for ch in 0..c {
                    sum += image.get(r, col, ch) as f32;
                }
            }
        }
        let mean = sum / (h / 2 * (w / 2) * c) as f32;
        let p0 = 1.0 / (1.0 + ((mean - self.pivot) / 2.0).exp());
        let mut out = vec![LabelProb { label: 0, prob: p0 }, LabelProb { label: 1, prob: 1.0 - p0 }];
        out.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.label.cmp(&b.label)));
        Ok(out)
    }
}

fn grey(v: u8) -> Image8 {
    Image8::filled(16, 16, 3, v)
}

fn run(oracle: &Linear, x: &Image8, cfg: &BlackAttackConfig, seed: u64) -> BlackAttackResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mae_ba(x, &StageMatrix::zeros(16, 16, 4), 0, oracle, cfg, &mut rng).unwrap()
}

fn assert_monotone(r: &BlackAttackResult) {
    let mut cur = r.trajectory.first().map(|s| s.prob_before);
    for s in &r.trajectory {
        assert_eq!(Some(s.prob_before), cur, "step {} starts from a stale probability", s.iteration);
        if s.accepted.is_some() {
            assert!(s.prob_after < s.prob_before);
        } else {
            assert_eq!(s.prob_after, s.prob_before);
        }
        cur = Some(s.prob_after);
    }
}

#[test]
fn linear_oracle_is_fooled() {
    let oracle = Linear::new(130.0);
    let cfg = BlackAttackConfig { max_queries: 2000, ..Default::default() };
    let r = run(&oracle, &grey(124), &cfg, 1);
    assert!(r.success, "final prob {}", r.final_prob);
    assert!(r.final_prob < 0.5);
    assert_monotone(&r);
    assert_eq!(r.queries, oracle.calls.load(Ordering::SeqCst));
    assert_eq!(r.trajectory.last().unwrap().queries, r.queries);
    let adv = quantize::apply(&grey(124), &r.stages).unwrap();
    let quad: u32 = (0..8).flat_map(|r| (0..8).map(move |c| (r, c))).map(|(r, c)| adv.get(r, c, 0) as u32).sum();
    assert!(quad as f32 / 64.0 > 130.0);
}

#[test]
fn already_fooled_input_costs_one_query() {
    let oracle = Linear::new(100.0);
    let r = run(&oracle, &grey(124), &BlackAttackConfig::default(), 0);
    assert!(r.success);
    assert_eq!(r.queries, 1);
    assert!(r.trajectory.is_empty());
}

#[test]
fn unreachable_target_stops_at_budget() {
    let oracle = Linear::new(250.0);
    let cfg = BlackAttackConfig { max_queries: 57, iterations: 10_000, ..Default::default() };
    let r = run(&oracle, &grey(124), &cfg, 3);
    assert!(!r.success);
    assert_eq!(r.queries, 57);
    assert_eq!(oracle.calls.load(Ordering::SeqCst), 57);
    assert_monotone(&r);
}

#[test]
fn round_cap_bounds_the_trajectory() {
    let oracle = Linear::new(250.0);
    let cfg = BlackAttackConfig { iterations: 12, max_queries: 10_000, ..Default::default() };
    let r = run(&oracle, &grey(124), &cfg, 4);
    assert_eq!(r.trajectory.len(), 12);
    assert!(r.queries <= 1 + 2 * 12);
}

#[test]
fn enhancement_only_on_schedule() {
    let oracle = Linear::new(250.0);
    let cfg = BlackAttackConfig { iterations: 60, enhance_step: 5, ..Default::default() };
    let r = run(&oracle, &grey(124), &cfg, 8);
    for s in &r.trajectory {
        if s.enhanced {
            assert_eq!((s.iteration + 1) % 5, 0);
        }
    }
    assert!(r.trajectory.iter().any(|s| s.enhanced));
}

#[test]
fn saturated_pixels_stay_in_range() {
    let oracle = Linear::new(250.0);
    let cfg = BlackAttackConfig { max_queries: 300, ..Default::default() };
    let x = grey(253);
    let r = run(&oracle, &x, &cfg, 9);
    assert!(r.stages.data().iter().all(|&s| s <= 0));
    quantize::apply(&x, &r.stages).unwrap();
}

#[test]
fn same_seed_same_trajectory() {
    let cfg = BlackAttackConfig { max_queries: 400, ..Default::default() };
    let a = run(&Linear::new(140.0), &grey(124), &cfg, 11);
    let b = run(&Linear::new(140.0), &grey(124), &cfg, 11);
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.stages, b.stages);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn budget_and_accounting_hold(seed in any::<u64>(), budget in 1usize..200, pivot in 120.0f32..200.0, level in 20u8..235) {
        let oracle = Linear::new(pivot);
        let cfg = BlackAttackConfig { max_queries: budget, ..Default::default() };
        let r = run(&oracle, &grey(level), &cfg, seed);
        prop_assert!(r.queries <= budget);
        prop_assert_eq!(r.queries, oracle.calls.load(Ordering::SeqCst));
        prop_assert!(r.stages.data().iter().all(|s| (-2..=2).contains(s)));
        prop_assert!(quantize::apply(&grey(level), &r.stages).is_ok());
        let mut cur = f32::INFINITY;
        for s in r.trajectory.iter().filter(|s| s.accepted.is_some()) {
            prop_assert!(s.prob_after <= cur);
            cur = s.prob_after;
        }
    }
}
