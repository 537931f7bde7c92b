use jar_core::sampler::{compute_weights, proportional_weights, sample_batch_composition, TaskMixState};
use proptest::prelude::*;

fn state(losses: &[f64], floor: f64) -> TaskMixState {
    let mut s = TaskMixState::new(losses.len(), 0.0, floor).unwrap();
    for (i, l) in losses.iter().enumerate() {
        s.update_loss(i, *l).unwrap();
    }
    s
}

fn losses_and_floor() -> impl Strategy<Value = (Vec<f64>, f64)> {
    prop::collection::vec(0.0f64..50.0, 1..8).prop_flat_map(|l| {
        let max_floor = 1.0 / l.len() as f64;
        (Just(l), 0.0..=max_floor)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn weights_stay_on_the_simplex((losses, floor) in losses_and_floor()) {
        let w = compute_weights(&state(&losses, floor)).unwrap();
        let total: f64 = w.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        for wi in &w {
            prop_assert!(*wi >= 0.0);
            prop_assert!(*wi >= floor - 1e-12, "{} below floor {}", wi, floor);
        }
    }

    #[test]
    fn power_of_two_scaling_is_exact(losses in prop::collection::vec(0.01f64..50.0, 1..8), k in -20i32..20) {
        let scaled: Vec<f64> = losses.iter().map(|l| l * 2f64.powi(k)).collect();
        prop_assert_eq!(proportional_weights(&losses).unwrap(), proportional_weights(&scaled).unwrap());
    }

    #[test]
    fn arbitrary_scaling_is_invariant((losses, floor) in losses_and_floor(), c in 1e-6f64..1e6) {
        let scaled: Vec<f64> = losses.iter().map(|l| l * c).collect();
        let a = compute_weights(&state(&losses, floor)).unwrap();
        let b = compute_weights(&state(&scaled, floor)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn raising_a_loss_never_lowers_its_weight(
        losses in prop::collection::vec(0.0f64..50.0, 1..8),
        pick in any::<prop::sample::Index>(),
        bump in 0.0f64..20.0,
    ) {
        let i = pick.index(losses.len());
        let before = proportional_weights(&losses).unwrap()[i];
        let mut raised = losses.clone();
        raised[i] += bump;
        prop_assert!(proportional_weights(&raised).unwrap()[i] >= before);
    }

    #[test]
    fn batches_sum_and_respect_reservations((losses, floor) in losses_and_floor(), batch in 8usize..64, seed in any::<u64>()) {
        let s = state(&losses, floor);
        match sample_batch_composition(&s, batch, seed) {
            Ok(counts) => {
                prop_assert_eq!(counts.iter().sum::<usize>(), batch);
                if floor > 0.0 {
                    prop_assert!(counts.iter().all(|c| *c >= 1));
                }
            }
            Err(_) => prop_assert!(floor > 0.0),
        }
    }
}

fn mean_counts(s: &TaskMixState, batch: usize, draws: u64) -> Vec<f64> {
    let mut total = vec![0.0; s.tasks()];
    for seed in 0..draws {
        for (t, c) in total.iter_mut().zip(sample_batch_composition(s, batch, seed).unwrap()) {
            *t += c as f64;
        }
    }
    total.iter().map(|t| t / draws as f64).collect()
}

#[test]
fn mean_counts_match_weights_within_three_sigma() {
    let draws = 10_000;
    for (losses, floor, batch) in [(vec![0.99, 0.01], 0.1, 10), (vec![5.0, 3.0, 2.0], 0.0, 20), (vec![1.0; 4], 0.05, 16)] {
        let s = state(&losses, floor);
        let means = mean_counts(&s, batch, draws);
        for (m, w) in means.iter().zip(s.weights()) {
            let expect = batch as f64 * w;
            let p = w.clamp(1e-9, 1.0);
            let sigma = (batch as f64 * p * (1.0 - p) / draws as f64).sqrt();
            assert!((m - expect).abs() <= 3.0 * sigma + 1e-9, "{losses:?}: mean {m} vs {expect}");
        }
    }
}

#[test]
fn mass_moves_to_the_slowest_learner() {
    // Each draw of a task shrinks its loss by its own factor.
    let decay = [0.90, 0.97, 0.995];
    let mut loss = [2.0, 2.0, 2.0];
    let mut s = TaskMixState::new(3, 0.9, 0.02).unwrap();
    for step in 0..400u64 {
        let counts = sample_batch_composition(&s, 8, step).unwrap();
        for t in 0..3 {
            for _ in 0..counts[t] {
                loss[t] *= decay[t];
            }
            s.update_loss(t, loss[t]).unwrap();
        }
    }
    let w = s.weights();
    assert!(w[2] > w[1] && w[1] > w[0], "{w:?}");
    assert!(w[2] > 0.5);
}
