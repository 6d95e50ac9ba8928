mod common;

#[test]
fn shifted_candidate_stays_feasible() {
    for seed in 0..6 {
        for branching in 0..=2 {
            let c = common::shift_instance(seed, branching).unwrap();
            assert!(c.prev_worst <= 0.0);
            assert!(c.next_worst <= 1e-8, "seed {seed}, n_r {branching}: {}", c.next_worst);
        }
    }
}
