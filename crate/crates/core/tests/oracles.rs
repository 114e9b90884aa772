mod common;

use common::oracle::{brute_force_path, monte_carlo_loss, random_model};
use fogbed_core::infra::effective_properties;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn shortest_path_matches_enumeration() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..300 {
        let model = random_model(&mut rng, 8);
        let ids = model.machine_ids();
        for a in &ids {
            for b in &ids {
                let eff = effective_properties(&model, a, b).unwrap();
                let (delay, path) = brute_force_path(&model, a, b).unwrap();
                assert_eq!((eff.delay, &eff.path), (delay, &path), "{a} -> {b} in {}", model.to_json());
            }
        }
    }
}

#[test]
fn loss_matches_monte_carlo() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..10 {
        let model = random_model(&mut rng, 6);
        let ids = model.machine_ids();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let eff = effective_properties(&model, a, b).unwrap();
                let sim = monte_carlo_loss(&model, &eff.path, 20_000, &mut rng);
                assert!((sim - eff.loss.value()).abs() < 0.015, "{a}-{b}: sim {sim} vs {}", eff.loss.value());
            }
        }
    }
}
