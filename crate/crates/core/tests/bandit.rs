use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segnas_core::controller::{Controller, ControllerConfig};

/// Reward 1 when the first connectivity index is 2, else 0.
#[test]
fn controller_learns_a_bandit_within_500_updates() {
    let cfg = ControllerConfig::default();
    let batch = cfg.batch_size;
    let mut c = Controller::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut reached = None;
    for update in 1..=500 {
        let rollouts: Vec<_> = (0..batch).map(|_| c.sample(&mut rng)).collect();
        let rewards: Vec<f64> = rollouts.iter().map(|r| f64::from(u8::from(r.tokens[0] == 2))).collect();
        c.ppo_update(&rollouts, &rewards).unwrap();
        let p = c.distribution(&[])[2];
        if p > 0.9 {
            reached = Some(update);
            break;
        }
    }
    assert!(reached.is_some(), "probability stayed below 0.9");
}
