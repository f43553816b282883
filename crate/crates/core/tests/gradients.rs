mod common;

use std::time::Instant;

#[test]
fn training_loss_gradients_match_central_differences() {
    let started = Instant::now();
    for seed in 0..3 {
        let (params, dm, kd) = common::gradient_check(seed);
        assert!(params <= 500, "{params} parameters");
        assert!(dm < 1e-4, "seed {seed}: L_DM relative error {dm:e}");
        assert!(kd < 1e-4, "seed {seed}: L_KD relative error {kd:e}");
    }
    assert!(started.elapsed().as_secs_f64() < 10.0);
}
