mod common;

use common::{permutation_effect, tiny_shift};
use ear_tsm::shift::ShiftConfig;

#[test]
fn without_shift_segments_are_exchangeable() {
    for seed in 0..10 {
        let d = permutation_effect(&ShiftConfig::disabled(8), seed);
        assert!(d < 1e-9, "seed {seed}: {d}");
    }
}

#[test]
fn with_shift_order_matters() {
    let changed = (0..20)
        .filter(|&seed| permutation_effect(&tiny_shift(8), seed) > 1e-6)
        .count();
    assert!(changed >= 19, "{changed}/20");
}

#[test]
fn zero_fold_behaves_like_no_shift() {
    // shift_div larger than the narrowest block width moves nothing there, but
    // wider blocks still shift, so only the all-zero case is exchangeable
    let cfg = ShiftConfig {
        shift_div: 1000,
        ..tiny_shift(4)
    };
    assert!(permutation_effect(&cfg, 3) < 1e-9);
}
