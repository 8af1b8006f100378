//! Print segment-sampling indices for a range of video lengths, in both the
//! centre (evaluation) and seeded random (training) modes.
//!
//! cargo run --example sample_frames -- [SEGMENTS] [SEED]

use ear_tsm::sampler::{sample_indices, SampleSpec};

fn main() -> ear_tsm::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    println!("{k} segments");
    for l in [1, 3, 8, 16, 37, 300] {
        let centre = sample_indices(l, &SampleSpec::eval(k))?;
        let random = sample_indices(l, &SampleSpec::train(k, seed))?;
        println!("L={l:<4} centre {centre:?}");
        println!("       random {random:?}");
    }
    Ok(())
}
