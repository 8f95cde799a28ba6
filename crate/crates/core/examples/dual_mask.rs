//! Prints a causal mask and a few dual masks, then checks the per-position
//! masking frequency.

use pointar::model::{build_dual_mask, masked_count};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pointar::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("causal:\n{}", build_dual_mask(8, 0.0, &mut rng)?.mask.to_grid());
    for draw in 0..2 {
        println!(
            "ratio 0.7, draw {draw}:\n{}",
            build_dual_mask(8, 0.7, &mut rng)?.mask.to_grid()
        );
    }

    let n = 11;
    let draws = 10_000;
    let mut hidden = vec![0usize; n - 1];
    for _ in 0..draws {
        let m = build_dual_mask(n, 0.7, &mut rng)?.mask;
        for (c, h) in hidden.iter_mut().enumerate() {
            if !m.allows(n - 1, c) {
                *h += 1;
            }
        }
    }
    println!(
        "last row of n = {n} hides {} of {} earlier patches",
        masked_count(0.7, n - 1),
        n - 1
    );
    let freq: Vec<String> = hidden
        .iter()
        .map(|&h| format!("{:.3}", h as f64 / draws as f64))
        .collect();
    println!("per-position masking frequency: {}", freq.join(" "));
    Ok(())
}
