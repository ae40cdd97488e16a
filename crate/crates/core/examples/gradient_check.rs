//! Finite-difference check of every op, the block and the tiny network.

use fbnet::gradcheck::{self, TOLERANCE};

fn main() -> fbnet::Result<()> {
    let seeds: Vec<u64> = (0..10).collect();
    let results = gradcheck::run(&seeds)?;
    let mut worst = 0.0f64;
    for r in &results {
        worst = worst.max(r.max_rel_error);
        if !r.passed() || r.seed == 0 {
            println!(
                "{:<26} seed {:>2}  {:>5} elems  max rel err {:.2e}",
                r.name, r.seed, r.elements, r.max_rel_error
            );
        }
    }
    println!(
        "{} checks, worst {:.2e} (tolerance {:.0e})",
        results.len(),
        worst,
        TOLERANCE
    );
    Ok(())
}
